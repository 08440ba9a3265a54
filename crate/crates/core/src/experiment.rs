//! Experiment configuration, the student-teacher training loop with
//! confidence-driven pixel sampling, run reports and the ablation grid.

use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{fuse_indicators, simple_average_cc, ConfidenceArray, FusionConfig};
use crate::indicators::{compute_indicators, EntropyForm};
use crate::losses::{
    batch_mean, draw_sample_mask, sampling_rates, stabilization_weights, supervised_loss, total_loss,
    unsupervised_loss, zeta_at, SampleMask, SamplerConfig, WeightMap, ZetaSchedule,
};
use crate::metrics::{DatasetMetrics, MetricReport};
use crate::model::{
    augment, backward, ema_weights, forward, predict, pseudo_label, sgd_step, AugmentDraw, AugmentSpec,
    Architecture, ModelParams, OptimizerState, SgdConfig,
};
use crate::numcore::{argmax_map, softmax, LabelMask, ProbMap};
use crate::phantom::{PhantomDataset, Split};
use crate::rng::{self, purpose};

/// Source of the class confidence that drives pixel sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcsMode {
    /// No sampling; every pseudo-labelled pixel is kept.
    Off,
    SimpleAvg,
    #[default]
    Fuzzy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    #[default]
    On,
    Off,
}

/// Which weights are scored during evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Student,
    #[default]
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seeds used by the ablation grid.
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub batch_labelled: usize,
    pub batch_unlabelled: usize,
    /// Re-partitions the non-test pool so this fraction of it is labelled;
    /// `None` keeps the dataset's own split.
    pub label_fraction: Option<f64>,
    /// Share of the labelled images held out for validation.
    pub validation_fraction: f64,
    pub features: usize,
    pub rcs: RcsMode,
    pub dts: Toggle,
    pub beta: f64,
    pub teacher_decay: f64,
    pub entropy_form: EntropyForm,
    pub eval_period: usize,
    pub eval_model: EvalModel,
    /// Iterations between CC / sampling-rate trace points.
    pub trace_period: usize,
    pub fusion: FusionConfig,
    pub sampler: SamplerConfig,
    pub zeta: ZetaSchedule,
    pub weak: AugmentSpec,
    pub strong: AugmentSpec,
    pub sgd: SgdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            iterations: 2000,
            batch_labelled: 4,
            batch_unlabelled: 4,
            label_fraction: None,
            validation_fraction: 0.2,
            features: 16,
            rcs: RcsMode::Fuzzy,
            dts: Toggle::On,
            beta: 1.5,
            teacher_decay: 0.99,
            entropy_form: EntropyForm::Literal,
            eval_period: 200,
            eval_model: EvalModel::Teacher,
            trace_period: 10,
            fusion: FusionConfig::default(),
            sampler: SamplerConfig::default(),
            zeta: ZetaSchedule::default(),
            weak: AugmentSpec::weak(),
            strong: AugmentSpec::strong(),
            sgd: SgdConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_labelled == 0 || self.batch_unlabelled == 0 {
            return bad("batch sizes must be positive");
        }
        if let Some(f) = self.label_fraction {
            if !(f > 0.0 && f < 1.0) {
                return bad("label_fraction must lie in (0, 1)");
            }
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.features == 0 {
            return bad("features must be positive");
        }
        if !(self.beta >= 0.0) || !(self.sampler.lambda >= 0.0) {
            return bad("beta and lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.teacher_decay) {
            return bad("teacher_decay must lie in [0, 1]");
        }
        if self.eval_period == 0 || self.trace_period == 0 {
            return bad("eval_period and trace_period must be positive");
        }
        if !(self.sgd.lr > 0.0) || !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return bad("sgd needs lr > 0, momentum in [0, 1) and weight_decay >= 0");
        }
        self.zeta.validate()?;
        self.fusion.validate(classes)?;
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Index sets used by one run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labelled: Vec<usize>,
    pub validation: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub test: Vec<usize>,
}

/// Labelled images split into training and validation with a per-seed
/// shuffle; the unlabelled pool and the test split are taken as stored
/// unless `label_fraction` asks for a new labelled share.
pub fn partition(data: &PhantomDataset, cfg: &ExperimentConfig) -> Result<Partition> {
    let test = data.indices(Split::Test);
    let (labelled_pool, unlabelled) = match cfg.label_fraction {
        None => (data.indices(Split::Labelled), data.indices(Split::Unlabelled)),
        Some(f) => {
            let mut pool = data.indices(Split::Labelled);
            pool.extend(data.indices(Split::Unlabelled));
            let n = ((f * pool.len() as f64).round() as usize).max(1);
            let rest = pool.split_off(n);
            (pool, rest)
        }
    };
    let mut shuffled = labelled_pool;
    let mut r = rng::stream(cfg.seed, purpose::SPLIT, 0, 0);
    let order = index::sample(&mut r, shuffled.len(), shuffled.len()).into_vec();
    shuffled = order.into_iter().map(|i| shuffled[i]).collect();
    let n_val = (cfg.validation_fraction * shuffled.len() as f64).round() as usize;
    let validation = shuffled.split_off(shuffled.len() - n_val);
    if shuffled.is_empty() || unlabelled.is_empty() {
        return Err(Error::Config(format!(
            "need labelled and unlabelled training images, have {} and {}",
            shuffled.len(),
            unlabelled.len()
        )));
    }
    Ok(Partition { labelled: shuffled, validation, unlabelled, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iteration: usize,
    pub metrics: MetricReport,
}

/// Indicators and confidence after one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcPoint {
    pub iteration: usize,
    pub entropy: Vec<Option<f64>>,
    pub variance: Vec<Option<f64>>,
    pub confidence: Vec<Option<f64>>,
    /// Smoothed confidence array; `None` when sampling is off.
    pub cc: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub iteration: usize,
    pub rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub zeta: f64,
    pub total: f64,
}

/// Whole-run averages used for quick checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean sampling rate per class over every iteration.
    pub mean_rates: Vec<f64>,
    /// Mean smoothed CC per class over the final fifth of the run.
    pub mean_cc_final: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub seed: u64,
    pub labelled: usize,
    pub validation: usize,
    pub unlabelled: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub dataset: DatasetInfo,
    pub evaluations: Vec<Evaluation>,
    /// Metrics on the test split at the end of training, when it exists.
    pub test: Option<MetricReport>,
    pub cc_trace: Vec<CcPoint>,
    pub rate_trace: Vec<RatePoint>,
    pub loss_curve: Vec<LossPoint>,
    pub summary: RunSummary,
    /// Kept out of the JSON so identical runs serialize identically.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Test metrics when available, otherwise the last validation pass.
    pub fn final_metrics(&self) -> Option<&MetricReport> {
        self.test.as_ref().or_else(|| self.evaluations.last().map(|e| &e.metrics))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_cc_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["iteration", "class", "E", "V", "Con", "CC"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for p in &self.cc_trace {
            for c in 0..p.entropy.len() {
                wtr.write_record([
                    p.iteration.to_string(),
                    c.to_string(),
                    opt(p.entropy[c]),
                    opt(p.variance[c]),
                    opt(p.confidence[c]),
                    opt(p.cc.as_ref().map(|cc| cc[c])),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_rate_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["iteration", "class", "rate"])?;
        for p in &self.rate_trace {
            for (c, r) in p.rates.iter().enumerate() {
                wtr.write_record([p.iteration.to_string(), c.to_string(), r.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_loss_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["iteration", "supervised", "unsupervised", "zeta", "total"])?;
        for p in &self.loss_curve {
            wtr.write_record([
                p.iteration.to_string(),
                p.supervised.to_string(),
                p.unsupervised.to_string(),
                p.zeta.to_string(),
                p.total.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Report plus the final weights.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub student: ModelParams,
    pub teacher: ModelParams,
}

/// Scores `params` on the given images as one pooled set.
pub fn evaluate_split(params: &ModelParams, data: &PhantomDataset, indices: &[usize]) -> Result<MetricReport> {
    let mut acc = DatasetMetrics::new(data.classes);
    for &i in indices {
        let s = &data.samples[i];
        acc.add(&argmax_map(&predict(params, &s.image)?), &s.mask)?;
    }
    Ok(acc.report())
}

fn batch_indices(seed: u64, t: usize, which: u64, pool: &[usize], size: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, purpose::BATCH, t as u64, which);
    let size = size.min(pool.len());
    index::sample(&mut r, pool.len(), size).into_iter().map(|i| pool[i]).collect()
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    iteration: usize,
    supervised: f64,
    unsupervised: f64,
    zeta: f64,
    cc: &'a [f64],
    rates: &'a [f64],
    student_finite: bool,
    student_max_abs: f64,
}

/// Turns a numeric failure inside the loop into a divergence report.
fn numeric_failure(e: Error, iteration: usize, cc: &[f64]) -> Error {
    match e {
        Error::NonFiniteLogits | Error::NonFinite(_) => Error::Divergence {
            iteration,
            reason: e.to_string(),
            dump: serde_json::json!({ "iteration": iteration, "cc": cc }).to_string(),
        },
        other => other,
    }
}

pub fn train(cfg: &ExperimentConfig, data: &PhantomDataset) -> Result<TrainOutcome> {
    let start = Instant::now();
    let classes = data.classes;
    cfg.validate(classes)?;
    let parts = partition(data, cfg)?;
    let arch = Architecture::new(1, cfg.features, classes);
    let mut student = ModelParams::init(arch, cfg.seed);
    let mut teacher = student.clone();
    let mut opt = OptimizerState::new(cfg.sgd.clone(), arch);
    let mut confidence = ConfidenceArray::new(classes, cfg.fusion.initial_cc, cfg.fusion.alpha);
    let mask_seed = cfg.seed ^ cfg.sampler.seed;
    let final_from = cfg.iterations - cfg.iterations / 5;

    let mut evaluations = Vec::new();
    let mut cc_trace = Vec::new();
    let mut rate_trace = Vec::new();
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    let mut rate_sums = vec![0.0; classes];
    let mut cc_sums = vec![0.0; classes];

    for t in 0..cfg.iterations {
        // (1) student on weakly augmented labelled images
        let lab = batch_indices(cfg.seed, t, 0, &parts.labelled, cfg.batch_labelled);
        let mut lab_probs = Vec::with_capacity(lab.len());
        let mut lab_masks = Vec::with_capacity(lab.len());
        let mut lab_caches = Vec::with_capacity(lab.len());
        for (k, &i) in lab.iter().enumerate() {
            let s = &data.samples[i];
            let mut r = rng::stream(cfg.seed, purpose::AUGMENT_LABELLED, t as u64, k as u64);
            let (view, mask, _) = augment(&s.image, Some(&s.mask), &cfg.weak, &mut r);
            let fail = |e| numeric_failure(e, t, &confidence.cc);
            let (logits, cache) = forward(&student, &view).map_err(fail)?;
            lab_probs.push(softmax(&logits).map_err(fail)?);
            lab_masks.push(mask.expect("mask was passed"));
            lab_caches.push(cache);
        }

        // (1-2) teacher pseudo-labels on weak views; the strong view is built on top of the
        // weak one and its geometric part moves the pseudo-label along
        let unl = batch_indices(cfg.seed, t, 1, &parts.unlabelled, cfg.batch_unlabelled);
        let mut pseudo: Vec<LabelMask> = Vec::with_capacity(unl.len());
        let mut unl_probs: Vec<ProbMap> = Vec::with_capacity(unl.len());
        let mut unl_caches = Vec::with_capacity(unl.len());
        for (k, &i) in unl.iter().enumerate() {
            let mut r = rng::stream(cfg.seed, purpose::AUGMENT_UNLABELLED_WEAK, t as u64, k as u64);
            let fail = |e| numeric_failure(e, t, &confidence.cc);
            let pl = pseudo_label(&teacher, &data.samples[i].image, &cfg.weak, &mut r).map_err(fail)?;
            let mut r = rng::stream(cfg.seed, purpose::AUGMENT_UNLABELLED_STRONG, t as u64, k as u64);
            let draw = AugmentDraw::sample(&cfg.strong, pl.view.h, pl.view.w, &mut r);
            let (logits, cache) = forward(&student, &draw.apply_image(&pl.view)).map_err(fail)?;
            unl_probs.push(softmax(&logits).map_err(fail)?);
            unl_caches.push(cache);
            pseudo.push(draw.geometric.apply_mask(&pl.mask));
        }

        // (3-5) indicators, confidence and its running average
        let triple = compute_indicators(&lab_probs, &lab_masks, classes, cfg.entropy_form)?;
        let fresh = match cfg.rcs {
            RcsMode::Off => None,
            RcsMode::SimpleAvg => Some(simple_average_cc(&triple, &cfg.fusion.orientation)?),
            RcsMode::Fuzzy => Some(fuse_indicators(&triple, &cfg.fusion)?.cc),
        };
        if let Some(fresh) = &fresh {
            confidence.update(fresh)?;
        }

        // (6) sampling rates, masks and weights
        let rates = match cfg.rcs {
            RcsMode::Off => vec![1.0; classes],
            _ => sampling_rates(&confidence.cc, cfg.sampler.lambda),
        };
        let mut unl_terms = Vec::with_capacity(unl.len());
        for (k, (probs, target)) in unl_probs.iter().zip(&pseudo).enumerate() {
            let mask = match cfg.rcs {
                RcsMode::Off => SampleMask::all(target.h, target.w),
                _ => {
                    let mut r = rng::stream(mask_seed, purpose::SAMPLE_MASK, t as u64, k as u64);
                    draw_sample_mask(target, &rates, &mut r)?
                }
            };
            let weights = match cfg.dts {
                Toggle::On => stabilization_weights(probs, &mask, cfg.beta)?,
                Toggle::Off => WeightMap::from_mask(&mask),
            };
            let active = weights.total() > 0.0;
            unl_terms.push((unsupervised_loss(probs, target, &weights)?, active));
        }

        // (7) losses
        let sup_terms = lab_probs
            .iter()
            .zip(&lab_masks)
            .map(|(p, m)| Ok((supervised_loss(p, m)?, true)))
            .collect::<Result<Vec<_>>>()?;
        let (ls, sup_grads) = batch_mean(sup_terms);
        let (lu, unl_grads) = batch_mean(unl_terms);
        let zeta = zeta_at(t, &cfg.zeta, cfg.iterations);
        let total = total_loss(lu, ls, zeta);

        let diverged = |reason: String, student: &ModelParams| {
            let dump = DivergenceDump {
                iteration: t,
                supervised: ls,
                unsupervised: lu,
                zeta,
                cc: &confidence.cc,
                rates: &rates,
                student_finite: student.is_finite(),
                student_max_abs: student.blocks.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs())),
            };
            Error::Divergence {
                iteration: t,
                reason,
                dump: serde_json::to_string(&dump).unwrap_or_default(),
            }
        };
        if !total.is_finite() {
            return Err(diverged(format!("non-finite loss {total}"), &student));
        }

        // (8) backward and SGD
        let mut grads = ModelParams::zeros(arch);
        for (cache, g) in lab_caches.iter().zip(&sup_grads) {
            grads.axpy(zeta, &backward(&student, cache, g)?);
        }
        for (cache, g) in unl_caches.iter().zip(&unl_grads) {
            grads.axpy(1.0, &backward(&student, cache, g)?);
        }
        if !grads.is_finite() {
            return Err(diverged("non-finite gradient".into(), &student));
        }
        sgd_step(&mut student, &grads, &mut opt)?;
        if !student.is_finite() {
            return Err(diverged("non-finite parameters after the update".into(), &student));
        }

        // (9) teacher
        ema_weights(&mut teacher, &student, cfg.teacher_decay)?;

        loss_curve.push(LossPoint { iteration: t, supervised: ls, unsupervised: lu, zeta, total });
        for (s, r) in rate_sums.iter_mut().zip(&rates) {
            *s += r;
        }
        if t >= final_from {
            for (s, c) in cc_sums.iter_mut().zip(&confidence.cc) {
                *s += c;
            }
        }
        if t % cfg.trace_period == 0 || t + 1 == cfg.iterations {
            cc_trace.push(CcPoint {
                iteration: t,
                entropy: triple.entropy.clone(),
                variance: triple.variance.clone(),
                confidence: triple.confidence.clone(),
                cc: fresh.as_ref().map(|_| confidence.cc.clone()),
            });
            rate_trace.push(RatePoint { iteration: t, rates: rates.clone() });
        }
        let scored = match cfg.eval_model {
            EvalModel::Student => &student,
            EvalModel::Teacher => &teacher,
        };
        if !parts.validation.is_empty() && ((t + 1) % cfg.eval_period == 0 || t + 1 == cfg.iterations) {
            let metrics = evaluate_split(scored, data, &parts.validation).map_err(|e| numeric_failure(e, t, &confidence.cc))?;
            evaluations.push(Evaluation { iteration: t + 1, metrics });
        }
    }

    let scored = match cfg.eval_model {
        EvalModel::Student => &student,
        EvalModel::Teacher => &teacher,
    };
    let test = if parts.test.is_empty() { None } else { Some(evaluate_split(scored, data, &parts.test)?) };
    let n = cfg.iterations as f64;
    let n_final = (cfg.iterations - final_from) as f64;
    let summary = RunSummary {
        mean_rates: rate_sums.into_iter().map(|s| s / n).collect(),
        mean_cc_final: (cfg.rcs != RcsMode::Off).then(|| cc_sums.into_iter().map(|s| s / n_final).collect()),
    };
    let report = RunReport {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        dataset: DatasetInfo {
            h: data.h,
            w: data.w,
            classes,
            seed: data.seed,
            labelled: parts.labelled.len(),
            validation: parts.validation.len(),
            unlabelled: parts.unlabelled.len(),
            test: parts.test.len(),
        },
        evaluations,
        test,
        cc_trace,
        rate_trace,
        loss_curve,
        summary,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, student, teacher })
}

/// One row of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub rcs: RcsMode,
    pub dts: Toggle,
}

pub const ABLATION_VARIANTS: [AblationVariant; 5] = [
    AblationVariant { name: "base", rcs: RcsMode::Off, dts: Toggle::Off },
    AblationVariant { name: "rcs_simple_avg", rcs: RcsMode::SimpleAvg, dts: Toggle::Off },
    AblationVariant { name: "rcs_fuzzy", rcs: RcsMode::Fuzzy, dts: Toggle::Off },
    AblationVariant { name: "rcs_simple_avg_dts", rcs: RcsMode::SimpleAvg, dts: Toggle::On },
    AblationVariant { name: "full", rcs: RcsMode::Fuzzy, dts: Toggle::On },
];

impl AblationVariant {
    pub fn apply(&self, cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        ExperimentConfig { seed, rcs: self.rcs, dts: self.dts, ..cfg.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricReport,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationResult {
    pub fn runs_of<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a AblationRun> + 'a {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    /// Mean and sample standard deviation of one class's DSC over seeds.
    pub fn class_dsc(&self, variant: &str, class: usize) -> (f64, f64) {
        let v: Vec<f64> = self.runs_of(variant).map(|r| r.metrics.classes[class].dsc).collect();
        mean_std(&v)
    }

    pub fn macro_dsc(&self, variant: &str) -> (f64, f64) {
        let v: Vec<f64> = self.runs_of(variant).map(|r| r.metrics.macro_dsc).collect();
        mean_std(&v)
    }

    /// Per-run rows for every class and the macro average, followed by
    /// `mean` and `std` rows per variant. Undefined distances are left blank
    /// and skipped in the aggregates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["config", "seed", "class", "dsc", "asd", "hd"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let rows = |m: &MetricReport| -> Vec<(String, f64, Option<f64>, Option<f64>)> {
            let mut rows: Vec<_> = m.classes.iter().map(|c| (c.class.to_string(), c.dsc, c.asd, c.hd)).collect();
            rows.push(("macro".into(), m.macro_dsc, m.macro_asd, m.macro_hd));
            rows
        };
        let mut names: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
            for (class, dsc, asd, hd) in rows(&r.metrics) {
                wtr.write_record([r.variant.clone(), r.seed.to_string(), class, dsc.to_string(), opt(asd), opt(hd)])?;
            }
        }
        for name in names {
            let per_run: Vec<_> = self.runs_of(name).map(|r| rows(&r.metrics)).collect();
            for k in 0..per_run[0].len() {
                let col = |f: &dyn Fn(&(String, f64, Option<f64>, Option<f64>)) -> Option<f64>| -> Vec<f64> {
                    per_run.iter().filter_map(|rows| f(&rows[k])).collect()
                };
                let stats = |v: Vec<f64>| (!v.is_empty()).then(|| mean_std(&v));
                let dsc = stats(col(&|r| Some(r.1)));
                let asd = stats(col(&|r| r.2));
                let hd = stats(col(&|r| r.3));
                let class = per_run[0][k].0.clone();
                for (label, pick) in [("mean", 0), ("std", 1)] {
                    let get = |s: Option<(f64, f64)>| s.map(|(m, d)| if pick == 0 { m } else { d });
                    wtr.write_record([
                        name.to_string(),
                        label.to_string(),
                        class.clone(),
                        opt(get(dsc)),
                        opt(get(asd)),
                        opt(get(hd)),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Trains every ablation variant for every seed, variant-major, calling
/// `progress` after each run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &PhantomDataset,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationVariant, u64, &RunReport),
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len() * ABLATION_VARIANTS.len());
    for variant in &ABLATION_VARIANTS {
        for &seed in seeds {
            let out = train(&variant.apply(cfg, seed), data)?;
            progress(variant, seed, &out.report);
            let metrics = out
                .report
                .final_metrics()
                .cloned()
                .ok_or_else(|| Error::Config("run produced no evaluation".into()))?;
            runs.push(AblationRun { variant: variant.name.to_string(), seed, metrics, summary: out.report.summary });
        }
    }
    Ok(AblationResult { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantoms, PhantomConfig};

    fn tiny_data() -> PhantomDataset {
        let cfg = PhantomConfig { h: 16, w: 20, n_labelled: 5, n_unlabelled: 10, n_test: 2, ..PhantomConfig::default() };
        generate_phantoms(&cfg).unwrap()
    }

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig { iterations: 6, features: 4, eval_period: 3, trace_period: 2, ..ExperimentConfig::default() }
    }

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = ExperimentConfig::from_json(r#"{"rcs": "simple_avg", "dts": "off", "sgd": {"lr": 0.01}}"#).unwrap();
        assert_eq!(cfg.rcs, RcsMode::SimpleAvg);
        assert_eq!(cfg.dts, Toggle::Off);
        assert_eq!(cfg.sgd.lr, 0.01);
        assert_eq!(cfg.sgd.momentum, 0.9);
        assert!(matches!(ExperimentConfig::from_json(r#"{"iterationz": 3}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"sgd": {"rate": 3}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), ExperimentConfig { seed: 1, ..a.clone() }.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partition_is_disjoint_and_seeded() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let p = partition(&data, &cfg).unwrap();
        assert_eq!((p.labelled.len(), p.validation.len(), p.unlabelled.len(), p.test.len()), (4, 1, 10, 2));
        let mut all: Vec<usize> = [&p.labelled, &p.validation, &p.unlabelled, &p.test].into_iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
        assert_eq!(p, partition(&data, &cfg).unwrap());
        let refrac = partition(&data, &ExperimentConfig { label_fraction: Some(0.4), ..cfg }).unwrap();
        assert_eq!(refrac.labelled.len() + refrac.validation.len(), 6);
        assert_eq!(refrac.unlabelled.len(), 9);
    }

    #[test]
    fn short_run_produces_a_complete_report() {
        let data = tiny_data();
        let out = train(&tiny_cfg(), &data).unwrap();
        let r = &out.report;
        assert_eq!(r.loss_curve.len(), 6);
        assert_eq!(r.evaluations.iter().map(|e| e.iteration).collect::<Vec<_>>(), vec![3, 6]);
        assert_eq!(r.cc_trace.iter().map(|p| p.iteration).collect::<Vec<_>>(), vec![0, 2, 4, 5]);
        assert!(r.test.is_some());
        assert!(r.loss_curve.iter().all(|p| p.total.is_finite()));
        assert_eq!(r.summary.mean_rates.len(), 4);
        let mut buf = Vec::new();
        r.write_cc_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,class,E,V,Con,CC\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 4);
        assert_ne!(out.student, out.teacher);
    }

    #[test]
    fn same_seed_same_report() {
        let data = tiny_data();
        let a = train(&tiny_cfg(), &data).unwrap().report.to_json().unwrap();
        let b = train(&tiny_cfg(), &data).unwrap().report.to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_off_matches_unit_rates() {
        let data = tiny_data();
        let base = ExperimentConfig { rcs: RcsMode::Off, dts: Toggle::Off, ..tiny_cfg() };
        let unit = ExperimentConfig {
            rcs: RcsMode::Fuzzy,
            dts: Toggle::Off,
            sampler: SamplerConfig { lambda: 0.0, ..SamplerConfig::default() },
            ..tiny_cfg()
        };
        let a = train(&base, &data).unwrap();
        let b = train(&unit, &data).unwrap();
        let bits = |r: &RunReport| r.loss_curve.iter().map(|p| p.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.report), bits(&b.report));
        assert_eq!(a.student, b.student);
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data();
        let cfg = ExperimentConfig { sgd: SgdConfig { lr: 1e6, ..SgdConfig::default() }, iterations: 50, ..tiny_cfg() };
        match train(&cfg, &data) {
            Err(Error::Divergence { dump, .. }) => assert!(dump.contains("\"cc\"")),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.report.loss_curve.len())),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = tiny_data();
        for cfg in [
            ExperimentConfig { iterations: 0, ..tiny_cfg() },
            ExperimentConfig { batch_labelled: 0, ..tiny_cfg() },
            ExperimentConfig { label_fraction: Some(1.5), ..tiny_cfg() },
            ExperimentConfig { teacher_decay: 2.0, ..tiny_cfg() },
        ] {
            assert!(matches!(train(&cfg, &data), Err(Error::Config(_))));
        }
    }

    #[test]
    fn ablation_covers_every_variant_and_matches_single_runs() {
        let data = tiny_data();
        let cfg = ExperimentConfig { iterations: 3, ..tiny_cfg() };
        let result = run_ablation(&cfg, &data, &[7, 8], |_, _, _| {}).unwrap();
        assert_eq!(result.runs.len(), 10);
        let names: Vec<&str> = ABLATION_VARIANTS.iter().map(|v| v.name).collect();
        assert_eq!(names, ["base", "rcs_simple_avg", "rcs_fuzzy", "rcs_simple_avg_dts", "full"]);
        let single = train(&ABLATION_VARIANTS[4].apply(&cfg, 8), &data).unwrap();
        let from_grid = result.runs_of("full").find(|r| r.seed == 8).unwrap();
        assert_eq!(&from_grid.metrics, single.report.final_metrics().unwrap());
        let mut buf = Vec::new();
        result.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("config,seed,class,dsc,asd,hd"));
        // 10 runs x 5 rows, then 5 variants x 5 rows x (mean, std)
        assert_eq!(text.lines().count(), 1 + 50 + 50);
        assert!(text.contains("\nfull,mean,macro,"));
    }
}
