//! Supervised and pseudo-label losses with class-wise pixel sampling and
//! confidence-based pixel weighting. Gradients are taken with respect to the
//! logits that produced the probability map (softmax + cross-entropy).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{LabelMask, ProbMap};

/// Loss value and its gradient with respect to the logits (same layout as
/// the probability map).
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub lambda: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { lambda: 2.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMask {
    pub h: usize,
    pub w: usize,
    pub keep: Vec<bool>,
}

impl SampleMask {
    pub fn all(h: usize, w: usize) -> Self {
        Self { h, w, keep: vec![true; h * w] }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub h: usize,
    pub w: usize,
    pub weights: Vec<f64>,
}

impl WeightMap {
    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, weights: vec![1.0; h * w] }
    }

    pub fn from_mask(mask: &SampleMask) -> Self {
        let weights = mask.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Self { h: mask.h, w: mask.w, weights }
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Linearly decaying weight of the supervised term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZetaSchedule {
    pub zeta0: f64,
    pub zeta_min: f64,
    /// Iteration at which the floor is reached; `None` uses the run length.
    pub total: Option<usize>,
}

impl Default for ZetaSchedule {
    fn default() -> Self {
        Self { zeta0: 1.0, zeta_min: 0.1, total: None }
    }
}

impl ZetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta0 >= self.zeta_min && self.zeta_min >= 0.0) {
            return Err(Error::Config("zeta schedule needs zeta0 >= zeta_min >= 0".into()));
        }
        Ok(())
    }
}

/// `zeta_min + (zeta0 - zeta_min) * (1 - t / T)`, held at `zeta_min` past `T`.
pub fn zeta_at(t: usize, sched: &ZetaSchedule, total: usize) -> f64 {
    let total = sched.total.unwrap_or(total);
    if total == 0 || t >= total {
        return sched.zeta_min;
    }
    sched.zeta_min + (sched.zeta0 - sched.zeta_min) * (1.0 - t as f64 / total as f64)
}

pub fn total_loss(unsupervised: f64, supervised: f64, zeta: f64) -> f64 {
    unsupervised + zeta * supervised
}

fn check_target(pred: &ProbMap, target: &LabelMask) -> Result<()> {
    pred.same_shape(target)?;
    target.check_classes(pred.classes)
}

/// Pixel-mean cross-entropy against a hard target.
pub fn supervised_loss(pred: &ProbMap, gt: &LabelMask) -> Result<LossGrad> {
    weighted_ce(pred, gt, &WeightMap::ones(pred.h, pred.w))
}

/// `sum_i W_i CE_i / sum_i W_i`. An image with zero total weight has loss 0
/// and a zero gradient.
fn weighted_ce(pred: &ProbMap, target: &LabelMask, weights: &WeightMap) -> Result<LossGrad> {
    check_target(pred, target)?;
    if weights.h != pred.h || weights.w != pred.w {
        return Err(Error::ShapeMismatch("weight map does not match prediction".into()));
    }
    let n = pred.pixels();
    let c = pred.classes;
    let mut grad = vec![0.0; c * n];
    let total = weights.total();
    if total <= 0.0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let mut acc = 0.0;
    for i in 0..n {
        let w = weights.weights[i];
        if w == 0.0 {
            continue;
        }
        let y = target.labels[i] as usize;
        acc += w * -pred.get(y, i).ln();
        let scale = w / total;
        for j in 0..c {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[j * n + i] = scale * (pred.get(j, i) - onehot);
        }
    }
    Ok(LossGrad { loss: acc / total, grad })
}

/// `S_c = ((1 - CC_c) / max_c (1 - CC_c))^lambda`; every rate is 1 when the
/// maximum complement is 0.
pub fn sampling_rates(cc: &[f64], lambda: f64) -> Vec<f64> {
    let max = cc.iter().map(|c| 1.0 - c).fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![1.0; cc.len()];
    }
    cc.iter().map(|c| ((1.0 - c).max(0.0) / max).powf(lambda)).collect()
}

/// Keeps each pixel independently with the rate of its (pseudo-)class.
pub fn draw_sample_mask<R: Rng + ?Sized>(
    pseudo: &LabelMask,
    rates: &[f64],
    rng: &mut R,
) -> Result<SampleMask> {
    pseudo.check_classes(rates.len())?;
    let keep = pseudo
        .labels
        .iter()
        .map(|&l| rng.random::<f64>() < rates[l as usize])
        .collect();
    Ok(SampleMask { h: pseudo.h, w: pseudo.w, keep })
}

/// `W_i = 1_i * (max_c P_i)^beta`.
pub fn stabilization_weights(pred: &ProbMap, mask: &SampleMask, beta: f64) -> Result<WeightMap> {
    if mask.h != pred.h || mask.w != pred.w {
        return Err(Error::ShapeMismatch("sample mask does not match prediction".into()));
    }
    let weights = mask
        .keep
        .iter()
        .enumerate()
        .map(|(i, &k)| if k { pred.max_at(i).powf(beta) } else { 0.0 })
        .collect();
    Ok(WeightMap { h: pred.h, w: pred.w, weights })
}

/// Weighted pseudo-label cross-entropy of one image.
pub fn unsupervised_loss(pred: &ProbMap, pseudo: &LabelMask, weights: &WeightMap) -> Result<LossGrad> {
    weighted_ce(pred, pseudo, weights)
}

/// Batch reduction of per-image losses: the mean over images that carry
/// weight, with each gradient scaled by `1 / active`. Reduction follows list
/// order.
pub fn batch_mean(per_image: Vec<(LossGrad, bool)>) -> (f64, Vec<Vec<f64>>) {
    let active = per_image.iter().filter(|(_, a)| *a).count();
    if active == 0 {
        let grads = per_image.into_iter().map(|(lg, _)| vec![0.0; lg.grad.len()]).collect();
        return (0.0, grads);
    }
    let scale = 1.0 / active as f64;
    let mut loss = 0.0;
    let grads = per_image
        .into_iter()
        .map(|(lg, a)| {
            if a {
                loss += lg.loss;
                lg.grad.into_iter().map(|g| g * scale).collect()
            } else {
                vec![0.0; lg.grad.len()]
            }
        })
        .collect();
    (loss * scale, grads)
}
