//! Class-wise performance indicators for the confidence array: entropy,
//! variance (margin to the winning class) and confidence, each averaged over
//! the ground-truth pixels of a class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{LabelMask, ProbMap};

/// Which entropy expression to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `sum_j P^c log P^j` over the pixel's class channels.
    #[default]
    Literal,
    /// `-sum_j P^j log P^j`.
    Shannon,
}

/// Indicator arrays for one batch. `None` marks a class with no
/// ground-truth pixels anywhere in the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTriple {
    pub entropy: Vec<Option<f64>>,
    pub variance: Vec<Option<f64>>,
    pub confidence: Vec<Option<f64>>,
    /// Ground-truth pixel count of each class summed over the batch.
    pub pixel_counts: Vec<usize>,
}

impl IndicatorTriple {
    pub fn classes(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_present(&self, c: usize) -> bool {
        self.pixel_counts[c] > 0
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.is_present(c)).collect()
    }

    /// Builds a triple from explicit per-class values; `None` entries are absent.
    pub fn from_values(
        entropy: Vec<Option<f64>>,
        variance: Vec<Option<f64>>,
        confidence: Vec<Option<f64>>,
    ) -> Result<Self> {
        let c = confidence.len();
        if entropy.len() != c || variance.len() != c {
            return Err(Error::ShapeMismatch("indicator columns differ in length".into()));
        }
        let mut pixel_counts = Vec::with_capacity(c);
        for k in 0..c {
            let present = [entropy[k], variance[k], confidence[k]];
            let n = present.iter().filter(|v| v.is_some()).count();
            if n != 0 && n != 3 {
                return Err(Error::Config(format!("class {k} is only partially specified")));
            }
            if present.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("indicator"));
            }
            pixel_counts.push(usize::from(n == 3));
        }
        Ok(Self { entropy, variance, confidence, pixel_counts })
    }
}

fn check_batch(preds: &[ProbMap], gts: &[LabelMask]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} masks",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        p.same_shape(g)?;
        g.check_classes(p.classes)?;
    }
    Ok(())
}

/// Mean over images containing class `c` of the per-image mean of `f` over
/// that image's class-`c` pixels. Images are reduced in list order.
fn class_mean<F>(preds: &[ProbMap], gts: &[LabelMask], c: usize, f: F) -> Result<f64>
where
    F: Fn(&ProbMap, usize) -> f64,
{
    check_batch(preds, gts)?;
    let mut total = 0.0;
    let mut images = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &label) in g.labels.iter().enumerate() {
            if label as usize == c {
                sum += f(p, i);
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
            images += 1;
        }
    }
    if images == 0 {
        return Err(Error::AbsentClass(c));
    }
    Ok(total / images as f64)
}

fn pixel_entropy(p: &ProbMap, i: usize, c: usize, form: EntropyForm) -> f64 {
    match form {
        EntropyForm::Literal => {
            let pc = p.get(c, i);
            (0..p.classes).map(|j| pc * p.get(j, i).ln()).sum()
        }
        EntropyForm::Shannon => -(0..p.classes)
            .map(|j| {
                let pj = p.get(j, i);
                pj * pj.ln()
            })
            .sum::<f64>(),
    }
}

pub fn entropy_indicator(
    preds: &[ProbMap],
    gts: &[LabelMask],
    c: usize,
    form: EntropyForm,
) -> Result<f64> {
    class_mean(preds, gts, c, |p, i| pixel_entropy(p, i, c, form))
}

pub fn variance_indicator(preds: &[ProbMap], gts: &[LabelMask], c: usize) -> Result<f64> {
    class_mean(preds, gts, c, |p, i| p.max_at(i) - p.get(c, i))
}

pub fn confidence_indicator(preds: &[ProbMap], gts: &[LabelMask], c: usize) -> Result<f64> {
    class_mean(preds, gts, c, |p, i| p.get(c, i))
}

fn absent_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::AbsentClass(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// All three indicators for every class of a labelled batch.
pub fn compute_indicators(
    preds: &[ProbMap],
    gts: &[LabelMask],
    classes: usize,
    form: EntropyForm,
) -> Result<IndicatorTriple> {
    check_batch(preds, gts)?;
    if let Some(p) = preds.iter().find(|p| p.classes != classes) {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} classes, expected {classes}",
            p.classes
        )));
    }
    let mut triple = IndicatorTriple {
        entropy: Vec::with_capacity(classes),
        variance: Vec::with_capacity(classes),
        confidence: Vec::with_capacity(classes),
        pixel_counts: vec![0; classes],
    };
    for g in gts {
        for &l in &g.labels {
            triple.pixel_counts[l as usize] += 1;
        }
    }
    for c in 0..classes {
        triple.entropy.push(absent_to_none(entropy_indicator(preds, gts, c, form))?);
        triple.variance.push(absent_to_none(variance_indicator(preds, gts, c))?);
        triple.confidence.push(absent_to_none(confidence_indicator(preds, gts, c))?);
    }
    Ok(triple)
}
