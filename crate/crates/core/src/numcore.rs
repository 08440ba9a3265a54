//! Dense images, label masks and per-pixel class-probability fields.
//!
//! Multi-channel buffers are stored channel-major: entry `(j, i)` of a
//! `C x (h*w)` field lives at `j * h * w + i`, with pixels in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor applied before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dims must be positive, got {h}x{w}x{channels}"
            )));
        }
        if data.len() != h * w * channels {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                h * w * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, channels: 1, data: vec![0.0; h * w] }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Per-pixel class indices (ground truth or pseudo-labels).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} labels, expected {}",
                labels.len(),
                h * w
            )));
        }
        Ok(Self { h, w, labels })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        Self { h, w, labels: vec![class; h * w] }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.w + x] as usize
    }

    /// Checks every label is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::ShapeMismatch(format!(
                "label {l} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }
}

/// Unnormalized class scores, same layout as [`ProbMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn new(classes: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * h * w {
            return Err(Error::ShapeMismatch(format!(
                "logit buffer has {} values, expected {}",
                data.len(),
                classes * h * w
            )));
        }
        Ok(Self { classes, h, w, data })
    }

    pub fn zeros(classes: usize, h: usize, w: usize) -> Self {
        Self { classes, h, w, data: vec![0.0; classes * h * w] }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Per-pixel class probabilities; every column sums to one and no entry is
/// below [`PROB_EPS`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub probs: Vec<f64>,
}

impl ProbMap {
    /// Wraps raw probabilities, clamping and renormalizing them.
    pub fn from_probs(classes: usize, h: usize, w: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 || probs.len() != classes * h * w {
            return Err(Error::ShapeMismatch(format!(
                "prob buffer has {} values, expected {}",
                probs.len(),
                classes * h * w
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("probabilities"));
        }
        Ok(clamp_probs(Self { classes, h, w, probs }, PROB_EPS))
    }

    pub fn uniform(classes: usize, h: usize, w: usize) -> Self {
        Self { classes, h, w, probs: vec![1.0 / classes as f64; classes * h * w] }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> f64 {
        self.probs[class * self.h * self.w + pixel]
    }

    /// Largest class probability at `pixel`.
    pub fn max_at(&self, pixel: usize) -> f64 {
        let n = self.pixels();
        (0..self.classes)
            .map(|j| self.probs[j * n + pixel])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn column(&self, pixel: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.classes).map(|j| self.probs[j * n + pixel]).collect()
    }

    pub fn same_shape(&self, mask: &LabelMask) -> Result<()> {
        if self.h != mask.h || self.w != mask.w {
            return Err(Error::ShapeMismatch(format!(
                "prob map {}x{} vs mask {}x{}",
                self.h, self.w, mask.h, mask.w
            )));
        }
        Ok(())
    }
}

/// Numerically stable per-pixel softmax followed by [`clamp_probs`].
pub fn softmax(logits: &Logits) -> Result<ProbMap> {
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let n = logits.pixels();
    let c = logits.classes;
    let mut probs = vec![0.0; c * n];
    for i in 0..n {
        let max = (0..c).map(|j| logits.data[j * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (logits.data[j * n + i] - max).exp();
            probs[j * n + i] = e;
            sum += e;
        }
        for j in 0..c {
            probs[j * n + i] /= sum;
        }
    }
    Ok(clamp_probs(ProbMap { classes: c, h: logits.h, w: logits.w, probs }, PROB_EPS))
}

/// Raises every entry to at least `eps` and renormalizes the affected columns.
///
/// Columns that already satisfy the floor are returned untouched, which makes
/// the operation idempotent.
pub fn clamp_probs(mut p: ProbMap, eps: f64) -> ProbMap {
    let n = p.pixels();
    let c = p.classes;
    for i in 0..n {
        if (0..c).all(|j| p.probs[j * n + i] >= eps) {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..c {
            let v = &mut p.probs[j * n + i];
            *v = v.max(eps);
            sum += *v;
        }
        for j in 0..c {
            let v = &mut p.probs[j * n + i];
            // renormalizing can push a floored entry a hair under eps
            *v = (*v / sum).max(eps);
        }
    }
    p
}

/// Per-pixel argmax, ties resolved toward the lowest class index.
pub fn argmax_map(p: &ProbMap) -> LabelMask {
    let n = p.pixels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..p.classes {
                if p.probs[j * n + i] > p.probs[best * n + i] {
                    best = j;
                }
            }
            best as u8
        })
        .collect();
    LabelMask { h: p.h, w: p.w, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(p: &ProbMap) -> Vec<f64> {
        p.column(0)
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = softmax(&Logits::zeros(4, 2, 3)).unwrap();
        assert!(p.probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn ln4_logits() {
        let l = Logits::new(2, 1, 1, vec![4f64.ln(), 0.0]).unwrap();
        let p = softmax(&l).unwrap();
        assert!((col(&p)[0] - 0.8).abs() < 1e-12);
        assert!((col(&p)[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn infinite_logits_rejected() {
        let l = Logits::new(2, 1, 1, vec![f64::INFINITY, 0.0]).unwrap();
        assert!(matches!(softmax(&l), Err(Error::NonFiniteLogits)));
        let l = Logits::new(2, 1, 1, vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax(&l).is_err());
    }

    #[test]
    fn clamp_one_hot() {
        let p = ProbMap { classes: 2, h: 1, w: 1, probs: vec![1.0, 0.0] };
        let q = clamp_probs(p, 1e-12);
        let c = col(&q);
        assert!((c[0] - 1.0).abs() < 1e-11);
        assert_eq!(c[1], 1e-12);
        assert!((c[0] + c[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_is_identity_above_floor() {
        let p = ProbMap { classes: 3, h: 1, w: 2, probs: vec![0.2, 0.5, 0.3, 0.25, 0.5, 0.25] };
        assert_eq!(clamp_probs(p.clone(), 1e-12), p);
    }

    #[test]
    fn argmax_examples() {
        let p = ProbMap { classes: 2, h: 1, w: 2, probs: vec![0.2, 0.5, 0.8, 0.5] };
        assert_eq!(argmax_map(&p).labels, vec![1, 0]);
        let p = ProbMap { classes: 3, h: 1, w: 1, probs: vec![0.1, 0.3, 0.6] };
        assert_eq!(argmax_map(&p).labels, vec![2]);
    }

    #[test]
    fn mask_shape_checked() {
        assert!(LabelMask::new(2, 2, vec![0; 3]).is_err());
        let m = LabelMask::new(1, 2, vec![0, 3]).unwrap();
        assert!(m.check_classes(3).is_err());
        assert!(m.check_classes(4).is_ok());
    }

    fn logits_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..6, 1usize..10).prop_flat_map(|(c, n)| {
            (Just(c), proptest::collection::vec(-20.0f64..20.0, c * n))
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant((c, data) in logits_strategy(), shift in -50.0f64..50.0) {
            let n = data.len() / c;
            let a = softmax(&Logits::new(c, 1, n, data.clone()).unwrap()).unwrap();
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let b = softmax(&Logits::new(c, 1, n, shifted).unwrap()).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for i in 0..n {
                let s: f64 = a.column(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn clamp_idempotent(raw in proptest::collection::vec(0.0f64..1.0, 12), zero_at in 0usize..12) {
            let mut raw = raw;
            raw[zero_at] = 0.0;
            let n = 4;
            let mut probs = vec![0.0; 12];
            for i in 0..n {
                let s: f64 = (0..3).map(|j| raw[j * n + i]).sum::<f64>().max(1e-300);
                for j in 0..3 {
                    probs[j * n + i] = if s > 1e-300 { raw[j * n + i] / s } else { 1.0 / 3.0 };
                }
            }
            let p = ProbMap { classes: 3, h: 2, w: 2, probs };
            let once = clamp_probs(p, PROB_EPS);
            let twice = clamp_probs(once.clone(), PROB_EPS);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.probs.iter().all(|&v| v >= PROB_EPS));
        }

        #[test]
        fn argmax_matches_logit_argmax((c, data) in logits_strategy()) {
            let n = data.len() / c;
            let l = Logits::new(c, 1, n, data.clone()).unwrap();
            let mask = argmax_map(&softmax(&l).unwrap());
            for i in 0..n {
                let vals: Vec<f64> = (0..c).map(|j| data[j * n + i]).collect();
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let winners: Vec<usize> = (0..c).filter(|&j| vals[j] == max).collect();
                if winners.len() == 1 {
                    prop_assert_eq!(mask.labels[i] as usize, winners[0]);
                }
            }
        }
    }
}
