//! Three-layer fully convolutional segmenter with hand-derived gradients,
//! momentum SGD and exponential-moving-average teacher weights.
//!
//! Layout: `conv3x3(in -> F) -> ReLU -> conv3x3(F -> F) -> ReLU -> conv1x1(F -> C)`,
//! all same-padded. Parameters are kept as six flat blocks in the order
//! `w1, b1, w2, b2, w3, b3`.

pub mod augment;
pub mod checkpoint;
pub mod conv;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argmax_map, softmax, Image, LabelMask, Logits, ProbMap};
use crate::rng;

pub use augment::{augment, AugmentDraw, AugmentSpec, Geometric};
use conv::ConvShape;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub features: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, features: usize, classes: usize) -> Self {
        Self { in_channels, features, classes }
    }

    fn layers(&self) -> [ConvShape; 3] {
        [
            ConvShape { cin: self.in_channels, cout: self.features, k: 3 },
            ConvShape { cin: self.features, cout: self.features, k: 3 },
            ConvShape { cin: self.features, cout: self.classes, k: 1 },
        ]
    }

    /// Lengths of the six parameter blocks.
    pub fn block_lens(&self) -> Vec<usize> {
        self.layers().iter().flat_map(|l| [l.weight_len(), l.cout]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub blocks: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let blocks = arch.block_lens().into_iter().map(|n| vec![0.0; n]).collect();
        Self { arch, blocks }
    }

    /// He-normal weights scaled by fan-in, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut params = Self::zeros(arch);
        let mut r = rng::stream(seed, rng::purpose::INIT, 0, 0);
        for (l, layer) in arch.layers().iter().enumerate() {
            let fan_in = (layer.cin * layer.k * layer.k) as f64;
            let std = (2.0 / fan_in).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in params.blocks[2 * l].iter_mut() {
                *v = normal.sample(&mut r);
            }
        }
        params
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch
            || self.blocks.len() != other.blocks.len()
            || self.blocks.iter().zip(&other.blocks).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::ShapeMismatch("parameter blocks differ".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }

    pub fn get(&self, flat: usize) -> f64 {
        let (b, i) = self.locate(flat);
        self.blocks[b][i]
    }

    pub fn set(&mut self, flat: usize, value: f64) {
        let (b, i) = self.locate(flat);
        self.blocks[b][i] = value;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (b, block) in self.blocks.iter().enumerate() {
            if flat < block.len() {
                return (b, flat);
            }
            flat -= block.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += scale * other`, blockwise.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .zip(other.blocks.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    arch: Architecture,
    h: usize,
    w: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
}

pub fn forward(params: &ModelParams, img: &Image) -> Result<(Logits, ActivationCache)> {
    let arch = params.arch;
    if img.channels != arch.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "image has {} channels, model expects {}",
            img.channels, arch.in_channels
        )));
    }
    if img.h < MIN_SIDE || img.w < MIN_SIDE {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
            img.h, img.w
        )));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    let (h, w) = (img.h, img.w);
    let [l1, l2, l3] = arch.layers();
    let b = &params.blocks;
    let mut a1 = conv::forward(l1, &img.data, h, w, &b[0], &b[1]);
    relu(&mut a1);
    let mut a2 = conv::forward(l2, &a1, h, w, &b[2], &b[3]);
    relu(&mut a2);
    let out = conv::forward(l3, &a2, h, w, &b[4], &b[5]);
    let logits = Logits::new(arch.classes, h, w, out)?;
    let cache = ActivationCache { arch, h, w, input: img.data.clone(), a1, a2 };
    Ok((logits, cache))
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Gates an upstream gradient by the ReLU that produced `act`.
fn relu_back(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Parameter gradients for an upstream gradient on the logits.
pub fn backward(params: &ModelParams, cache: &ActivationCache, grad_logits: &[f64]) -> Result<ModelParams> {
    let arch = params.arch;
    if cache.arch != arch || grad_logits.len() != arch.classes * cache.h * cache.w {
        return Err(Error::ShapeMismatch("activation cache does not match the model".into()));
    }
    let (h, w) = (cache.h, cache.w);
    let [l1, l2, l3] = arch.layers();
    let mut grads = ModelParams::zeros(arch);
    let b = &params.blocks;
    let (g01, g2345) = grads.blocks.split_at_mut(2);
    let (g23, g45) = g2345.split_at_mut(2);
    let (gw3, gb3) = g45.split_at_mut(1);
    let mut d2 = conv::backward(l3, &cache.a2, h, w, &b[4], grad_logits, &mut gw3[0], &mut gb3[0], true)
        .expect("input grad requested");
    relu_back(&mut d2, &cache.a2);
    let (gw2, gb2) = g23.split_at_mut(1);
    let mut d1 = conv::backward(l2, &cache.a1, h, w, &b[2], &d2, &mut gw2[0], &mut gb2[0], true)
        .expect("input grad requested");
    relu_back(&mut d1, &cache.a1);
    let (gw1, gb1) = g01.split_at_mut(1);
    conv::backward(l1, &cache.input, h, w, &b[0], &d1, &mut gw1[0], &mut gb1[0], false);
    Ok(grads)
}

/// Forward pass followed by softmax.
pub fn predict(params: &ModelParams, img: &Image) -> Result<ProbMap> {
    let (logits, _) = forward(params, img)?;
    softmax(&logits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-4, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, arch: Architecture) -> Self {
        Self { config, velocity: ModelParams::zeros(arch) }
    }
}

/// `v <- momentum * v + g + wd * p; p <- p - lr * v`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    params.check_same_shape(grads)?;
    params.check_same_shape(&state.velocity)?;
    let SgdConfig { lr, momentum, weight_decay } = state.config;
    for ((p, g), v) in params
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(state.velocity.blocks.iter_mut())
    {
        for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// `teacher <- decay * teacher + (1 - decay) * student`.
pub fn ema_weights(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    teacher.check_same_shape(student)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::OutOfRange { value: decay, lo: 0.0, hi: 1.0 });
    }
    for (t, s) in teacher.blocks.iter_mut().zip(&student.blocks) {
        for (t, s) in t.iter_mut().zip(s) {
            *t = decay * *t + (1.0 - decay) * s;
        }
    }
    Ok(())
}

/// Teacher output on a weakly augmented view.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    pub view: Image,
    pub draw: AugmentDraw,
    pub mask: LabelMask,
    pub probs: ProbMap,
}

pub fn pseudo_label<R: Rng + ?Sized>(
    teacher: &ModelParams,
    img: &Image,
    weak: &AugmentSpec,
    rng: &mut R,
) -> Result<PseudoLabel> {
    let (view, _, draw) = augment(img, None, weak, rng);
    let probs = predict(teacher, &view)?;
    let mask = argmax_map(&probs);
    Ok(PseudoLabel { view, draw, mask, probs })
}
