//! Class-imbalance-aware semi-supervised segmentation.
//!
//! The crate tracks class-wise entropy, variance and confidence indicators on
//! labelled data, fuses them with a Gompertz fuzzy ranking into a per-class
//! cumulative confidence, and uses that confidence to sample unlabelled
//! pixels per class and to weight pseudo-labelled pixels inside a
//! mean-teacher training loop. A small hand-differentiated CNN, segmentation
//! metrics and a synthetic phantom benchmark are included.

pub mod error;
pub mod experiment;
pub mod fusion;
pub mod indicators;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod phantom;
pub mod rng;

pub use error::{Error, Result};
pub use numcore::{argmax_map, clamp_probs, softmax, Image, LabelMask, Logits, ProbMap, PROB_EPS};
pub use experiment::{
    run_ablation, train, AblationResult, ExperimentConfig, RcsMode, RunReport, Toggle, TrainOutcome,
};
pub use fusion::{fuse_indicators, ClassConfidence, ConfidenceArray, FusionConfig};
pub use indicators::{compute_indicators, EntropyForm, IndicatorTriple};
pub use metrics::{evaluate, MetricReport};
pub use model::{Architecture, ModelParams};
pub use phantom::{generate_phantoms, load_dataset, save_dataset, PhantomConfig, PhantomDataset};
