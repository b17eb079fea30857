//! Parameter-efficient hyperspherical fine-tuning and evaluation toolkit for
//! video forgery detection.
//!
//! The pieces: a tiny trainable vision transformer with selectable trainable
//! parameter policies (LayerNorm-only, bias-only, low-rank, full, head-only),
//! an L2-normalized feature head with slerp latent augmentation, a
//! cross-entropy + alignment + uniformity objective, a cyclic cosine learning
//! rate schedule, dataset manifests with paired/unpaired split construction,
//! a synthetic desk-scale dataset generator, and a video-level AUROC
//! evaluation and experiment harness.
//!
//! Core numerics are generic over the scalar type ([`scalar::Real`], f32 or
//! f64); concrete aliases live at the crate root.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fingerprint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod sphere;
pub mod trainer;

pub use error::{Error, Result};

/// Reverse-mode tape over f32 values (the "reduced" training precision).
pub type Tape32 = autodiff::Tape<f32>;
/// Reverse-mode tape over f64 values (the "full" precision; geometry and
/// losses always run here).
pub type Tape64 = autodiff::Tape<f64>;
/// Unit feature in full precision, as produced by the inference path.
pub type UnitFeature64 = sphere::UnitFeature<f64>;
/// Feature batch in full precision.
pub type FeatureBatch64 = sphere::FeatureBatch<f64>;
