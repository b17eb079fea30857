//! Vision-transformer encoder with a linear two-class head, an L2-normalized
//! classification-token feature, and a declarative trainable-parameter
//! policy.
//!
//! Master parameters are kept in f64; the forward/backward pass casts them to
//! the configured compute precision. The tiny backbone mirrors the reference
//! pre-LN architecture (class token, two LayerNorms per block, final
//! LayerNorm) so every policy and invariant is exercised identically at desk
//! scale.

mod vit;

pub use vit::{encode_images, patchify, CastParams, EncoderGraph};

use crate::data::imageops::CropImage;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::sphere::{l2_normalize, UnitFeature};
use ndarray::Array2;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// MLP hidden width as a multiple of the embedding width.
pub const MLP_RATIO: usize = 4;
/// LayerNorm stabilizer.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    TinyVit,
    PretrainedClipVision,
}

/// Architecture of the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub backbone: Backbone,
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl EncoderSpec {
    /// Desk-scale backbone that trains in minutes on CPU.
    pub fn tiny_vit() -> Self {
        Self {
            backbone: Backbone::TinyVit,
            image_size: 64,
            patch_size: 8,
            width: 64,
            depth: 4,
            heads: 4,
        }
    }

    /// Reference contract: 224px images, 14px patches, 16x16 + 1 tokens of
    /// width 1024 at the output.
    pub fn clip_vision() -> Self {
        Self {
            backbone: Backbone::PretrainedClipVision,
            image_size: 224,
            patch_size: 14,
            width: 1024,
            depth: 24,
            heads: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Patch tokens plus the classification token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Which encoder parameters train. The head trains under every policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamPolicy {
    /// Freeze the entire encoder; train the linear head only.
    HeadOnly,
    /// Train the affine scale/shift of every LayerNorm.
    LnOnly,
    /// Train every parameter named as a bias (includes LayerNorm shifts).
    BiasOnly,
    /// Train rank-r additive adapters on every attention/MLP weight matrix.
    LowRank { rank: usize },
    /// Train everything.
    Full,
}

impl ParamPolicy {
    pub fn validate(&self) -> Result<()> {
        if let ParamPolicy::LowRank { rank } = self {
            if *rank == 0 {
                return Err(Error::UnsupportedPolicy("low-rank rank must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Parses the CLI spelling: `head_only`, `ln_only`, `bias_only`, `full`,
    /// or `low_rank:<rank>`.
    pub fn parse(text: &str) -> Result<Self> {
        let lower = text.trim().to_ascii_lowercase();
        Ok(match lower.as_str() {
            "head_only" => ParamPolicy::HeadOnly,
            "ln_only" => ParamPolicy::LnOnly,
            "bias_only" => ParamPolicy::BiasOnly,
            "full" => ParamPolicy::Full,
            other => {
                if let Some(rank_text) = other.strip_prefix("low_rank:") {
                    let rank: usize = rank_text.parse().map_err(|_| {
                        Error::UnsupportedPolicy(format!("bad low_rank rank '{rank_text}'"))
                    })?;
                    ParamPolicy::LowRank { rank }
                } else if other == "low_rank" {
                    ParamPolicy::LowRank { rank: 1 }
                } else {
                    return Err(Error::UnsupportedPolicy(format!("unknown policy '{text}'")));
                }
            }
        })
    }
}

impl std::fmt::Display for ParamPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamPolicy::HeadOnly => write!(f, "head_only"),
            ParamPolicy::LnOnly => write!(f, "ln_only"),
            ParamPolicy::BiasOnly => write!(f, "bias_only"),
            ParamPolicy::LowRank { rank } => write!(f, "low_rank:{rank}"),
            ParamPolicy::Full => write!(f, "full"),
        }
    }
}

/// One named master parameter.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Encoder + head with policy-derived trainable masks.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: EncoderSpec,
    pub policy: ParamPolicy,
    pub params: Vec<Param>,
    pub step: u64,
}

/// Normalized classification-token feature plus head logits
/// (index 0 = real, index 1 = fake, matching the label encoding).
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub feature: UnitFeature<f64>,
    pub logits: [f64; 2],
}

/// Shapes of every parameter a spec produces, without allocating them.
/// LoRA adapters are listed only when the policy asks for them.
pub fn param_inventory(spec: &EncoderSpec, policy: &ParamPolicy) -> Vec<(String, (usize, usize))> {
    let d = spec.width;
    let mut out = Vec::new();
    let lora_rank = match policy {
        ParamPolicy::LowRank { rank } => Some(*rank),
        _ => None,
    };
    let push_linear = |out: &mut Vec<(String, (usize, usize))>, name: &str, rows: usize, cols: usize| {
        out.push((format!("{name}.weight"), (rows, cols)));
        if let Some(r) = lora_rank {
            out.push((format!("{name}.lora_a"), (rows, r)));
            out.push((format!("{name}.lora_b"), (r, cols)));
        }
        out.push((format!("{name}.bias"), (1, cols)));
    };

    out.push(("patch_embed.weight".into(), (spec.patch_dim(), d)));
    out.push(("patch_embed.bias".into(), (1, d)));
    out.push(("cls_token".into(), (1, d)));
    out.push(("pos_embed".into(), (spec.n_tokens(), d)));
    for i in 0..spec.depth {
        out.push((format!("blocks.{i}.ln1.weight"), (1, d)));
        out.push((format!("blocks.{i}.ln1.bias"), (1, d)));
        push_linear(&mut out, &format!("blocks.{i}.attn.qkv"), d, 3 * d);
        push_linear(&mut out, &format!("blocks.{i}.attn.proj"), d, d);
        out.push((format!("blocks.{i}.ln2.weight"), (1, d)));
        out.push((format!("blocks.{i}.ln2.bias"), (1, d)));
        push_linear(&mut out, &format!("blocks.{i}.mlp.fc1"), d, MLP_RATIO * d);
        push_linear(&mut out, &format!("blocks.{i}.mlp.fc2"), MLP_RATIO * d, d);
    }
    out.push(("ln_final.weight".into(), (1, d)));
    out.push(("ln_final.bias".into(), (1, d)));
    out.push(("head.weight".into(), (d, 2)));
    out.push(("head.bias".into(), (1, 2)));
    out
}

/// LayerNorm affine parameter: scale or shift of an `ln1`/`ln2`/`ln_final`.
pub fn is_ln_param(name: &str) -> bool {
    name.contains(".ln1.") || name.contains(".ln2.") || name.starts_with("ln_final.")
}

fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Trainability of one parameter under a policy.
pub fn policy_trains(policy: &ParamPolicy, name: &str) -> bool {
    if name.starts_with("head.") {
        return true;
    }
    match policy {
        ParamPolicy::HeadOnly => false,
        ParamPolicy::LnOnly => is_ln_param(name),
        ParamPolicy::BiasOnly => name.ends_with(".bias"),
        ParamPolicy::LowRank { .. } => is_lora_param(name),
        ParamPolicy::Full => !is_lora_param(name),
    }
}

fn normal_sample(rng: &mut impl RngExt) -> f64 {
    // Box-Muller; fully determined by the stream.
    let mut u1: f64 = rng.random();
    while u1 <= f64::MIN_POSITIVE {
        u1 = rng.random();
    }
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_param(name: &str, shape: (usize, usize), rng: &mut impl RngExt) -> Array2<f64> {
    if name.ends_with(".bias") || name.ends_with(".lora_b") {
        return Array2::zeros(shape);
    }
    if is_ln_param(name) {
        // ln weight reaches here (bias handled above)
        return Array2::ones(shape);
    }
    let std = if name.starts_with("head.") { 0.01 } else { 0.02 };
    Array2::from_shape_fn(shape, |_| normal_sample(rng) * std)
}

/// Builds a model with deterministic initialization and policy-derived masks.
///
/// The pretrained backbone needs a weights file; see
/// [`build_model_with_weights`].
pub fn build_model(spec: &EncoderSpec, policy: &ParamPolicy, seed: u64) -> Result<Model> {
    build_model_with_weights(spec, policy, seed, None)
}

/// As [`build_model`], loading encoder parameters from a checkpoint file for
/// the pretrained backbone.
pub fn build_model_with_weights(
    spec: &EncoderSpec,
    policy: &ParamPolicy,
    seed: u64,
    weights: Option<&Path>,
) -> Result<Model> {
    spec.validate()?;
    policy.validate()?;
    if let ParamPolicy::LowRank { rank } = policy {
        if *rank > spec.width {
            return Err(Error::UnsupportedPolicy(format!(
                "rank {rank} exceeds the smallest adapted matrix dimension {}",
                spec.width
            )));
        }
    }

    let mut rng = rng::stream(seed, "model_init", &[]);
    let mut params = Vec::new();
    for (name, shape) in param_inventory(spec, policy) {
        let value = init_param(&name, shape, &mut rng);
        let trainable = policy_trains(policy, &name);
        params.push(Param { name, value, trainable });
    }
    let mut model = Model { spec: *spec, policy: *policy, params, step: 0 };

    match spec.backbone {
        Backbone::TinyVit => {}
        Backbone::PretrainedClipVision => {
            let Some(path) = weights else {
                return Err(Error::WeightsUnavailable(
                    "pretrained backbone requires a weights checkpoint path".into(),
                ));
            };
            let loaded = crate::checkpoint::load(path)?;
            if loaded.model.spec != *spec {
                return Err(Error::WeightsUnavailable(format!(
                    "weights checkpoint spec {:?} does not match requested spec",
                    loaded.model.spec
                )));
            }
            for param in &mut model.params {
                if let Some(src) = loaded.model.param(&param.name) {
                    param.value = src.value.clone();
                }
            }
        }
    }
    Ok(model)
}

/// Adds zero-initialized rank-`rank` adapters to every attention/MLP weight
/// matrix of a model built without them, and switches the policy to low-rank.
pub fn apply_low_rank(model: &Model, rank: usize) -> Result<Model> {
    if rank == 0 || rank > model.spec.width {
        return Err(Error::UnsupportedPolicy(format!(
            "rank {rank} outside [1, {}]",
            model.spec.width
        )));
    }
    if model.params.iter().any(|p| is_lora_param(&p.name)) {
        return Err(Error::UnsupportedPolicy("model already carries adapters".into()));
    }
    let policy = ParamPolicy::LowRank { rank };
    let mut rng = rng::stream(model.step, "lora_init", &[rank as u64]);
    let mut params = Vec::new();
    for (name, shape) in param_inventory(&model.spec, &policy) {
        let value = if let Some(existing) = model.param(&name) {
            existing.value.clone()
        } else {
            init_param(&name, shape, &mut rng)
        };
        let trainable = policy_trains(&policy, &name);
        params.push(Param { name, value, trainable });
    }
    Ok(Model {
        spec: model.spec,
        policy,
        params,
        step: model.step,
    })
}

impl Model {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Map from parameter name to trainability, in parameter order.
    pub fn trainable_mask(&self) -> BTreeMap<String, bool> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.trainable))
            .collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Trainable parameters that belong to the encoder (head excluded).
    pub fn trainable_encoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && !p.name.starts_with("head."))
            .map(|p| p.value.len())
            .sum()
    }

    /// Audit text: one line per parameter with shape and trainable flag.
    pub fn audit_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# parameter audit");
        let _ = writeln!(out, "# spec: {:?}", self.spec);
        let _ = writeln!(out, "# policy: {}", self.policy);
        for p in &self.params {
            let (rows, cols) = p.value.dim();
            let _ = writeln!(
                out,
                "{}\t{}x{}\t{}",
                p.name,
                rows,
                cols,
                if p.trainable { "trainable" } else { "frozen" }
            );
        }
        let _ = writeln!(
            out,
            "# trainable {} / total {}",
            self.trainable_param_count(),
            self.total_param_count()
        );
        out
    }

    pub fn write_audit(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.audit_text())?;
        Ok(())
    }

    /// Full-precision inference on a batch of crops: normalized feature and
    /// head logits per image.
    pub fn forward(&self, images: &[&CropImage]) -> Result<Vec<ModelOutput>> {
        let cast: CastParams<f64> = CastParams::from_model(self);
        let graph = encode_images(self, &cast, images)?;
        let feats = graph.tape.value(graph.features);
        let head_w = &self.param("head.weight").expect("head.weight").value;
        let head_b = &self.param("head.bias").expect("head.bias").value;
        let mut out = Vec::with_capacity(images.len());
        for row in feats.rows() {
            let feature = l2_normalize(row)?;
            let logits_row = feature.values().dot(head_w) + &head_b.row(0);
            out.push(ModelOutput {
                feature,
                logits: [logits_row[0], logits_row[1]],
            });
        }
        Ok(out)
    }

    /// Fake-class softmax probability from head logits.
    pub fn fake_prob(logits: [f64; 2]) -> f64 {
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        e1 / (e0 + e1)
    }
}

/// Drives head logits from an externally computed feature row, honoring the
/// L2 switch. Used by the evaluator so the eval path matches training.
pub fn head_logits<F: Real>(model: &Model, feature: &ndarray::Array1<f64>) -> [f64; 2] {
    let _ = std::marker::PhantomData::<F>;
    let head_w = &model.param("head.weight").expect("head.weight").value;
    let head_b = &model.param("head.bias").expect("head.bias").value;
    let row = feature.dot(head_w) + &head_b.row(0);
    [row[0], row[1]]
}
