//! Tape graph of the encoder forward pass.
//!
//! All images of a chunk are stacked row-wise so the linear layers run as a
//! few large matrix products; attention mixes tokens within each image block
//! only. The output is the pre-normalization classification-token feature,
//! one row per image.

use super::{Model, LN_EPS};
use crate::autodiff::{Tape, Var};
use crate::data::imageops::CropImage;
use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::Array2;

/// Model parameters cast to the compute precision, aligned with
/// `model.params` indices.
pub struct CastParams<F: Real> {
    pub values: Vec<Array2<F>>,
}

impl<F: Real> CastParams<F> {
    pub fn from_model(model: &Model) -> Self {
        let values = model
            .params
            .iter()
            .map(|p| p.value.mapv(|v| F::from_f64_c(v)))
            .collect();
        Self { values }
    }
}

/// Encoder graph over one chunk of images.
pub struct EncoderGraph<F: Real> {
    pub tape: Tape<F>,
    /// Pre-normalization classification-token features, one row per image.
    pub features: Var,
    /// `(param index, leaf var)` for every parameter the graph touched.
    pub param_vars: Vec<(usize, Var)>,
}

/// Flattens an image into its `n_patches x patch_dim` matrix, normalized to
/// `(x/255 - 0.5) / 0.5`.
pub fn patchify<F: Real>(image: &CropImage, patch_size: usize) -> Array2<F> {
    let side = image.width / patch_size;
    let patch_dim = patch_size * patch_size * 3;
    let mut out = Array2::zeros((side * side, patch_dim));
    for py in 0..side {
        for px in 0..side {
            let row = py * side + px;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let p = image.pixel(px * patch_size + dx, py * patch_size + dy);
                    let base = (dy * patch_size + dx) * 3;
                    for c in 0..3 {
                        let v = f64::from(p[c]) / 255.0 * 2.0 - 1.0;
                        out[(row, base + c)] = F::from_f64_c(v);
                    }
                }
            }
        }
    }
    out
}

struct ParamLookup<'m, 'c, F: Real> {
    model: &'m Model,
    cast: &'c CastParams<F>,
    used: Vec<(usize, Var)>,
}

impl<'m, 'c, F: Real> ParamLookup<'m, 'c, F> {
    fn leaf(&mut self, tape: &mut Tape<F>, name: &str) -> Var {
        let idx = self
            .model
            .param_index(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        let var = tape.leaf(self.cast.values[idx].clone());
        self.used.push((idx, var));
        var
    }

    fn has(&self, name: &str) -> bool {
        self.model.param_index(name).is_some()
    }

    /// Weight leaf, plus the low-rank delta when adapters are present.
    fn weight(&mut self, tape: &mut Tape<F>, base: &str) -> Var {
        let w = self.leaf(tape, &format!("{base}.weight"));
        if self.has(&format!("{base}.lora_a")) {
            let a = self.leaf(tape, &format!("{base}.lora_a"));
            let b = self.leaf(tape, &format!("{base}.lora_b"));
            let delta = tape.matmul(a, b);
            tape.add(w, delta)
        } else {
            w
        }
    }
}

/// Builds the forward graph for a batch of images and returns the stacked
/// classification-token features (pre-normalization).
pub fn encode_images<F: Real>(
    model: &Model,
    cast: &CastParams<F>,
    images: &[&CropImage],
) -> Result<EncoderGraph<F>> {
    let spec = &model.spec;
    for img in images {
        if img.width != spec.image_size || img.height != spec.image_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0} crops", spec.image_size),
                got: format!("{}x{}", img.width, img.height),
            });
        }
    }
    let n = images.len();
    let n_patches = spec.n_patches();
    let tokens = spec.n_tokens();
    let patch_dim = spec.patch_dim();

    let mut stacked = Array2::zeros((n * n_patches, patch_dim));
    for (i, img) in images.iter().enumerate() {
        let p = patchify::<F>(img, spec.patch_size);
        stacked
            .slice_mut(ndarray::s![i * n_patches..(i + 1) * n_patches, ..])
            .assign(&p);
    }

    let mut tape = Tape::new();
    let mut lookup = ParamLookup { model, cast, used: Vec::new() };

    let patches = tape.leaf(stacked);
    let pw = lookup.leaf(&mut tape, "patch_embed.weight");
    let pb = lookup.leaf(&mut tape, "patch_embed.bias");
    let embedded = tape.matmul(patches, pw);
    let embedded = tape.add_row(embedded, pb);

    let cls = lookup.leaf(&mut tape, "cls_token");
    let pos = lookup.leaf(&mut tape, "pos_embed");
    let mut x = tape.assemble_tokens(embedded, cls, pos, n);

    let eps = F::from_f64_c(LN_EPS);
    for i in 0..spec.depth {
        let g1 = lookup.leaf(&mut tape, &format!("blocks.{i}.ln1.weight"));
        let b1 = lookup.leaf(&mut tape, &format!("blocks.{i}.ln1.bias"));
        let h1 = tape.layer_norm_rows(x, g1, b1, eps);
        let wqkv = lookup.weight(&mut tape, &format!("blocks.{i}.attn.qkv"));
        let bqkv = lookup.leaf(&mut tape, &format!("blocks.{i}.attn.qkv.bias"));
        let qkv = tape.matmul(h1, wqkv);
        let qkv = tape.add_row(qkv, bqkv);
        let att = tape.attention(qkv, n, tokens, spec.heads);
        let wproj = lookup.weight(&mut tape, &format!("blocks.{i}.attn.proj"));
        let bproj = lookup.leaf(&mut tape, &format!("blocks.{i}.attn.proj.bias"));
        let proj = tape.matmul(att, wproj);
        let proj = tape.add_row(proj, bproj);
        x = tape.add(x, proj);

        let g2 = lookup.leaf(&mut tape, &format!("blocks.{i}.ln2.weight"));
        let b2 = lookup.leaf(&mut tape, &format!("blocks.{i}.ln2.bias"));
        let h2 = tape.layer_norm_rows(x, g2, b2, eps);
        let w1 = lookup.weight(&mut tape, &format!("blocks.{i}.mlp.fc1"));
        let bias1 = lookup.leaf(&mut tape, &format!("blocks.{i}.mlp.fc1.bias"));
        let f1 = tape.matmul(h2, w1);
        let f1 = tape.add_row(f1, bias1);
        let f1 = tape.gelu(f1);
        let w2 = lookup.weight(&mut tape, &format!("blocks.{i}.mlp.fc2"));
        let bias2 = lookup.leaf(&mut tape, &format!("blocks.{i}.mlp.fc2.bias"));
        let f2 = tape.matmul(f1, w2);
        let f2 = tape.add_row(f2, bias2);
        x = tape.add(x, f2);
    }

    let gf = lookup.leaf(&mut tape, "ln_final.weight");
    let bf = lookup.leaf(&mut tape, "ln_final.bias");
    let x = tape.layer_norm_rows(x, gf, bf, eps);

    let cls_rows: Vec<usize> = (0..n).map(|i| i * tokens).collect();
    let features = tape.select_rows(x, cls_rows);

    Ok(EncoderGraph {
        tape,
        features,
        param_vars: lookup.used,
    })
}
