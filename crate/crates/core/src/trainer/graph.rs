//! Differentiable loss graph mirroring the value-level losses in
//! [`crate::loss`]: cross-entropy on head logits plus alignment and
//! uniformity over unit feature rows.

use crate::autodiff::{Tape, Var};
use crate::loss::LossWeights;
use crate::scalar::Real;
use ndarray::Array2;

/// Mean squared distance over unordered same-class pairs, on unit rows.
pub fn alignment_graph<F: Real>(tape: &mut Tape<F>, z_unit: Var, labels: &[u8]) -> Option<Var> {
    let n = labels.len();
    let mut mask = Array2::zeros((n, n));
    let mut positives = 0usize;
    for x in 0..n {
        for y in (x + 1)..n {
            if labels[x] == labels[y] {
                mask[(x, y)] = F::one();
                positives += 1;
            }
        }
    }
    if positives == 0 {
        return None;
    }
    let d2 = squared_distance_graph(tape, z_unit);
    let mask = tape.leaf(mask);
    let masked = tape.mul(d2, mask);
    let total = tape.sum_all(masked);
    Some(tape.scale(total, F::one() / F::from_f64_c(positives as f64)))
}

/// Log-mean of `exp(-2 d^2)` over unordered pairs, on unit rows.
pub fn uniformity_graph<F: Real>(tape: &mut Tape<F>, z_unit: Var, n: usize) -> Var {
    assert!(n >= 2, "uniformity needs at least two rows");
    let d2 = squared_distance_graph(tape, z_unit);
    let scaled = tape.scale(d2, F::from_f64_c(-2.0));
    let kernel = tape.exp(scaled);
    let mut mask = Array2::zeros((n, n));
    for x in 0..n {
        for y in (x + 1)..n {
            mask[(x, y)] = F::one();
        }
    }
    let mask = tape.leaf(mask);
    let masked = tape.mul(kernel, mask);
    let total = tape.sum_all(masked);
    let pairs = F::from_f64_c((n * (n - 1) / 2) as f64);
    let mean = tape.scale(total, F::one() / pairs);
    tape.ln(mean)
}

/// `2 - 2 z z^T`, valid for unit rows (matches `||z_x - z_y||^2` there).
fn squared_distance_graph<F: Real>(tape: &mut Tape<F>, z_unit: Var) -> Var {
    let zt = tape.transpose(z_unit);
    let gram = tape.matmul(z_unit, zt);
    let scaled = tape.scale(gram, F::from_f64_c(-2.0));
    tape.add_const(scaled, F::from_f64_c(2.0))
}

pub struct CombinedGraph {
    pub total: Var,
    pub cross_entropy: Var,
    pub align: Option<Var>,
    pub uniform: Option<Var>,
}

/// Total objective over (possibly slerp-extended) unit features and their
/// head logits. Alignment/uniformity terms are built only when weighted.
pub fn combined_graph<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    z_unit: Var,
    labels: &[u8],
    weights: &LossWeights,
) -> CombinedGraph {
    let ce = tape.cross_entropy(logits, labels.to_vec());
    let mut total = ce;
    let mut align_var = None;
    let mut uniform_var = None;
    if weights.alpha > 0.0 {
        if let Some(align) = alignment_graph(tape, z_unit, labels) {
            let weighted = tape.scale(align, F::from_f64_c(weights.alpha));
            total = tape.add(total, weighted);
            align_var = Some(align);
        }
    }
    if weights.beta > 0.0 && labels.len() >= 2 {
        let uniform = uniformity_graph(tape, z_unit, labels.len());
        let weighted = tape.scale(uniform, F::from_f64_c(weights.beta));
        total = tape.add(total, weighted);
        uniform_var = Some(uniform);
    }
    CombinedGraph {
        total,
        cross_entropy: ce,
        align: align_var,
        uniform: uniform_var,
    }
}
