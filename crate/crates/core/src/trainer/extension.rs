//! Slerp batch extension: grow a batch of unit features to the target size
//! with same-class geodesic interpolations.
//!
//! The synthetic slots are allocated to classes proportionally to their
//! counts in the original batch (largest-remainder rounding). Within a class,
//! source rows are cycled in batch order and the partner is drawn uniformly
//! from the other same-class rows when one exists; `t ~ U(0,1)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sphere::{self, FeatureBatch};
use ndarray::Array2;
use rand::RngExt;

#[derive(Debug, Clone, PartialEq)]
pub struct SlerpPlan {
    pub src: Vec<usize>,
    pub partner: Vec<usize>,
    pub t: Vec<f64>,
    pub labels: Vec<u8>,
}

impl SlerpPlan {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Plans the synthetic rows that grow a batch of `labels.len()` samples to
/// `target`.
pub fn plan_extension(labels: &[u8], target: usize, rng: &mut impl RngExt) -> Result<SlerpPlan> {
    let b = labels.len();
    assert!(target >= b, "target must not shrink the batch");
    let synth_total = target - b;
    let mut plan = SlerpPlan {
        src: Vec::with_capacity(synth_total),
        partner: Vec::with_capacity(synth_total),
        t: Vec::with_capacity(synth_total),
        labels: Vec::with_capacity(synth_total),
    };
    if synth_total == 0 {
        return Ok(plan);
    }
    let class_rows: [Vec<usize>; 2] = {
        let mut rows = [Vec::new(), Vec::new()];
        for (i, &l) in labels.iter().enumerate() {
            rows[usize::from(l)].push(i);
        }
        rows
    };
    if class_rows[0].is_empty() || class_rows[1].is_empty() {
        return Err(Error::ClassMissing {
            class: if class_rows[0].is_empty() { 0 } else { 1 },
        });
    }

    // largest-remainder allocation proportional to class counts
    let exact: [f64; 2] = [
        synth_total as f64 * class_rows[0].len() as f64 / b as f64,
        synth_total as f64 * class_rows[1].len() as f64 / b as f64,
    ];
    let mut alloc = [exact[0].floor() as usize, exact[1].floor() as usize];
    let assigned: usize = alloc.iter().sum();
    if assigned < synth_total {
        let rem0 = exact[0] - alloc[0] as f64;
        let rem1 = exact[1] - alloc[1] as f64;
        let extra = synth_total - assigned;
        // at most one leftover slot with two classes; ties go to class 0
        for k in 0..extra {
            if (rem0 >= rem1) == (k == 0) {
                alloc[0] += 1;
            } else {
                alloc[1] += 1;
            }
        }
    }

    for class in 0..2usize {
        let rows = &class_rows[class];
        for k in 0..alloc[class] {
            let i = rows[k % rows.len()];
            let j = if rows.len() > 1 {
                let mut pick = rows[rng.random_range(0..rows.len())];
                while pick == i {
                    pick = rows[rng.random_range(0..rows.len())];
                }
                pick
            } else {
                i
            };
            plan.src.push(i);
            plan.partner.push(j);
            plan.t.push(rng.random::<f64>());
            plan.labels.push(class as u8);
        }
    }
    Ok(plan)
}

/// Value-level extension: the original rows first, then the planned slerp
/// rows with inherited labels.
pub fn extend_batch_slerp(
    batch: &FeatureBatch<f64>,
    target: usize,
    rng: &mut impl RngExt,
) -> Result<FeatureBatch<f64>> {
    let plan = plan_extension(batch.labels(), target, rng)?;
    Ok(apply_plan_values(batch, &plan))
}

/// Applies an existing plan to a value-level batch.
pub fn apply_plan_values(batch: &FeatureBatch<f64>, plan: &SlerpPlan) -> FeatureBatch<f64> {
    let b = batch.len();
    let d = batch.dim();
    let mut features = Array2::zeros((b + plan.len(), d));
    features
        .slice_mut(ndarray::s![..b, ..])
        .assign(batch.features());
    let mut labels = batch.labels().to_vec();
    for k in 0..plan.len() {
        let zi = batch.row(plan.src[k]);
        let zj = batch.row(plan.partner[k]);
        let out = sphere::slerp(&zi, &zj, plan.t[k]);
        features.row_mut(b + k).assign(&out.values());
        labels.push(plan.labels[k]);
    }
    FeatureBatch::new(features, labels).expect("slerp outputs stay unit-norm")
}

/// Graph-level extension on a tape: returns the extended feature matrix var
/// (original rows of `z` first, synthetic rows after). `z` must hold
/// unit-norm rows; gradients flow through the interpolation into `z`.
pub fn apply_plan_on_tape<F: Real>(tape: &mut Tape<F>, z: Var, plan: &SlerpPlan) -> Var {
    if plan.is_empty() {
        return z;
    }
    let s = plan.len();
    let values = tape.value(z).clone();

    // host-side angles pick the lerp fallback rows, mirroring sphere::slerp
    let mut lerp_mask = Array2::zeros((s, 1));
    let mut geo_mask = Array2::zeros((s, 1));
    for k in 0..s {
        let zi = values.row(plan.src[k]);
        let zj = values.row(plan.partner[k]);
        let dot: F = zi.dot(&zj);
        let dot64 = dot.to_f64_c();
        if dot64 < -1.0 + sphere::EPS_ACOS {
            sphere::note_antipodal_fallback();
        }
        let clamped = dot64.clamp(-1.0 + sphere::EPS_ACOS, 1.0 - sphere::EPS_ACOS);
        let theta = clamped.acos();
        if theta < sphere::THETA_MIN {
            lerp_mask[(k, 0)] = F::one();
        } else {
            geo_mask[(k, 0)] = F::one();
        }
    }

    let zi = tape.select_rows(z, plan.src.clone());
    let zj = tape.select_rows(z, plan.partner.clone());

    let t_col = Array2::from_shape_fn((s, 1), |(k, _)| F::from_f64_c(plan.t[k]));
    let one_minus_t = t_col.mapv(|v| F::one() - v);
    let t_leaf = tape.leaf(t_col);
    let omt_leaf = tape.leaf(one_minus_t);

    // geodesic path
    let prod = tape.mul(zi, zj);
    let dot = tape.row_sum(prod);
    let theta = tape.acos_clamped(dot, F::from_f64_c(sphere::EPS_ACOS));
    let sin_theta = tape.sin(theta);
    let sin_floor = F::from_f64_c(sphere::THETA_MIN.sin());
    let denom = tape.clamp_min(sin_theta, sin_floor);
    let a_arg = tape.mul(theta, omt_leaf);
    let b_arg = tape.mul(theta, t_leaf);
    let a_num = tape.sin(a_arg);
    let b_num = tape.sin(b_arg);
    let a = tape.div(a_num, denom);
    let b = tape.div(b_num, denom);
    let geo_i = tape.mul_col(zi, a);
    let geo_j = tape.mul_col(zj, b);
    let geo = tape.add(geo_i, geo_j);
    let geo = tape.l2_normalize_rows(geo, F::from_f64_c(sphere::EPS_NORM));

    // lerp fallback path
    let lerp_i = tape.mul_col(zi, omt_leaf);
    let lerp_j = tape.mul_col(zj, t_leaf);
    let lerp = tape.add(lerp_i, lerp_j);
    let lerp = tape.l2_normalize_rows(lerp, F::from_f64_c(sphere::EPS_NORM));

    let geo_mask = tape.leaf(geo_mask);
    let lerp_mask = tape.leaf(lerp_mask);
    let geo_sel = tape.mul_col(geo, geo_mask);
    let lerp_sel = tape.mul_col(lerp, lerp_mask);
    let synth = tape.add(geo_sel, lerp_sel);

    tape.concat_rows(&[z, synth])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn unit_batch(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> FeatureBatch<f64> {
        let d = rows[0].len();
        let raw = Array2::from_shape_fn((rows.len(), d), |(r, c)| rows[r][c]);
        FeatureBatch::normalize_rows(raw, labels).unwrap()
    }

    #[test]
    fn target_equal_batch_is_identity() {
        let batch = unit_batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let mut rng = stream(0, "ext", &[]);
        let out = extend_batch_slerp(&batch, 2, &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.features(), batch.features());
    }

    #[test]
    fn two_same_class_rows_extend_on_geodesic() {
        let batch = unit_batch(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1, 1]);
        let mut rng = stream(1, "ext", &[]);
        let err = extend_batch_slerp(&batch, 4, &mut rng);
        // class 0 absent -> contract error
        assert!(matches!(err, Err(Error::ClassMissing { .. })));

        let batch = unit_batch(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]],
            vec![1, 1, 0],
        );
        let mut rng = stream(1, "ext", &[]);
        let out = extend_batch_slerp(&batch, 6, &mut rng).unwrap();
        assert_eq!(out.len(), 6);
        for k in 3..6 {
            let row = out.features().row(k);
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
            if out.labels()[k] == 1 {
                // span of e1, e2: third coordinate absent in 2-D, check
                // nonnegative coords (the geodesic between e1 and e2)
                assert!(row[0] >= -1e-9 && row[1] >= -1e-9);
            }
        }
    }

    #[test]
    fn allocation_is_proportional_with_largest_remainder() {
        // 96 originals: 24 real, 72 fake; extend to 384 -> 288 synthetic,
        // exact proportions 72 and 216.
        let labels: Vec<u8> = (0..96).map(|i| u8::from(i % 4 != 0)).collect();
        let mut rng = stream(2, "ext", &[]);
        let plan = plan_extension(&labels, 384, &mut rng).unwrap();
        let reals = plan.labels.iter().filter(|l| **l == 0).count();
        let fakes = plan.labels.iter().filter(|l| **l == 1).count();
        assert_eq!(reals + fakes, 288);
        assert_eq!(reals, 72);
        assert_eq!(fakes, 216);
        // sources and partners share the class and differ where possible
        for k in 0..plan.len() {
            assert_eq!(labels[plan.src[k]], plan.labels[k]);
            assert_eq!(labels[plan.partner[k]], plan.labels[k]);
            assert_ne!(plan.src[k], plan.partner[k]);
            assert!(plan.t[k] >= 0.0 && plan.t[k] < 1.0);
        }
    }

    #[test]
    fn odd_allocation_rounds_by_remainder() {
        // 3 real, 1 fake, 5 synthetic slots: exact 3.75 / 1.25 -> 4 / 1
        let labels = vec![0, 0, 0, 1];
        let mut rng = stream(3, "ext", &[]);
        let plan = plan_extension(&labels, 9, &mut rng).unwrap();
        let reals = plan.labels.iter().filter(|l| **l == 0).count();
        assert_eq!(reals, 4);
        assert_eq!(plan.len() - reals, 1);
    }

    #[test]
    fn singleton_class_pairs_with_itself() {
        let batch = unit_batch(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.3, 0.3, 0.9]],
            vec![0, 0, 1],
        );
        let mut rng = stream(4, "ext", &[]);
        let out = extend_batch_slerp(&batch, 6, &mut rng).unwrap();
        // fake synthetic rows equal the single fake row (slerp(z,z,t) = z)
        for k in 3..6 {
            if out.labels()[k] == 1 {
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        out.features()[(k, c)],
                        batch.features()[(2, c)],
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn tape_extension_matches_value_level() {
        let mut rng_data = stream(5, "ext", &[]);
        let raw = Array2::from_shape_fn((8, 6), |_| rand::RngExt::random::<f64>(&mut rng_data) - 0.5);
        let labels: Vec<u8> = (0..8).map(|i| (i % 2) as u8).collect();
        let batch = FeatureBatch::normalize_rows(raw, labels.clone()).unwrap();

        let mut rng = stream(6, "ext", &[]);
        let plan = plan_extension(&labels, 20, &mut rng).unwrap();
        let value_ext = apply_plan_values(&batch, &plan);

        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(batch.features().clone());
        let ext = apply_plan_on_tape(&mut tape, z, &plan);
        let tape_ext = tape.value(ext);

        assert_eq!(tape_ext.dim(), (20, 6));
        for r in 0..20 {
            for c in 0..6 {
                assert_abs_diff_eq!(
                    tape_ext[(r, c)],
                    value_ext.features()[(r, c)],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn tape_extension_gradients_match_finite_difference() {
        let raw = array![
            [1.0, 0.2, -0.1],
            [0.1, 1.0, 0.3],
            [-0.4, 0.2, 0.9],
            [0.5, -0.5, 0.5]
        ];
        let labels = vec![0u8, 0, 1, 1];
        let mut rng = stream(7, "ext", &[]);
        let plan = plan_extension(&labels, 8, &mut rng).unwrap();

        let eval = |m: &Array2<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let leaf = tape.leaf(m.clone());
            let z = tape.l2_normalize_rows(leaf, 1e-12);
            let ext = apply_plan_on_tape(&mut tape, z, &plan);
            let sq = tape.mul(ext, ext);
            let s = tape.sum_all(sq);
            tape.scalar(s)
        };

        let mut tape = Tape::<f64>::new();
        let leaf = tape.leaf(raw.clone());
        let z = tape.l2_normalize_rows(leaf, 1e-12);
        let ext = apply_plan_on_tape(&mut tape, z, &plan);
        let sq = tape.mul(ext, ext);
        let s = tape.sum_all(sq);
        let grads = tape.backward(s);
        let analytic = grads.get(leaf).unwrap().clone();

        let h = 1e-6;
        for r in 0..4 {
            for c in 0..3 {
                let mut plus = raw.clone();
                plus[(r, c)] += h;
                let mut minus = raw.clone();
                minus[(r, c)] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                approx::assert_relative_eq!(analytic[(r, c)], fd, max_relative = 1e-4, epsilon = 1e-8);
            }
        }
    }
}
