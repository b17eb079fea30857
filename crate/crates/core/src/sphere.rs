//! Geometry on the unit hypersphere: L2 projection, spherical linear
//! interpolation, and pairwise squared distances.
//!
//! Everything here is a pure function over immutable inputs. The interpolation
//! guards its trigonometry: dot products are clamped before `acos`, and angles
//! below [`THETA_MIN`] fall back to normalized linear interpolation, which
//! agrees with the exact geodesic to O(theta^2).

use crate::error::{Error, Result};
use crate::scalar::Real;
use ndarray::{Array1, Array2, ArrayView1};
use std::sync::atomic::{AtomicU64, Ordering};

/// Norms at or below this are treated as degenerate (zero) vectors.
pub const EPS_NORM: f64 = 1e-12;
/// Dot products are clamped to `[-1 + EPS_ACOS, 1 - EPS_ACOS]` before `acos`.
pub const EPS_ACOS: f64 = 1e-7;
/// Angles below this take the lerp-and-renormalize fallback.
pub const THETA_MIN: f64 = 1e-4;
/// Unit-norm construction tolerance.
pub const UNIT_TOL: f64 = 1e-5;

static ANTIPODAL_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// Number of slerp calls so far that hit the near-antipodal clamp, where the
/// geodesic is not unique and the clamped path is returned instead.
pub fn antipodal_fallback_count() -> u64 {
    ANTIPODAL_FALLBACKS.load(Ordering::Relaxed)
}

fn note_antipodal() {
    ANTIPODAL_FALLBACKS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn note_antipodal_fallback() {
    note_antipodal();
}

/// A feature vector on the unit hypersphere.
///
/// Construction goes through [`l2_normalize`] (or [`UnitFeature::new`], which
/// checks an already-normalized vector), so a value of this type always has
/// unit Euclidean norm within [`UNIT_TOL`] and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeature<F: Real>(Array1<F>);

impl<F: Real> UnitFeature<F> {
    /// Wraps a vector that must already be unit-norm and finite.
    pub fn new(values: Array1<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch {
                expected: "finite entries".into(),
                got: "non-finite entry".into(),
            });
        }
        let norm = norm(&values.view()).to_f64_c();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::ZeroVector { norm });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> ArrayView1<'_, F> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<F> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine of the angle to another unit feature.
    pub fn dot(&self, other: &Self) -> F {
        self.0.dot(&other.0)
    }

    /// Angle to another unit feature, with the same clamping slerp uses.
    pub fn angle(&self, other: &Self) -> F {
        clamped_acos(self.dot(other))
    }
}

fn norm<F: Real>(v: &ArrayView1<F>) -> F {
    v.iter().map(|x| *x * *x).sum::<F>().sqrt()
}

fn clamped_acos<F: Real>(dot: F) -> F {
    let hi = F::one() - F::from_f64_c(EPS_ACOS);
    dot.max(-hi).min(hi).acos()
}

/// Projects a vector onto the unit sphere.
///
/// Errors with [`Error::ZeroVector`] when the norm is at or below
/// [`EPS_NORM`], which signals a degenerate encoder output upstream.
pub fn l2_normalize<F: Real>(v: ArrayView1<F>) -> Result<UnitFeature<F>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::ShapeMismatch {
            expected: "finite entries".into(),
            got: "non-finite entry".into(),
        });
    }
    let n = norm(&v);
    if n.to_f64_c() <= EPS_NORM {
        return Err(Error::ZeroVector {
            norm: n.to_f64_c(),
        });
    }
    Ok(UnitFeature(v.mapv(|x| x / n)))
}

/// Spherical linear interpolation between two unit features.
///
/// `t = 0` returns `z_i`, `t = 1` returns `z_j`, and intermediate values move
/// along the geodesic at constant angular speed:
/// `sin((1-t)*theta)/sin(theta) * z_i + sin(t*theta)/sin(theta) * z_j` with
/// `theta = acos(z_i . z_j)`.
pub fn slerp<F: Real>(z_i: &UnitFeature<F>, z_j: &UnitFeature<F>, t: F) -> UnitFeature<F> {
    debug_assert!(t >= F::zero() && t <= F::one(), "t must lie in [0,1]");
    let raw_dot = z_i.dot(z_j);
    let lo = -(F::one() - F::from_f64_c(EPS_ACOS));
    if raw_dot < lo {
        note_antipodal();
    }
    let theta = clamped_acos(raw_dot);

    if theta.to_f64_c() < THETA_MIN {
        // Near-parallel: Eq. sin(theta) denominator is unstable, and lerp
        // matches the geodesic to O(theta^2) here.
        let blended =
            z_i.values().mapv(|x| x * (F::one() - t)) + z_j.values().mapv(|x| x * t);
        return l2_normalize(blended.view()).expect("lerp of unit vectors is nonzero");
    }

    let sin_theta = theta.sin();
    let a = ((F::one() - t) * theta).sin() / sin_theta;
    let b = (t * theta).sin() / sin_theta;
    let out = z_i.values().mapv(|x| x * a) + z_j.values().mapv(|x| x * b);
    // Renormalize to absorb the clamped-dot perturbation and rounding.
    l2_normalize(out.view()).expect("slerp output is nonzero")
}

/// A batch of unit features with binary labels (0 = real, 1 = fake).
#[derive(Debug, Clone)]
pub struct FeatureBatch<F: Real> {
    features: Array2<F>,
    labels: Vec<u8>,
}

impl<F: Real> FeatureBatch<F> {
    /// Wraps a matrix whose rows must already be unit-norm.
    pub fn new(features: Array2<F>, labels: Vec<u8>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", features.nrows()),
                got: format!("{}", labels.len()),
            });
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(Error::InvalidConfig(format!(
                "labels must be 0 (real) or 1 (fake), got {l}"
            )));
        }
        for (i, row) in features.rows().into_iter().enumerate() {
            let n = norm(&row).to_f64_c();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::ShapeMismatch {
                    expected: "unit-norm rows".into(),
                    got: format!("row {i} has norm {n}"),
                });
            }
        }
        Ok(Self { features, labels })
    }

    /// Projects each row onto the sphere, then wraps.
    pub fn normalize_rows(raw: Array2<F>, labels: Vec<u8>) -> Result<Self> {
        let mut features = raw;
        for mut row in features.rows_mut() {
            let n = norm(&row.view());
            if n.to_f64_c() <= EPS_NORM {
                return Err(Error::ZeroVector {
                    norm: n.to_f64_c(),
                });
            }
            row.mapv_inplace(|x| x / n);
        }
        Self::new(features, labels)
    }

    pub fn features(&self) -> &Array2<F> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> UnitFeature<F> {
        UnitFeature(self.features.row(i).to_owned())
    }
}

/// Pairwise squared Euclidean distances between batch rows.
///
/// For unit rows this equals `2 - 2 * (z_x . z_y)` entrywise; the result is
/// exactly symmetric with a zero diagonal and entries clamped to `[0, 4]`.
pub fn pairwise_sq_dists<F: Real>(batch: &FeatureBatch<F>) -> Array2<F> {
    let z = batch.features();
    let gram = z.dot(&z.t());
    let two = F::from_f64_c(2.0);
    let four = F::from_f64_c(4.0);
    let n = z.nrows();
    let mut out = Array2::zeros((n, n));
    for x in 0..n {
        for y in (x + 1)..n {
            let d = (two - two * gram[(x, y)]).max(F::zero()).min(four);
            out[(x, y)] = d;
            out[(y, x)] = d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::RngExt;

    fn random_unit(dim: usize, rng: &mut impl RngExt) -> UnitFeature<f64> {
        loop {
            let v: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.random::<f64>() - 0.5));
            if let Ok(u) = l2_normalize(v.view()) {
                return u;
            }
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let u = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert_abs_diff_eq!(u.values()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(u.values()[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn normalize_identity_case() {
        let u = l2_normalize(array![1.0, 0.0, 0.0].view()).unwrap();
        assert_eq!(u.values().to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_random_high_dim_preserves_direction() {
        let mut rng = crate::rng::stream(11, "sphere_test", &[]);
        let v: Array1<f64> = Array1::from_iter((0..1024).map(|_| rng.random::<f64>() * 2.0 - 1.0));
        let u = l2_normalize(v.view()).unwrap();
        let n: f64 = u.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = v.dot(&u.values()) / vn;
        assert!((cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        let err = l2_normalize(array![0.0, 0.0].view()).unwrap_err();
        assert!(matches!(err, Error::ZeroVector { .. }));
    }

    #[test]
    fn slerp_orthogonal_midpoint() {
        let e1 = l2_normalize(array![1.0, 0.0, 0.0].view()).unwrap();
        let e2 = l2_normalize(array![0.0, 1.0, 0.0].view()).unwrap();
        let mid = slerp(&e1, &e2, 0.5);
        let half = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(mid.values()[0], half, epsilon = 1e-7);
        assert_abs_diff_eq!(mid.values()[1], half, epsilon = 1e-7);
        assert_abs_diff_eq!(mid.values()[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn slerp_endpoints() {
        let mut rng = crate::rng::stream(3, "sphere_test", &[]);
        for _ in 0..16 {
            let z = random_unit(8, &mut rng);
            let w = random_unit(8, &mut rng);
            let at0 = slerp(&z, &w, 0.0);
            let at1 = slerp(&z, &w, 1.0);
            for k in 0..8 {
                assert_abs_diff_eq!(at0.values()[k], z.values()[k], epsilon = 1e-5);
                assert_abs_diff_eq!(at1.values()[k], w.values()[k], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn slerp_angle_is_linear_in_t() {
        let mut rng = crate::rng::stream(4, "sphere_test", &[]);
        for _ in 0..100 {
            let z = random_unit(16, &mut rng);
            let w = random_unit(16, &mut rng);
            let theta = z.angle(&w);
            for step in 1..=9 {
                let t = f64::from(step) / 10.0;
                let out = slerp(&z, &w, t);
                assert_abs_diff_eq!(z.angle(&out), t * theta, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn slerp_output_in_span() {
        let mut rng = crate::rng::stream(5, "sphere_test", &[]);
        let z = random_unit(6, &mut rng);
        let w = random_unit(6, &mut rng);
        let out = slerp(&z, &w, 0.3);
        // Residual after projecting onto span{z, w} must vanish.
        let zc = out.dot(&z);
        let wc = out.dot(&w);
        let d = z.dot(&w);
        let denom = 1.0 - d * d;
        let a = (zc - d * wc) / denom;
        let b = (wc - d * zc) / denom;
        let recon = z.values().mapv(|x| x * a) + w.values().mapv(|x| x * b);
        for k in 0..6 {
            assert_abs_diff_eq!(recon[k], out.values()[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn slerp_near_parallel_falls_back() {
        let z = l2_normalize(array![1.0, 0.0].view()).unwrap();
        let w = l2_normalize(array![1.0, 1e-9].view()).unwrap();
        let out = slerp(&z, &w, 0.5);
        let n: f64 = out.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slerp_antipodal_counts_and_stays_unit() {
        let before = antipodal_fallback_count();
        let z = l2_normalize(array![1.0, 0.0, 0.0].view()).unwrap();
        let w = l2_normalize(array![-1.0, 0.0, 0.0].view()).unwrap();
        let out = slerp(&z, &w, 0.25);
        let n: f64 = out.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(antipodal_fallback_count() > before);
    }

    #[test]
    fn pairwise_identical_rows_zero() {
        let row = [0.6, 0.8];
        let feats: Array2<f64> = Array2::from_shape_fn((3, 2), |(_, j)| row[j]);
        let batch = FeatureBatch::new(feats, vec![0, 1, 0]).unwrap();
        let d = pairwise_sq_dists(&batch);
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pairwise_antipodal_is_four() {
        let feats = array![[1.0, 0.0], [-1.0, 0.0]];
        let batch = FeatureBatch::new(feats, vec![0, 1]).unwrap();
        let d = pairwise_sq_dists(&batch);
        assert_abs_diff_eq!(d[(0, 1)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[(1, 0)], 4.0, epsilon = 1e-12);
        assert_eq!(d[(0, 0)], 0.0);
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let mut rng = crate::rng::stream(6, "sphere_test", &[]);
        let rows: Vec<UnitFeature<f64>> = (0..8).map(|_| random_unit(5, &mut rng)).collect();
        let mut feats = Array2::zeros((8, 5));
        for (i, r) in rows.iter().enumerate() {
            feats.row_mut(i).assign(&r.values());
        }
        let batch = FeatureBatch::new(feats, vec![0; 8]).unwrap();
        let d = pairwise_sq_dists(&batch);
        for x in 0..8 {
            for y in 0..8 {
                let brute: f64 = (0..5)
                    .map(|k| {
                        let diff = rows[x].values()[k] - rows[y].values()[k];
                        diff * diff
                    })
                    .sum();
                assert_abs_diff_eq!(d[(x, y)], brute, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn batch_rejects_label_length_mismatch() {
        let feats = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(FeatureBatch::new(feats, vec![0]).is_err());
    }

    #[test]
    fn batch_rejects_non_unit_rows() {
        let feats = array![[2.0, 0.0], [0.0, 1.0]];
        assert!(FeatureBatch::new(feats, vec![0, 1]).is_err());
    }
}
