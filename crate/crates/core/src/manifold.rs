//! The oblique manifold of invertible change-of-basis matrices.
//!
//! Every rank-R factorization of the same data can be written as a rotation
//! of the truncated SVD pair: `A = A_svd·Q`, `W = Q⁻¹·W_svd` for some
//! invertible R×R matrix `Q`. Restricting `Q` to unit-norm columns removes
//! the scale redundancy, leaving the oblique manifold
//!
//! ```text
//! OB(R) = { Q ∈ R^{R×R} : diag(QᵀQ) = I_R, det(Q) ≠ 0 }
//! ```
//!
//! which is a product of R unit spheres minus the singular set. Geometry is
//! per column: a direction `d` projects onto the tangent space of column `q`
//! as `v = d - (qᵀd)q`, and retraction maps `q + s·v` back to the sphere by
//! normalization. Distances between points are plain Frobenius distances,
//! which is what the search tree uses for nearest-neighbor queries.
//!
//! Mapping back to factor space clips negative entries ("floor" projection):
//! `A = max(A_svd·Q, 0)`, `W = max(Q⁻¹·W_svd, 0)`, with the inverse applied
//! through a linear solve rather than an explicit inverse.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Factorization;
use crate::nmf::SvdPair;

/// Column norms may deviate from 1 by at most this much.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// Minimum reciprocal condition number σ_min/σ_max for `Q` to count as
/// invertible.
pub const RCOND_MIN: f64 = 1e-12;

/// How many times [`sample_uniform`] redraws a near-singular matrix before
/// giving up.
const MAX_SAMPLE_RETRIES: usize = 100;

/// A point on the oblique manifold: square, unit-norm columns, invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct ObliquePoint {
    q: DMatrix<f64>,
}

impl ObliquePoint {
    /// Validates unit column norms (within [`UNIT_NORM_TOL`]) and
    /// invertibility (rcond > [`RCOND_MIN`]).
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "oblique points are square, got {:?}",
                q.shape()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite entry in Q".into()));
        }
        for j in 0..q.ncols() {
            let norm = q.column(j).norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "column {j} has norm {norm}, expected 1"
                )));
            }
        }
        let rc = rcond(&q);
        if rc <= RCOND_MIN || rc.is_nan() {
            return Err(Error::Singular(format!("rcond {rc} below {RCOND_MIN}")));
        }
        Ok(Self { q })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
}

/// Reciprocal condition number σ_min/σ_max from the singular values.
fn rcond(q: &DMatrix<f64>) -> f64 {
    let sv = q.clone().singular_values();
    let max = sv.iter().fold(0.0f64, |m, &s| m.max(s));
    let min = sv.iter().fold(f64::INFINITY, |m, &s| m.min(s));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Normalizes each column of `m` to unit Euclidean norm.
///
/// Errors on zero columns and on results that are (near-)singular.
pub fn project_to_oblique(m: &DMatrix<f64>) -> Result<ObliquePoint> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "projection needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    let mut q = m.clone();
    for j in 0..q.ncols() {
        let norm = q.column(j).norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!("column {j} cannot be normalized")));
        }
        q.column_mut(j).unscale_mut(norm);
    }
    ObliquePoint::new(q)
}

/// Moves from `from` toward `toward` by step size `s`: per column, project
/// the difference onto the tangent space, take the step, re-normalize.
///
/// Returns an error if the retracted matrix is near-singular; tree search
/// treats that as an infeasible step.
pub fn step(from: &ObliquePoint, toward: &ObliquePoint, s: f64) -> Result<ObliquePoint> {
    if from.dim() != toward.dim() {
        return Err(Error::DimensionMismatch("mismatched oblique dimensions".into()));
    }
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be >= 0, got {s}")));
    }
    let mut q = from.q.clone();
    for j in 0..q.ncols() {
        let qj = from.q.column(j);
        let d = toward.q.column(j) - qj;
        let v = &d - qj * qj.dot(&d);
        let stepped = qj + v * s;
        let norm = stepped.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numerical(format!("column {j} collapsed during retraction")));
        }
        q.column_mut(j).copy_from(&(stepped / norm));
    }
    ObliquePoint::new(q)
}

/// Draws a point uniformly over the product of spheres (each column an
/// independent normalized standard Gaussian vector), redrawing the whole
/// matrix while it is near-singular.
pub fn sample_uniform<R: Rng + ?Sized>(r: usize, rng: &mut R) -> Result<ObliquePoint> {
    Ok(sample_uniform_counted(r, rng)?.0)
}

/// As [`sample_uniform`], additionally reporting how many draws were needed.
pub(crate) fn sample_uniform_counted<R: Rng + ?Sized>(
    r: usize,
    rng: &mut R,
) -> Result<(ObliquePoint, usize)> {
    if r == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    for attempt in 1..=MAX_SAMPLE_RETRIES {
        let mut q = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut degenerate = false;
        for j in 0..r {
            let norm = q.column(j).norm();
            if norm == 0.0 {
                degenerate = true;
                break;
            }
            q.column_mut(j).unscale_mut(norm);
        }
        if degenerate {
            continue;
        }
        if let Ok(p) = ObliquePoint::new(q) {
            return Ok((p, attempt));
        }
    }
    Err(Error::Numerical(format!(
        "no invertible sample in {MAX_SAMPLE_RETRIES} draws (R = {r})"
    )))
}

/// Maps a basis change to factor space with the floor projection:
/// `A = max(A_svd·Q, 0)`, `W = max(Q⁻¹·W_svd, 0)` (via linear solve).
pub fn q_to_factorization(q: &ObliquePoint, svd: &SvdPair) -> Result<Factorization> {
    if svd.a_svd.ncols() != q.dim() || svd.w_svd.nrows() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "svd pair has rank {}, Q is {}x{}",
            svd.a_svd.ncols(),
            q.dim(),
            q.dim()
        )));
    }
    let mut a = &svd.a_svd * &q.q;
    let lu = q.q.clone().lu();
    let mut w = lu
        .solve(&svd.w_svd)
        .ok_or_else(|| Error::Singular("Q not solvable despite rcond check".into()))?;
    a.apply(|v| *v = v.max(0.0));
    w.apply(|v| *v = v.max(0.0));
    Ok(Factorization { a, w })
}

/// Recovers the basis change closest to a factorization: the least-squares
/// solution of `min_Q ‖A - A_svd·Q‖_F`, projected onto the manifold.
pub fn factorization_to_q(f: &Factorization, svd: &SvdPair) -> Result<ObliquePoint> {
    let r = svd.a_svd.ncols();
    if f.a.nrows() != svd.a_svd.nrows() || f.rank() != r {
        return Err(Error::DimensionMismatch(format!(
            "factorization is {:?}/{:?}, svd pair {:?}/{:?}",
            f.a.shape(),
            f.w.shape(),
            svd.a_svd.shape(),
            svd.w_svd.shape()
        )));
    }
    let q = svd
        .a_svd
        .clone()
        .svd(true, true)
        .solve(&f.a, RCOND_MIN)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    project_to_oblique(&q)
}

/// Frobenius distance between two points.
pub fn distance(a: &ObliquePoint, b: &ObliquePoint) -> f64 {
    (&a.q - &b.q).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmf::truncated_svd;
    use approx::assert_relative_eq;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_scaled_identity() {
        let m = DMatrix::<f64>::identity(2, 2) * 3.0;
        let p = project_to_oblique(&m).unwrap();
        assert_relative_eq!((p.matrix() - DMatrix::<f64>::identity(2, 2)).norm(), 0.0);
    }

    #[test]
    fn project_normalizes_columns() {
        let m = DMatrix::from_column_slice(2, 2, &[3.0, 4.0, 0.0, 2.0]);
        let p = project_to_oblique(&m).unwrap();
        assert_relative_eq!(p.matrix()[(0, 0)], 0.6, epsilon = 1e-15);
        assert_relative_eq!(p.matrix()[(1, 0)], 0.8, epsilon = 1e-15);
        assert_relative_eq!(p.matrix()[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn project_rejects_degenerate_input() {
        // Zero column.
        let m = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(project_to_oblique(&m).is_err());
        // Identical columns normalize to a singular matrix.
        let m = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(project_to_oblique(&m), Err(Error::Singular(_))));
    }

    #[test]
    fn step_with_zero_tangent_is_identity() {
        let p = project_to_oblique(&DMatrix::<f64>::identity(3, 3)).unwrap();
        let out = step(&p, &p, 0.7).unwrap();
        assert_relative_eq!(distance(&out, &p), 0.0);
    }

    #[test]
    fn step_hand_computed_column() {
        // Column (1,0)ᵀ stepping toward (0,1)ᵀ with s = 1: the tangent
        // component of the difference is (0,1)ᵀ, so the retracted column is
        // (1,1)ᵀ/√2. Second column held near e₂ to keep both points valid.
        let from = project_to_oblique(&DMatrix::<f64>::identity(2, 2)).unwrap();
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let toward =
            project_to_oblique(&DMatrix::from_column_slice(2, 2, &[0.0, 1.0, c, c])).unwrap();
        let out = step(&from, &toward, 1.0).unwrap();
        assert_relative_eq!(out.matrix()[(0, 0)], c, epsilon = 1e-12);
        assert_relative_eq!(out.matrix()[(1, 0)], c, epsilon = 1e-12);
    }

    #[test]
    fn steps_preserve_unit_norms_over_long_walks() {
        // 10,000 random steps: max column-norm drift stays below 1e-9.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut p = sample_uniform(3, &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let target = sample_uniform(3, &mut rng).unwrap();
            if let Ok(next) = step(&p, &target, 0.01) {
                p = next;
            }
            for j in 0..3 {
                worst = worst.max((p.matrix().column(j).norm() - 1.0).abs());
            }
        }
        assert!(worst < 1e-9, "norm drift {worst}");
    }

    #[test]
    fn sample_uniform_is_sign_symmetric_and_rarely_retries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mean = DMatrix::<f64>::zeros(3, 3);
        let mut retries = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let (p, attempts) = sample_uniform_counted(3, &mut rng).unwrap();
            retries += attempts - 1;
            mean += p.matrix();
        }
        mean /= draws as f64;
        // Column directions are symmetric about the origin, so the mean of
        // each coordinate shrinks like 1/sqrt(draws).
        assert!(mean.norm() < 0.05, "mean norm {}", mean.norm());
        assert!(
            (retries as f64) < 0.01 * draws as f64,
            "{retries} retries in {draws} draws"
        );
    }

    #[test]
    fn q_roundtrip_on_exact_rank_data() {
        // For data with an exact interior NMF, the recovered Q maps back to
        // the same factorization up to positive column rescaling, with no
        // mass lost to clipping.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a_true = DMatrix::from_fn(8, 3, |_, _| rng.gen_range(0.1..1.0));
        let w_true = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(0.1..1.0));
        let f_true = Factorization::new(a_true, w_true).unwrap();
        let x = f_true.product();
        let svd = truncated_svd(&x, 3).unwrap();

        let q = factorization_to_q(&f_true, &svd).unwrap();
        let back = q_to_factorization(&q, &svd).unwrap();

        // Reconstruction identical...
        assert!((back.product() - &x).norm() / x.norm() < 1e-8);
        // ...and each column of A is a positive multiple of the original.
        for j in 0..3 {
            let orig = f_true.a.column(j);
            let got = back.a.column(j);
            let scale = got.dot(&orig) / orig.norm_squared();
            assert!(scale > 0.0);
            assert!((got - orig * scale).norm() < 1e-8 * orig.norm());
        }

        // No clipping occurred: pre-floor entries were already non-negative,
        // so the reconstruction of the unclipped product matches exactly.
        let raw_a = &svd.a_svd * q.matrix();
        assert!(raw_a.iter().all(|&v| v >= -1e-10));
    }

    #[test]
    fn factorization_to_q_then_back_is_idempotent_fixed_point() {
        // Applying the floor + recovery loop twice changes nothing once the
        // factorization already lies in the representable set.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(0.1..1.0));
        let w = DMatrix::from_fn(2, 7, |_, _| rng.gen_range(0.1..1.0));
        let f = Factorization::new(a, w).unwrap();
        let x = f.product();
        let svd = truncated_svd(&x, 2).unwrap();

        let q1 = factorization_to_q(&f, &svd).unwrap();
        let f1 = q_to_factorization(&q1, &svd).unwrap();
        let q2 = factorization_to_q(&f1, &svd).unwrap();
        let f2 = q_to_factorization(&q2, &svd).unwrap();
        assert!((&f2.a - &f1.a).norm() < 1e-9);
        assert!((&f2.w - &f1.w).norm() < 1e-9);
    }

    #[test]
    fn distance_is_frobenius() {
        let p = project_to_oblique(&DMatrix::<f64>::identity(2, 2)).unwrap();
        let q = project_to_oblique(&DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            .unwrap();
        assert_relative_eq!(distance(&p, &p), 0.0);
        assert_relative_eq!(distance(&p, &q), 2.0, epsilon = 1e-14);
    }
}
