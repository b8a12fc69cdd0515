//! Solution-space metrics: weighted angular distance between factorizations,
//! covering numbers, and persistence curves.
//!
//! Two factorizations with the same product can differ by column permutation
//! and positive rescaling. The weighted angular distance (WAD) quotients
//! both out: columns are matched by a minimum-total-angle assignment, scale
//! is removed by normalizing each column (with the inverse absorbed into the
//! paired factor), and each matched angle is weighted by how much relative
//! mass the corresponding rows carry:
//!
//! ```text
//! WAD(F, F') = Σ_k α_k · (w_k + w'_{π(k)}) / 2   ∈ [0°, 90°]
//! ```
//!
//! Zero columns follow the conventions: zero-vs-zero is 0°, zero-vs-nonzero
//! is 90°. Covering numbers summarize how many WAD-balls of a given radius
//! are needed to cover a sample set (greedy max-coverage, deterministic
//! tie-breaking), and the persistence curve traces that count over a log
//! grid of radii.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::Factorization;

/// Column normalization used before comparing mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnScale {
    /// Columns scaled to unit 1-norm (entry sum, for non-negative factors).
    #[default]
    L1,
    /// Columns scaled to unit Euclidean norm.
    L2,
}

/// Angle in degrees between two column vectors, with the zero conventions:
/// both zero → 0°, exactly one zero → 90°. Uses the atan2 form
/// `2·atan2(‖û - v̂‖, ‖û + v̂‖)`, which stays fully accurate near 0° and
/// 180° where the arccosine of a dot product loses half its digits.
fn column_angle_degrees(u: nalgebra::DVectorView<f64>, v: nalgebra::DVectorView<f64>) -> f64 {
    let nu = u.norm();
    let nv = v.norm();
    match (nu == 0.0, nv == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 90.0,
        (false, false) => {
            let mut diff2 = 0.0;
            let mut sum2 = 0.0;
            for i in 0..u.len() {
                let a = u[i] / nu;
                let b = v[i] / nv;
                diff2 += (a - b) * (a - b);
                sum2 += (a + b) * (a + b);
            }
            (2.0 * diff2.sqrt().atan2(sum2.sqrt())).to_degrees()
        }
    }
}

/// Pairwise angles (degrees) between the columns of two matrices.
pub fn angle_matrix(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a1.nrows() != a2.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "column spaces live in different dimensions: {} vs {}",
            a1.nrows(),
            a2.nrows()
        )));
    }
    Ok(DMatrix::from_fn(a1.ncols(), a2.ncols(), |i, j| {
        column_angle_degrees(a1.column(i), a2.column(j))
    }))
}

/// Minimum-cost perfect assignment on a square cost matrix (shortest
/// augmenting paths with potentials, O(n³)). Returns `perm` with
/// `perm[row] = col`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::DimensionMismatch("assignment needs a square cost matrix".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("assignment costs must be finite".into()));
    }

    // 1-indexed arrays; p[j] is the row matched to column j (0 = none).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    Ok(perm)
}

/// Normalizes each column of `a` to unit norm (per `scale`), absorbing the
/// inverse into the matching row of `w` so the product is unchanged. Zero
/// columns are left alone.
fn normalize_columns(a: &mut DMatrix<f64>, w: &mut DMatrix<f64>, scale: ColumnScale) {
    for k in 0..a.ncols() {
        let s = match scale {
            ColumnScale::L1 => a.column(k).iter().map(|v| v.abs()).sum::<f64>(),
            ColumnScale::L2 => a.column(k).norm(),
        };
        if s > 0.0 {
            a.column_mut(k).unscale_mut(s);
            w.row_mut(k).scale_mut(s);
        }
    }
}

/// Relative mass carried by each basis column: normalized row sums of `w`.
/// An all-zero `w` falls back to uniform weights.
fn mixing_weights(w: &DMatrix<f64>) -> Vec<f64> {
    let sums: Vec<f64> = (0..w.nrows()).map(|k| w.row(k).iter().sum::<f64>()).collect();
    let total: f64 = sums.iter().sum();
    if total > 0.0 {
        sums.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / w.nrows() as f64; w.nrows()]
    }
}

/// Weighted angular distance between two factorizations, in degrees.
pub fn wad(f1: &Factorization, f2: &Factorization, scale: ColumnScale) -> Result<f64> {
    if f1.a.nrows() != f2.a.nrows() || f1.rank() != f2.rank() {
        return Err(Error::DimensionMismatch(format!(
            "factorizations of shape {}x{} vs {}x{} are not comparable",
            f1.a.nrows(),
            f1.rank(),
            f2.a.nrows(),
            f2.rank()
        )));
    }
    let mut a1 = f1.a.clone();
    let mut w1 = f1.w.clone();
    let mut a2 = f2.a.clone();
    let mut w2 = f2.w.clone();
    normalize_columns(&mut a1, &mut w1, scale);
    normalize_columns(&mut a2, &mut w2, scale);

    let angles = angle_matrix(&a1, &a2)?;
    let perm = min_cost_assignment(&angles)?;
    let wt1 = mixing_weights(&w1);
    let wt2 = mixing_weights(&w2);

    let mut total = 0.0;
    for (k, &pk) in perm.iter().enumerate() {
        total += angles[(k, pk)] * 0.5 * (wt1[k] + wt2[pk]);
    }
    Ok(total)
}

/// All pairwise WADs of a sample set (symmetric, zero diagonal).
pub fn pairwise_wad(samples: &[Factorization], scale: ColumnScale) -> Result<DMatrix<f64>> {
    let n = samples.len();
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = wad(&samples[i], &samples[j], scale)?;
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    Ok(dist)
}

/// Greedy covering number: repeatedly pick the sample whose radius-ball
/// covers the most still-uncovered samples (ties to the lowest index) until
/// everything is covered. Centers are taken from the samples themselves.
pub fn covering_number(dist: &DMatrix<f64>, radius: f64) -> Result<usize> {
    let n = dist.nrows();
    if dist.ncols() != n {
        return Err(Error::DimensionMismatch("distance matrix must be square".into()));
    }
    if radius < 0.0 || radius.is_nan() {
        return Err(Error::InvalidArgument("radius must be non-negative".into()));
    }
    let mut uncovered = vec![true; n];
    let mut remaining = n;
    let mut centers = 0usize;
    while remaining > 0 {
        let mut best = usize::MAX;
        let mut best_count = 0usize;
        for i in 0..n {
            let count =
                (0..n).filter(|&j| uncovered[j] && dist[(i, j)] <= radius).count();
            if count > best_count {
                best_count = count;
                best = i;
            }
        }
        debug_assert!(best != usize::MAX, "self-distance must be within any radius");
        for j in 0..n {
            if uncovered[j] && dist[(best, j)] <= radius {
                uncovered[j] = false;
                remaining -= 1;
            }
        }
        centers += 1;
    }
    Ok(centers)
}

/// Number of radii on the persistence grid.
pub const PERSISTENCE_POINTS: usize = 50;
/// Smallest persistence radius, degrees.
pub const PERSISTENCE_MIN_DEG: f64 = 1e-3;
/// Largest persistence radius, degrees.
pub const PERSISTENCE_MAX_DEG: f64 = 90.0;

/// Covering number over a log-spaced grid of radii — the persistence curve
/// `(radius_degrees, covering_number)`.
pub fn persistence_curve(dist: &DMatrix<f64>) -> Result<Vec<(f64, usize)>> {
    let lo = PERSISTENCE_MIN_DEG.ln();
    let hi = PERSISTENCE_MAX_DEG.ln();
    let mut out = Vec::with_capacity(PERSISTENCE_POINTS);
    for i in 0..PERSISTENCE_POINTS {
        let t = i as f64 / (PERSISTENCE_POINTS - 1) as f64;
        let radius = if i == 0 {
            PERSISTENCE_MIN_DEG
        } else if i == PERSISTENCE_POINTS - 1 {
            PERSISTENCE_MAX_DEG
        } else {
            (lo + t * (hi - lo)).exp()
        };
        out.push((radius, covering_number(dist, radius)?));
    }
    Ok(out)
}

/// Renders a persistence curve as CSV with a fixed header. The float format
/// is the shortest round-trip representation, so identical curves yield
/// identical bytes.
pub fn persistence_csv(curve: &[(f64, usize)]) -> String {
    let mut s = String::from("epsilon_degrees,covering_number\n");
    for (eps, count) in curve {
        s.push_str(&format!("{eps},{count}\n"));
    }
    s
}
