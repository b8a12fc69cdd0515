//! Point solvers: truncated SVD and projected-gradient NMF.
//!
//! The projected-gradient solver follows Lin's alternating non-negative
//! least-squares scheme: each factor is updated by solving
//! `min_{H≥0} ½‖V - WH‖²_F` with projected gradient steps and a backtracking
//! line search along the projection arc (shrink factor 0.1, sufficient
//! decrease 0.01), warm-starting tolerances that tighten adaptively. The
//! squared reconstruction error never increases across outer iterations.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Factorization;

/// Rank-R truncated SVD of the data, split as `A_svd = U_R Σ_R` (D×R) and
/// `W_svd = V_Rᵀ` (R×N), the best rank-R approximation `X ≈ A_svd · W_svd`.
#[derive(Debug, Clone)]
pub struct SvdPair {
    pub a_svd: DMatrix<f64>,
    pub w_svd: DMatrix<f64>,
    /// The R retained singular values, non-increasing.
    pub singular_values: DVector<f64>,
}

/// Computes the truncated SVD with singular values sorted non-increasing.
pub fn truncated_svd(x: &DMatrix<f64>, r: usize) -> Result<SvdPair> {
    let min_dim = x.nrows().min(x.ncols());
    if r == 0 || r > min_dim {
        return Err(Error::InvalidArgument(format!(
            "rank must be in 1..={min_dim}, got {r}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("data contains non-finite entries".into()));
    }

    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");

    // nalgebra does not guarantee ordering; sort triplet indices explicitly.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut a_svd = DMatrix::zeros(x.nrows(), r);
    let mut w_svd = DMatrix::zeros(r, x.ncols());
    let mut sigma = DVector::zeros(r);
    for (k, &idx) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[idx];
        sigma[k] = s;
        a_svd.column_mut(k).copy_from(&(u.column(idx) * s));
        w_svd.row_mut(k).copy_from(&v_t.row(idx));
    }
    Ok(SvdPair { a_svd, w_svd, singular_values: sigma })
}

/// Initialization for the projected-gradient solver.
#[derive(Debug, Clone)]
pub enum Init {
    /// Entries drawn i.i.d. uniform on (0,1], scaled by `sqrt(mean(X)/R)`.
    Random { seed: u64 },
    /// Start from a given factorization.
    Point(Factorization),
}

/// Options for [`lin_pg_nmf`].
#[derive(Debug, Clone)]
pub struct LinOptions {
    /// Stop when the projected-gradient norm falls below `tol` times the
    /// initial projected-gradient norm.
    pub tol: f64,
    /// Cap on outer (alternating) iterations.
    pub max_outer: usize,
    /// Cap on projected-gradient iterations per subproblem.
    pub max_inner: usize,
}

impl Default for LinOptions {
    fn default() -> Self {
        Self { tol: 1e-4, max_outer: 500, max_inner: 1000 }
    }
}

/// A converged (or iteration-capped) projected-gradient fit.
#[derive(Debug, Clone)]
pub struct LinFit {
    pub factorization: Factorization,
    /// Outer iterations actually performed.
    pub iterations: usize,
    /// Squared reconstruction error ‖X - AW‖²_F after each outer iteration,
    /// starting with the initial point. Non-increasing.
    pub objective_trace: Vec<f64>,
}

impl LinFit {
    /// Final squared reconstruction error ‖X - AW‖²_F.
    pub fn squared_error(&self) -> f64 {
        *self.objective_trace.last().expect("trace never empty")
    }
}

/// Line-search shrink factor for the projection-arc step size.
const LS_SHRINK: f64 = 0.1;
/// Sufficient-decrease constant in the Armijo condition.
const LS_SUFF_DECR: f64 = 0.01;
/// Maximum step-size trials per projected-gradient iteration.
const LS_MAX_TRIALS: usize = 20;

/// Projected-gradient solver for `min_{A≥0,W≥0} ‖X - AW‖²_F`.
pub fn lin_pg_nmf(x: &DMatrix<f64>, r: usize, init: Init, opts: &LinOptions) -> Result<LinFit> {
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("data contains non-finite entries".into()));
    }
    let (d, n) = x.shape();

    let (mut a, mut w) = match init {
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = (x.mean() / r as f64).max(0.0).sqrt();
            // 1 - U[0,1) lies in (0,1].
            let mut draw = |_: usize, _: usize| (1.0 - rng.gen::<f64>()) * scale;
            let a = DMatrix::from_fn(d, r, &mut draw);
            let w = DMatrix::from_fn(r, n, &mut draw);
            (a, w)
        }
        Init::Point(f) => {
            if f.a.shape() != (d, r) || f.w.shape() != (r, n) {
                return Err(Error::DimensionMismatch(format!(
                    "init must be {d}x{r} / {r}x{n}, got {:?} / {:?}",
                    f.a.shape(),
                    f.w.shape()
                )));
            }
            (f.a, f.w)
        }
    };

    let grad_a = |a: &DMatrix<f64>, w: &DMatrix<f64>| (a * w - x) * w.transpose();
    let grad_w = |a: &DMatrix<f64>, w: &DMatrix<f64>| a.transpose() * (a * w - x);

    let mut ga = grad_a(&a, &w);
    let mut gw = grad_w(&a, &w);
    let init_grad = (ga.norm_squared() + gw.norm_squared()).sqrt();
    let mut tol_a = opts.tol.max(1e-3) * init_grad;
    let mut tol_w = tol_a;

    let mut trace = vec![(x - &a * &w).norm_squared()];
    let mut iterations = 0;

    for _ in 0..opts.max_outer {
        let projnorm = (projected_sq(&ga, &a) + projected_sq(&gw, &w)).sqrt();
        if projnorm <= opts.tol * init_grad {
            break;
        }

        // A-subproblem via transposition: min_{Aᵀ≥0} ‖Xᵀ - Wᵀ Aᵀ‖².
        let (a_t, ga_t, inner_a) = nls_subproblem(
            &x.transpose(),
            &w.transpose(),
            a.transpose(),
            tol_a,
            opts.max_inner,
        );
        a = a_t.transpose();
        ga = ga_t.transpose();
        if inner_a == 1 {
            tol_a *= 0.1;
        }

        let (w_new, gw_new, inner_w) = nls_subproblem(x, &a, w, tol_w, opts.max_inner);
        w = w_new;
        gw = gw_new;
        if inner_w == 1 {
            tol_w *= 0.1;
        }

        iterations += 1;
        trace.push((x - &a * &w).norm_squared());
    }

    Ok(LinFit {
        factorization: Factorization::new(a, w)?,
        iterations,
        objective_trace: trace,
    })
}

/// Squared norm of the gradient restricted to free directions: entries where
/// the gradient points into the feasible set or the variable is interior.
fn projected_sq(grad: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    grad.iter()
        .zip(h.iter())
        .filter(|&(&g, &v)| g < 0.0 || v > 0.0)
        .map(|(&g, _)| g * g)
        .sum()
}

/// Projected-gradient solver for one subproblem `min_{H≥0} ½‖V - WH‖²_F`,
/// with the step size searched along the projection arc. Returns the
/// solution, its gradient, and the number of iterations used.
fn nls_subproblem(
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    mut h: DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let wtv = w.transpose() * v;
    let wtw = w.transpose() * w;

    let mut alpha = 1.0;
    let mut grad = &wtw * &h - &wtv;
    let mut iter = 0;

    for it in 1..=max_iter {
        iter = it;
        grad = &wtw * &h - &wtv;
        if projected_sq(&grad, &h).sqrt() < tol {
            break;
        }

        // Try the current step size; grow it while the Armijo condition
        // holds, shrink while it fails. For the quadratic subproblem the
        // condition evaluates exactly via gᵀd + ½ dᵀ(WᵀW)d.
        let mut h_prev: Option<DMatrix<f64>> = None;
        let mut decrease_alpha = false;
        for trial in 1..=LS_MAX_TRIALS {
            let hn = step_candidate(&h, &grad, alpha);
            let diff = &hn - &h;
            let gradd = grad.dot(&diff);
            let dqd = (&wtw * &diff).dot(&diff);
            let sufficient = (1.0 - LS_SUFF_DECR) * gradd + 0.5 * dqd < 0.0;

            if trial == 1 {
                decrease_alpha = !sufficient;
                h_prev = Some(h.clone());
            }
            if decrease_alpha {
                if sufficient {
                    h = hn;
                    break;
                }
                alpha *= LS_SHRINK;
            } else if !sufficient || h_prev.as_ref() == Some(&hn) {
                h = h_prev.take().expect("set on first trial");
                break;
            } else {
                alpha /= LS_SHRINK;
                h_prev = Some(hn);
            }
        }
    }
    (h, grad, iter)
}

fn step_candidate(h: &DMatrix<f64>, grad: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let mut hn = h - grad * alpha;
    hn.apply(|v| *v = v.max(0.0));
    hn
}

/// Which restart's residual defines the empirical Gaussian variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaSource {
    /// The first restart (seed + 0).
    #[default]
    FirstFit,
    /// The restart with the smallest squared error.
    BestFit,
    /// Average of the per-restart variances.
    MeanOfFits,
}

/// Noise levels inferred from projected-gradient fits of the data.
#[derive(Debug, Clone)]
pub struct EmpiricalNoise {
    /// Residual variance ‖X - AW‖²_F / (DN).
    pub sigma2: f64,
    /// Largest absolute residual entry over all restarts.
    pub eps: f64,
}

/// Runs `n_restarts` solver fits with derived seeds `seed + i`.
pub fn lin_restarts(
    x: &DMatrix<f64>,
    r: usize,
    n_restarts: usize,
    seed: u64,
    opts: &LinOptions,
) -> Result<Vec<LinFit>> {
    if n_restarts == 0 {
        return Err(Error::InvalidArgument("need at least one restart".into()));
    }
    (0..n_restarts)
        .map(|i| lin_pg_nmf(x, r, Init::Random { seed: seed.wrapping_add(i as u64) }, opts))
        .collect()
}

/// Estimates observation-noise scales from repeated solver runs: the
/// Gaussian variance from one designated fit (first by default) and the
/// uniform half-width as the largest absolute residual over every restart.
pub fn empirical_noise(
    x: &DMatrix<f64>,
    r: usize,
    n_restarts: usize,
    seed: u64,
    source: SigmaSource,
) -> Result<EmpiricalNoise> {
    let fits = lin_restarts(x, r, n_restarts, seed, &LinOptions::default())?;
    Ok(empirical_noise_from_fits(x, &fits, source))
}

/// Same as [`empirical_noise`] but reusing already-computed fits.
pub fn empirical_noise_from_fits(
    x: &DMatrix<f64>,
    fits: &[LinFit],
    source: SigmaSource,
) -> EmpiricalNoise {
    let dn = (x.nrows() * x.ncols()) as f64;
    let sigma2 = match source {
        SigmaSource::FirstFit => fits[0].squared_error() / dn,
        SigmaSource::BestFit => {
            fits.iter().map(LinFit::squared_error).fold(f64::INFINITY, f64::min) / dn
        }
        SigmaSource::MeanOfFits => {
            fits.iter().map(|f| f.squared_error() / dn).sum::<f64>() / fits.len() as f64
        }
    };
    let eps = fits
        .iter()
        .map(|f| {
            let resid = x - f.factorization.product();
            resid.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
        })
        .fold(0.0f64, f64::max);
    EmpiricalNoise { sigma2, eps }
}
