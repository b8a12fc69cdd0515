//! Newton-CG maximizer shared by the variational fitting routines.
//!
//! Outer iterations build a Newton direction by running conjugate gradients
//! on the (negated) Hessian, with Hessian-vector products formed by central
//! finite differences of the analytic gradient — no explicit Hessian is ever
//! materialized. A backtracking line search guards each step, rejecting
//! non-finite excursions (which is how hard feasibility walls in the
//! objective are respected), and the outer loop stops when the objective
//! change drops below an absolute threshold.

use nalgebra::DVector;

/// Options for [`maximize`].
#[derive(Debug, Clone)]
pub struct NewtonCgOptions {
    /// Stop when the absolute objective change between outer iterations
    /// falls below this.
    pub tol: f64,
    /// Cap on outer Newton iterations.
    pub max_iter: usize,
    /// CG iterations are capped at `cg_cap_factor * dim`.
    pub cg_cap_factor: usize,
    /// Finite-difference step for Hessian-vector products is
    /// `fd_step_scale * (1 + ‖x‖)` along the unit direction.
    pub fd_step_scale: f64,
}

impl Default for NewtonCgOptions {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 200, cg_cap_factor: 10, fd_step_scale: 1e-5 }
    }
}

/// Outcome of a [`maximize`] run.
#[derive(Debug, Clone)]
pub struct NewtonCgResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// True when the stopping rule (small objective change or zero
    /// gradient) fired before the iteration cap.
    pub converged: bool,
}

const LS_SHRINK: f64 = 0.5;
const LS_C1: f64 = 1e-4;
const LS_MAX_TRIALS: usize = 40;

/// Maximizes `objective` (returning value and gradient) from `x0`.
///
/// The objective may return `-inf` (infeasible regions); the line search
/// backtracks away from such points, and `x0` itself must be finite-valued.
pub fn maximize<F>(
    mut objective: F,
    x0: DVector<f64>,
    opts: &NewtonCgOptions,
) -> NewtonCgResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let dim = x0.len();
    let mut x = x0;
    let (mut value, mut grad) = objective(&x);
    debug_assert!(value.is_finite(), "starting point must be feasible");
    let cg_cap = (opts.cg_cap_factor * dim).max(1);

    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let gnorm = grad.norm();
        if gnorm == 0.0 || !gnorm.is_finite() {
            converged = gnorm == 0.0;
            break;
        }

        // --- CG on the Newton system (-H)p = g (so p is an ascent step).
        let fd_h = opts.fd_step_scale * (1.0 + x.norm());
        let mut hvp = |v: &DVector<f64>| -> DVector<f64> {
            let vnorm = v.norm();
            if vnorm == 0.0 {
                return DVector::zeros(dim);
            }
            let unit = v / vnorm;
            let (_, gp) = objective(&(&x + &unit * fd_h));
            let (_, gm) = objective(&(&x - &unit * fd_h));
            // H·v ≈ (∇f(x+hu) - ∇f(x-hu))/(2h) · ‖v‖
            (gp - gm) * (vnorm / (2.0 * fd_h))
        };

        let cg_tol = gnorm * gnorm.sqrt().min(0.5);
        let mut p = DVector::zeros(dim);
        let mut residual = grad.clone(); // residual of (-H)p = g at p = 0
        let mut direction = residual.clone();
        for _ in 0..cg_cap {
            if residual.norm() <= cg_tol {
                break;
            }
            let hd = hvp(&direction);
            if hd.iter().any(|v| !v.is_finite()) {
                break;
            }
            let curvature = -direction.dot(&hd); // dᵀ(-H)d
            if curvature <= 0.0 {
                // Negative curvature: fall back to steepest ascent if CG
                // has made no progress yet, otherwise keep the partial step.
                if p.norm() == 0.0 {
                    p = grad.clone();
                }
                break;
            }
            let rs = residual.norm_squared();
            let alpha = rs / curvature;
            p += &direction * alpha;
            residual += hd * alpha; // r ← r - α(-H)d = r + αHd
            let beta = residual.norm_squared() / rs;
            direction = &residual + &direction * beta;
        }
        if p.norm() == 0.0 {
            p = grad.clone();
        }

        // --- Backtracking line search along p (Armijo, ascent version).
        let slope = grad.dot(&p);
        let (p, slope) = if slope <= 0.0 { (grad.clone(), gnorm * gnorm) } else { (p, slope) };
        let mut t = 1.0;
        let mut advanced = false;
        for _ in 0..LS_MAX_TRIALS {
            let candidate = &x + &p * t;
            let (cand_value, cand_grad) = objective(&candidate);
            if cand_value.is_finite() && cand_value >= value + LS_C1 * t * slope {
                let delta = cand_value - value;
                x = candidate;
                value = cand_value;
                grad = cand_grad;
                advanced = true;
                iterations += 1;
                if delta.abs() < opts.tol {
                    converged = true;
                }
                break;
            }
            t *= LS_SHRINK;
        }
        if !advanced {
            // No acceptable step in this direction: treat as converged to
            // numerical precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    NewtonCgResult { x, value, iterations, converged }
}
