//! Posterior samplers: truncated-normal draws, Gibbs sweeps, and Hamiltonian
//! Monte Carlo on the non-negative orthant.
//!
//! The Gibbs sampler exploits that, under the Gaussian likelihood with
//! exponential priors, each factor entry has a closed-form conditional: a
//! normal truncated to `[0, ∞)` with
//!
//! ```text
//! mean = (Σ w·r⁽⁻⁾ - σ²λ) / Σ w²,   var = σ² / Σ w²
//! ```
//!
//! where `r⁽⁻⁾` is the residual with the entry's own contribution removed.
//! When the denominator vanishes (an all-zero partner column) the likelihood
//! is flat in that entry and the conditional falls back to the exponential
//! prior.
//!
//! HMC treats the non-negativity constraint by reflection: a leapfrog
//! position crossing zero is mirrored back with its momentum negated, which
//! preserves the Hamiltonian and keeps the proposal measure symmetric. Under
//! the uniform likelihood the interior log density is piecewise constant, so
//! the dynamics follow the prior gradient alone and the feasibility box acts
//! as a hard wall through the accept test. The step size adapts by a
//! Robbins–Monro recursion on its logarithm toward a target acceptance rate
//! during a warm-up phase, then stays frozen.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{grad_log_joint, log_joint, Factorization, Likelihood, ModelSpec};

/// Standardized lower bound beyond which the inverse-CDF method loses
/// precision and tail rejection sampling takes over.
const TAIL_THRESHOLD: f64 = 4.0;

/// Draws from `N(mean, var)` conditioned on the result being non-negative.
///
/// Uses the inverse CDF for bulk cases and an exponential-proposal rejection
/// sampler when the truncation point sits deep in the upper tail
/// (standardized bound above [`TAIL_THRESHOLD`]).
pub fn sample_truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> Result<f64> {
    if !(var > 0.0 && var.is_finite()) || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "truncated normal needs finite mean and positive variance, got ({mean}, {var})"
        )));
    }
    let sigma = var.sqrt();
    let alpha = -mean / sigma; // standardized truncation point
    let z = if alpha <= TAIL_THRESHOLD {
        let std_norm = Normal::new(0.0, 1.0).unwrap();
        // Map U(0,1) onto the upper tail mass Φ(-α) through the complement
        // so the quantile is evaluated where it is well conditioned.
        let tail = std_norm.cdf(-alpha);
        let u: f64 = rng.gen();
        let q = ((1.0 - u) * tail).max(f64::MIN_POSITIVE);
        -std_norm.inverse_cdf(q)
    } else {
        // Exponential-proposal rejection for z ≥ α with the classic optimal
        // rate (α + sqrt(α² + 4)) / 2.
        let rate = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        let exp = Exp::new(rate).unwrap();
        loop {
            let z = alpha + exp.sample(rng);
            let d = z - rate;
            if rng.gen::<f64>() < (-0.5 * d * d).exp() {
                break z;
            }
        }
    };
    Ok((mean + sigma * z).max(0.0))
}

/// Conditional mean and variance of one factor entry given everything else:
/// `denom` is the partner's squared norm, `dot` the partner-weighted
/// residual including the entry's own contribution.
fn conditional_mean_var(dot: f64, denom: f64, sigma2: f64, lambda: f64) -> (f64, f64) {
    ((dot - sigma2 * lambda) / denom, sigma2 / denom)
}

/// A Gibbs chain over both factors under the Gaussian likelihood.
pub struct GibbsChain<'a> {
    x: &'a DMatrix<f64>,
    spec: &'a ModelSpec,
    sigma2: f64,
    a: DMatrix<f64>,
    w: DMatrix<f64>,
    /// Maintained incrementally: `X - AW`.
    resid: DMatrix<f64>,
    rng: ChaCha8Rng,
    sweeps_done: usize,
}

impl<'a> GibbsChain<'a> {
    pub fn new(
        x: &'a DMatrix<f64>,
        spec: &'a ModelSpec,
        init: Factorization,
        seed: u64,
    ) -> Result<Self> {
        let sigma2 = match spec.likelihood {
            Likelihood::Gaussian { sigma2 } => sigma2,
            Likelihood::Uniform { .. } => {
                return Err(Error::InvalidArgument(
                    "Gibbs conditionals exist only for the Gaussian likelihood".into(),
                ))
            }
        };
        if x.shape() != (spec.d, spec.n) {
            return Err(Error::DimensionMismatch(format!(
                "data must be {}x{}, got {:?}",
                spec.d,
                spec.n,
                x.shape()
            )));
        }
        if init.a.shape() != (spec.d, spec.r) || init.w.shape() != (spec.r, spec.n) {
            return Err(Error::DimensionMismatch("initial factor shapes mismatch".into()));
        }
        let resid = x - init.product();
        Ok(Self {
            x,
            spec,
            sigma2,
            a: init.a,
            w: init.w,
            resid,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sweeps_done: 0,
        })
    }

    /// One full systematic scan: every entry of `A` in column-major order,
    /// then every entry of `W` in row-major order.
    pub fn sweep(&mut self) -> Result<()> {
        let (d_rows, n_cols, r) = (self.spec.d, self.spec.n, self.spec.r);

        for k in 0..r {
            let denom: f64 = self.w.row(k).norm_squared();
            for d in 0..d_rows {
                let old = self.a[(d, k)];
                let new = if denom == 0.0 {
                    // Flat likelihood in this entry: sample the prior.
                    Exp::new(self.spec.lambda_a[(d, k)]).unwrap().sample(&mut self.rng)
                } else {
                    let mut dot = old * denom;
                    for n in 0..n_cols {
                        dot += self.w[(k, n)] * self.resid[(d, n)];
                    }
                    let (mean, var) = conditional_mean_var(
                        dot,
                        denom,
                        self.sigma2,
                        self.spec.lambda_a[(d, k)],
                    );
                    sample_truncated_normal(&mut self.rng, mean, var)?
                };
                let delta = new - old;
                if delta != 0.0 {
                    self.a[(d, k)] = new;
                    for n in 0..n_cols {
                        self.resid[(d, n)] -= delta * self.w[(k, n)];
                    }
                }
            }
        }

        for k in 0..r {
            let denom: f64 = self.a.column(k).norm_squared();
            for n in 0..n_cols {
                let old = self.w[(k, n)];
                let new = if denom == 0.0 {
                    Exp::new(self.spec.lambda_w[(k, n)]).unwrap().sample(&mut self.rng)
                } else {
                    let mut dot = old * denom;
                    for d in 0..d_rows {
                        dot += self.a[(d, k)] * self.resid[(d, n)];
                    }
                    let (mean, var) = conditional_mean_var(
                        dot,
                        denom,
                        self.sigma2,
                        self.spec.lambda_w[(k, n)],
                    );
                    sample_truncated_normal(&mut self.rng, mean, var)?
                };
                let delta = new - old;
                if delta != 0.0 {
                    self.w[(k, n)] = new;
                    for d in 0..d_rows {
                        self.resid[(d, n)] -= delta * self.a[(d, k)];
                    }
                }
            }
        }

        self.sweeps_done += 1;
        Ok(())
    }

    /// Runs `sweeps` scans, handing the state to `sink` after each one.
    pub fn run(
        &mut self,
        sweeps: usize,
        mut sink: impl FnMut(&DMatrix<f64>, &DMatrix<f64>),
    ) -> Result<()> {
        for _ in 0..sweeps {
            self.sweep()?;
            sink(&self.a, &self.w);
        }
        Ok(())
    }

    pub fn factorization(&self) -> Factorization {
        Factorization { a: self.a.clone(), w: self.w.clone() }
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps_done
    }

    /// Drift-free residual check: `‖(X - AW) - resid‖`.
    pub fn residual_drift(&self) -> f64 {
        ((self.x - &self.a * &self.w) - &self.resid).norm()
    }
}

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo
// ---------------------------------------------------------------------------

/// Options for [`hmc_run`].
#[derive(Debug, Clone)]
pub struct HmcOptions {
    /// Leapfrog steps per proposal.
    pub leapfrog_steps: usize,
    /// Initial step size (adapted during warm-up).
    pub step_init: f64,
    /// Robbins–Monro acceptance target.
    pub target_accept: f64,
    /// Fraction of iterations spent adapting (no samples emitted).
    pub warmup_fraction: f64,
    /// Robbins–Monro gain constant (decays as t^-0.6).
    pub adapt_rate: f64,
}

impl Default for HmcOptions {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            step_init: 0.05,
            target_accept: 0.65,
            warmup_fraction: 0.1,
            adapt_rate: 0.2,
        }
    }
}

/// Summary of an HMC run.
#[derive(Debug, Clone)]
pub struct HmcReport {
    /// Fraction of accepted proposals after warm-up.
    pub acceptance_rate: f64,
    /// Step size after adaptation froze.
    pub step_size: f64,
    pub samples_emitted: usize,
    pub warmup_iters: usize,
}

/// Runs HMC on the flattened parameters with identity mass matrix and
/// reflection at zero. Every post-warm-up state (accepted or not) is handed
/// to `sink`.
pub fn hmc_run(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    init: &Factorization,
    total_iters: usize,
    opts: &HmcOptions,
    seed: u64,
    mut sink: impl FnMut(&DVector<f64>),
) -> Result<HmcReport> {
    if opts.leapfrog_steps == 0 {
        return Err(Error::InvalidArgument("need at least one leapfrog step".into()));
    }
    if !(opts.step_init > 0.0 && opts.step_init.is_finite()) {
        return Err(Error::InvalidArgument("step size must be positive".into()));
    }
    let layout = spec.layout();
    let mut theta = layout.encode(init);
    let mut log_p = log_joint(x, &layout.decode(&theta)?, spec)?;
    if log_p == f64::NEG_INFINITY {
        return Err(Error::Infeasible("HMC must start from a feasible point".into()));
    }

    // Under the uniform likelihood the interior gradient is the constant
    // prior slope; feasibility enters only through the accept test.
    let uniform_grad: Option<DVector<f64>> = match spec.likelihood {
        Likelihood::Uniform { .. } => {
            let ga = -&spec.lambda_a;
            let gw = -&spec.lambda_w;
            Some(layout.encode(&Factorization { a: ga, w: gw }))
        }
        Likelihood::Gaussian { .. } => None,
    };
    let grad_at = |theta: &DVector<f64>| -> Result<DVector<f64>> {
        match &uniform_grad {
            Some(g) => Ok(g.clone()),
            None => {
                let f = layout.decode(theta)?;
                let (ga, gw) = grad_log_joint(x, &f, spec)?;
                Ok(layout.encode(&Factorization { a: ga, w: gw }))
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warmup = ((total_iters as f64) * opts.warmup_fraction).ceil() as usize;
    let mut log_step = opts.step_init.ln();
    let mut accepted_post = 0usize;
    let mut post_iters = 0usize;
    let mut emitted = 0usize;
    let dim = theta.len();

    for t in 1..=total_iters {
        let step = log_step.exp();
        let p0: DVector<f64> =
            DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h0 = -log_p + 0.5 * p0.norm_squared();

        let mut q = theta.clone();
        let mut p = p0;
        let mut g = grad_at(&q)?;
        p += &g * (0.5 * step);
        // A trajectory that overflows to non-finite coordinates is a
        // divergence: reject it outright rather than evaluating the target.
        let mut diverged = false;
        for l in 0..opts.leapfrog_steps {
            q += &p * step;
            // Reflect at the boundary: mirror position, negate momentum.
            for i in 0..dim {
                if q[i] < 0.0 {
                    q[i] = -q[i];
                    p[i] = -p[i];
                }
            }
            if q.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            g = grad_at(&q)?;
            if l + 1 < opts.leapfrog_steps {
                p += &g * step;
            }
        }
        let log_p_new = if diverged {
            f64::NEG_INFINITY
        } else {
            p += &g * (0.5 * step);
            log_joint(x, &layout.decode(&q)?, spec)?
        };
        let h1 = if log_p_new == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            -log_p_new + 0.5 * p.norm_squared()
        };
        let accept_prob = if h1.is_finite() { (h0 - h1).exp().min(1.0) } else { 0.0 };
        let accepted = rng.gen::<f64>() < accept_prob;
        if accepted {
            theta = q;
            log_p = log_p_new;
        }

        if t <= warmup {
            let gain = opts.adapt_rate / (t as f64).powf(0.6);
            log_step += gain * (accept_prob - opts.target_accept);
        } else {
            post_iters += 1;
            if accepted {
                accepted_post += 1;
            }
            sink(&theta);
            emitted += 1;
        }
    }

    Ok(HmcReport {
        acceptance_rate: if post_iters > 0 {
            accepted_post as f64 / post_iters as f64
        } else {
            0.0
        },
        step_size: log_step.exp(),
        samples_emitted: emitted,
        warmup_iters: warmup,
    })
}
