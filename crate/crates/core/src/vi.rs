//! Variational posteriors: isotropic mixture-of-Gaussians fits.
//!
//! The variational family is a weighted mixture of isotropic Gaussians over
//! the flattened parameter vector,
//! `q(θ) = Σ_m w_m N(θ; μ_m, σ_m² I)`. Two approximations make the evidence
//! lower bound tractable:
//!
//! * the mixture entropy is replaced by its pairwise-convolution lower bound
//!   `H[q] ≥ -Σ_m w_m ln Σ_j w_j N(μ_m; μ_j, (σ_m²+σ_j²) I)`, tight for a
//!   single component up to the constant `(d/2)·ln(e/2)`;
//! * the expected log joint is expanded to second order around each mean:
//!   `E_q[f] ≈ Σ_m w_m (f(μ_m) + σ_m²/2 · Tr H_f(μ_m))`.
//!
//! Batch fits ([`nvi_fit`]) optimize all means and variances jointly with
//! fixed uniform weights. The online protocol ([`OnviState`]) grows the
//! mixture one proposal at a time: existing components stay frozen, the
//! newcomer's variance and weight are optimized (previous weights scale by
//! `1 - w_new`), and acceptance requires a minimum bound improvement — a
//! plain threshold under the Gaussian likelihood, an entropy-based one under
//! the uniform likelihood where the bound is insensitive to good duplicates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{
    grad_log_joint, hessian_trace, log_joint, Factorization, Likelihood, ModelSpec, ParamLayout,
};
use crate::opt::{maximize, NewtonCgOptions};

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mu: DVector<f64>,
    pub sigma2: f64,
    pub weight: f64,
}

/// A weighted mixture of isotropic Gaussians over the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub components: Vec<MixtureComponent>,
    pub layout: ParamLayout,
}

/// Weights must sum to one within this slack.
const WEIGHT_SUM_TOL: f64 = 1e-9;

impl Mixture {
    /// Validates dimensions, positive variances, non-negative weights
    /// summing to one. Fitted mixtures keep weights strictly positive;
    /// zero weights are tolerated so hypothetical components can be priced.
    pub fn new(components: Vec<MixtureComponent>, layout: ParamLayout) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        let mut total = 0.0;
        for (m, c) in components.iter().enumerate() {
            if c.mu.len() != layout.len() {
                return Err(Error::DimensionMismatch(format!(
                    "component {m} has dim {}, layout wants {}",
                    c.mu.len(),
                    layout.len()
                )));
            }
            if !(c.sigma2 > 0.0 && c.sigma2.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "component {m} has non-positive variance {}",
                    c.sigma2
                )));
            }
            if !(c.weight >= 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "component {m} has weight {} outside [0,1]",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { components, layout })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Dimension of the parameter space.
    pub fn dim(&self) -> usize {
        self.layout.len()
    }
}

// ---------------------------------------------------------------------------
// Entropy lower bound
// ---------------------------------------------------------------------------

/// Log density of an isotropic Gaussian at squared distance `r2`.
fn log_gauss_isotropic(r2: f64, variance: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * variance).ln() - r2 / (2.0 * variance)
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// The pairwise-convolution entropy lower bound
/// `-Σ_m w_m ln Σ_j w_j N(μ_m; μ_j, (σ_m²+σ_j²)I)`,
/// evaluated with log-sum-exp for stability.
pub fn entropy_lower_bound(mix: &Mixture) -> f64 {
    let d = mix.dim();
    let m_count = mix.len();
    let mut h = 0.0;
    let mut terms = Vec::with_capacity(m_count);
    for (m, cm) in mix.components.iter().enumerate() {
        if cm.weight == 0.0 {
            continue;
        }
        terms.clear();
        for (j, cj) in mix.components.iter().enumerate() {
            if cj.weight == 0.0 {
                continue;
            }
            let r2 = if m == j { 0.0 } else { (&cm.mu - &cj.mu).norm_squared() };
            let v = cm.sigma2 + cj.sigma2;
            terms.push(cj.weight.ln() + log_gauss_isotropic(r2, v, d));
        }
        h -= cm.weight * log_sum_exp(&terms);
    }
    h
}

// ---------------------------------------------------------------------------
// Second-order expectations and the bound itself
// ---------------------------------------------------------------------------

/// Second-order approximation of `E_q[f]` for an arbitrary test function:
/// `Σ_m w_m (f(μ_m) + σ_m²/2 · trace(μ_m))`. Returns `-inf` as soon as any
/// positive-weight component mean is scored `-inf`.
pub fn second_order_expectation<F, T>(mix: &Mixture, mut f: F, mut trace: T) -> f64
where
    F: FnMut(&DVector<f64>) -> f64,
    T: FnMut(&DVector<f64>) -> f64,
{
    let mut acc = 0.0;
    for c in &mix.components {
        if c.weight == 0.0 {
            continue;
        }
        let value = f(&c.mu);
        if value == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        acc += c.weight * (value + 0.5 * c.sigma2 * trace(&c.mu));
    }
    acc
}

/// `E_q[log p(X, θ)]` under the second-order expansion. Gaussian models use
/// the analytic likelihood Hessian trace; the uniform likelihood carries no
/// curvature, so only the means contribute (every positive-weight mean must
/// decode to a feasible factorization, otherwise the result is `-inf`).
pub fn expected_log_joint(mix: &Mixture, x: &DMatrix<f64>, spec: &ModelSpec) -> Result<f64> {
    if mix.layout != spec.layout() {
        return Err(Error::DimensionMismatch("mixture layout does not match model".into()));
    }
    let err = std::cell::RefCell::new(None);
    let out = second_order_expectation(
        mix,
        |mu| match mix.layout.decode(mu).and_then(|f| log_joint(x, &f, spec)) {
            Ok(v) => v,
            Err(e) => {
                *err.borrow_mut() = Some(e);
                f64::NEG_INFINITY
            }
        },
        |mu| match spec.likelihood {
            Likelihood::Gaussian { .. } => {
                match mix.layout.decode(mu).and_then(|f| hessian_trace(&f, spec)) {
                    Ok(t) => t,
                    Err(e) => {
                        *err.borrow_mut() = Some(e);
                        0.0
                    }
                }
            }
            Likelihood::Uniform { .. } => 0.0,
        },
    );
    match err.into_inner() {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// The evidence lower bound `H[q] + E_q[log p(X, θ)]` under both
/// approximations. `-inf` when the expectation is `-inf`.
pub fn elbo(mix: &Mixture, x: &DMatrix<f64>, spec: &ModelSpec) -> Result<f64> {
    Ok(entropy_lower_bound(mix) + expected_log_joint(mix, x, spec)?)
}

// ---------------------------------------------------------------------------
// Entropy value + gradients (shared by the optimizers)
// ---------------------------------------------------------------------------

struct EntropyEval {
    value: f64,
    /// d/dμ_k, one column per component.
    grad_mu: DMatrix<f64>,
    /// d/dσ_k².
    grad_sigma2: DVector<f64>,
    /// d/dw_k. The fit optimizers hold weights fixed; kept for completeness
    /// and exercised by the finite-difference tests.
    #[allow(dead_code)]
    grad_weight: DVector<f64>,
}

/// Evaluates the entropy bound and all its partial derivatives. Components
/// with zero weight contribute nothing but still receive the gradient of
/// the outer `w ln S` term so weight optimization can move off zero.
fn entropy_eval(mus: &[DVector<f64>], sigma2s: &[f64], weights: &[f64]) -> EntropyEval {
    let m_count = mus.len();
    let d = mus[0].len();

    // Pairwise squared distances and convolved log densities.
    let mut r2 = vec![0.0; m_count * m_count];
    let mut logn = vec![0.0; m_count * m_count];
    for m in 0..m_count {
        for j in 0..=m {
            let rr = if m == j { 0.0 } else { (&mus[m] - &mus[j]).norm_squared() };
            let v = sigma2s[m] + sigma2s[j];
            let ln = log_gauss_isotropic(rr, v, d);
            r2[m * m_count + j] = rr;
            r2[j * m_count + m] = rr;
            logn[m * m_count + j] = ln;
            logn[j * m_count + m] = ln;
        }
    }

    // ln S_m via log-sum-exp over positive-weight j.
    let mut ln_s = vec![f64::NEG_INFINITY; m_count];
    let mut terms = Vec::with_capacity(m_count);
    for m in 0..m_count {
        terms.clear();
        for j in 0..m_count {
            if weights[j] > 0.0 {
                terms.push(weights[j].ln() + logn[m * m_count + j]);
            }
        }
        ln_s[m] = log_sum_exp(&terms);
    }

    let mut value = 0.0;
    for m in 0..m_count {
        if weights[m] > 0.0 {
            value -= weights[m] * ln_s[m];
        }
    }

    // Responsibilities ρ_mj = w_j N_mj / S_m.
    let rho = |m: usize, j: usize| -> f64 {
        if weights[j] == 0.0 {
            0.0
        } else {
            (weights[j].ln() + logn[m * m_count + j] - ln_s[m]).exp()
        }
    };

    let mut grad_mu = DMatrix::zeros(d, m_count);
    let mut grad_sigma2 = DVector::zeros(m_count);
    let mut grad_weight = DVector::zeros(m_count);

    for k in 0..m_count {
        // ∂H/∂μ_k = Σ_{j≠k} (μ_k-μ_j)/v_kj · (w_k ρ_kj + w_j ρ_jk)
        // ∂H/∂σ_k² = -Σ_j (w_k ρ_kj + w_j ρ_jk) · c_kj,
        //   c_kj = r²/(2v²) - d/(2v),  (j = k term counted once here, which
        //   matches the doubled ∂v_kk/∂σ_k² = 2)
        let mut gmu = DVector::zeros(d);
        let mut gs2 = 0.0;
        for j in 0..m_count {
            let coupling = weights[k] * rho(k, j) + weights[j] * rho(j, k);
            if coupling == 0.0 {
                continue;
            }
            let v = sigma2s[k] + sigma2s[j];
            let c = r2[k * m_count + j] / (2.0 * v * v) - d as f64 / (2.0 * v);
            gs2 -= coupling * c;
            if j != k {
                gmu += (&mus[k] - &mus[j]) * (coupling / v);
            }
        }
        grad_mu.column_mut(k).copy_from(&gmu);
        grad_sigma2[k] = gs2;

        // ∂H/∂w_k = -ln S_k - Σ_m w_m N_mk / S_m.
        let mut wsum = 0.0;
        for m in 0..m_count {
            if weights[m] > 0.0 {
                wsum += weights[m] * (logn[m * m_count + k] - ln_s[m]).exp();
            }
        }
        grad_weight[k] = -ln_s[k] - wsum;
    }

    EntropyEval { value, grad_mu, grad_sigma2, grad_weight }
}

// ---------------------------------------------------------------------------
// Per-component expectation objectives
// ---------------------------------------------------------------------------

/// Value and derivatives of one component's expected-log-joint contribution
/// `f(μ) + (σ²/2)·Tr H(μ)` (plus any variance-coupling surrogate).
struct ComponentEval {
    value: f64,
    grad_mu: DVector<f64>,
    dvalue_dsigma2: f64,
}

/// What the optimizers differentiate per component. Implementations must
/// return `-inf` values (with arbitrary gradients) outside hard walls.
trait ComponentObjective {
    fn dim(&self) -> usize;
    fn eval(&self, mu: &DVector<f64>, sigma2: f64) -> ComponentEval;
    /// The contribution reported by the public bound (identical to `eval`
    /// for the Gaussian model; drops the variance surrogate for uniform).
    fn eval_reported(&self, mu: &DVector<f64>, sigma2: f64) -> f64;
}

/// Clip-aware encoding of the model gradient: coordinates clipped to zero by
/// the decoder do not move the decoded point, so their gradient is zero.
fn masked_model_grad(
    layout: &ParamLayout,
    mu: &DVector<f64>,
    ga: &DMatrix<f64>,
    gw: &DMatrix<f64>,
) -> DVector<f64> {
    let mut g = layout.encode(&Factorization { a: ga.clone(), w: gw.clone() });
    for (gi, &mi) in g.iter_mut().zip(mu.iter()) {
        if mi <= 0.0 {
            *gi = 0.0;
        }
    }
    g
}

/// Gaussian-likelihood objective: the second-order expansion is used as-is.
struct GaussianObjective<'a> {
    x: &'a DMatrix<f64>,
    spec: &'a ModelSpec,
    layout: ParamLayout,
    sigma2_x: f64,
}

impl ComponentObjective for GaussianObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn eval(&self, mu: &DVector<f64>, sigma2: f64) -> ComponentEval {
        let f = self.layout.decode(mu).expect("layout checked at entry");
        let value = log_joint(self.x, &f, self.spec).expect("validated");
        let trace = hessian_trace(&f, self.spec).expect("gaussian");
        let (ga, gw) = grad_log_joint(self.x, &f, self.spec).expect("validated");

        // ∇ trace = -(2N·A, 2D·W)/σ_x², clip-masked like the model gradient.
        let (d, n) = (self.spec.d as f64, self.spec.n as f64);
        let ta = &f.a * (-2.0 * n / self.sigma2_x);
        let tw = &f.w * (-2.0 * d / self.sigma2_x);

        let mut grad_mu = masked_model_grad(&self.layout, mu, &ga, &gw);
        grad_mu += masked_model_grad(&self.layout, mu, &ta, &tw) * (0.5 * sigma2);

        ComponentEval { value: value + 0.5 * sigma2 * trace, grad_mu, dvalue_dsigma2: 0.5 * trace }
    }

    fn eval_reported(&self, mu: &DVector<f64>, sigma2: f64) -> f64 {
        self.eval(mu, sigma2).value
    }
}

/// Uniform-likelihood objective. The second-order expansion sees no
/// curvature from a flat likelihood, which leaves the variance with nothing
/// to push against except the entropy term (which grows without bound). The
/// fitting objective therefore adds the log probability that a Gaussian
/// perturbation of the parameters keeps every residual inside the interval,
/// each residual linearized around the mean:
///
/// ```text
/// S(μ, σ²) = Σ_{d,n} ln P( |N(r_dn, σ²·g_dn²)| < ε ),
/// g_dn² = ‖A_{d,·}‖² + ‖W_{·,n}‖²
/// ```
///
/// `S → 0` as σ → 0, so the reported bound (which omits the surrogate) is
/// approached from below, and `S → -inf` as σ grows, giving the variance a
/// finite optimum that reflects the feasibility slack.
struct UniformObjective<'a> {
    x: &'a DMatrix<f64>,
    spec: &'a ModelSpec,
    layout: ParamLayout,
    eps: f64,
}

impl UniformObjective<'_> {
    /// ln P(lo < N(r, s²) < hi) for the symmetric interval (-ε, ε), plus
    /// its partial derivatives in `r` and `s`. `s = 0` means the point mass:
    /// probability one for feasible `r` (the caller guarantees |r| < ε).
    fn log_interval_prob(&self, r: f64, s: f64) -> (f64, f64, f64) {
        if s == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let std_norm = Normal::new(0.0, 1.0).unwrap();
        let a = (self.eps - r) / s;
        let b = (-self.eps - r) / s;
        // Evaluate in whichever tail keeps the difference well-conditioned.
        let p = if a + b > 0.0 {
            std_norm.cdf(-b) - std_norm.cdf(-a)
        } else {
            std_norm.cdf(a) - std_norm.cdf(b)
        };
        if p <= 0.0 || p.is_nan() {
            return (f64::NEG_INFINITY, 0.0, 0.0);
        }
        let pa = std_norm.pdf(a);
        let pb = std_norm.pdf(b);
        let dr = (pb - pa) / (s * p);
        let ds = (pb * b - pa * a) / (s * p);
        (p.ln(), dr, ds)
    }
}

impl ComponentObjective for UniformObjective<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn eval(&self, mu: &DVector<f64>, sigma2: f64) -> ComponentEval {
        let fac = self.layout.decode(mu).expect("layout checked at entry");
        let value = log_joint(self.x, &fac, self.spec).expect("validated");
        if value == f64::NEG_INFINITY {
            return ComponentEval {
                value,
                grad_mu: DVector::zeros(self.dim()),
                dvalue_dsigma2: 0.0,
            };
        }
        let (ga, gw) = grad_log_joint(self.x, &fac, self.spec).expect("feasible");
        let mut grad_mu = masked_model_grad(&self.layout, mu, &ga, &gw);

        // Sensitivity scales: g²_dn = ‖A row d‖² + ‖W col n‖².
        let sigma = sigma2.sqrt();
        let (d, n) = (self.spec.d, self.spec.n);
        let row_a: Vec<f64> = (0..d).map(|i| fac.a.row(i).norm_squared()).collect();
        let col_w: Vec<f64> = (0..n).map(|j| fac.w.column(j).norm_squared()).collect();
        let resid = self.x - fac.product();

        let mut s_total = 0.0;
        let mut ds_dsigma = 0.0;
        let mut ds_da = DMatrix::zeros(d, self.spec.r);
        let mut ds_dw = DMatrix::zeros(self.spec.r, n);
        for i in 0..d {
            for j in 0..n {
                let g2 = row_a[i] + col_w[j];
                let g = g2.sqrt();
                let (lp, dlp_dr, dlp_ds) = self.log_interval_prob(resid[(i, j)], sigma * g);
                if lp == f64::NEG_INFINITY {
                    return ComponentEval {
                        value: f64::NEG_INFINITY,
                        grad_mu: DVector::zeros(self.dim()),
                        dvalue_dsigma2: 0.0,
                    };
                }
                s_total += lp;
                ds_dsigma += dlp_ds * g;
                // r_dn = x - Σ_k A_dk W_kj: ∂r/∂A_dk = -W_kj, ∂r/∂W_kj = -A_dk.
                // s_dn = σ·g_dn: ∂g/∂A_dk = A_dk/g (for all n in row d).
                for k in 0..self.spec.r {
                    ds_da[(i, k)] += -dlp_dr * fac.w[(k, j)];
                    ds_dw[(k, j)] += -dlp_dr * fac.a[(i, k)];
                    if g > 0.0 {
                        ds_da[(i, k)] += dlp_ds * sigma * fac.a[(i, k)] / g;
                        ds_dw[(k, j)] += dlp_ds * sigma * fac.w[(k, j)] / g;
                    }
                }
            }
        }
        grad_mu += masked_model_grad(&self.layout, mu, &ds_da, &ds_dw);
        // ∂/∂σ² = ∂/∂σ · 1/(2σ).
        let dvalue_dsigma2 = if sigma > 0.0 { ds_dsigma / (2.0 * sigma) } else { 0.0 };
        ComponentEval { value: value + s_total, grad_mu, dvalue_dsigma2 }
    }

    fn eval_reported(&self, mu: &DVector<f64>, _sigma2: f64) -> f64 {
        let fac = self.layout.decode(mu).expect("layout checked at entry");
        log_joint(self.x, &fac, self.spec).expect("validated")
    }
}

fn objective_for<'a>(
    x: &'a DMatrix<f64>,
    spec: &'a ModelSpec,
) -> Box<dyn ComponentObjective + 'a> {
    match spec.likelihood {
        Likelihood::Gaussian { sigma2 } => Box::new(GaussianObjective {
            x,
            spec,
            layout: spec.layout(),
            sigma2_x: sigma2,
        }),
        Likelihood::Uniform { eps } => {
            Box::new(UniformObjective { x, spec, layout: spec.layout(), eps })
        }
    }
}

// ---------------------------------------------------------------------------
// Batch fit
// ---------------------------------------------------------------------------

/// Initialization of the batch fit.
#[derive(Debug, Clone)]
pub enum NviInit {
    /// Component means drawn like the solver's random factors: entries
    /// i.i.d. uniform (0,1] scaled by sqrt(mean(X)/R).
    Random { seed: u64 },
    /// All components start from one factorization (required feasible under
    /// the uniform likelihood).
    Replicated(Factorization),
    /// Explicit per-component starting factorizations.
    Points(Vec<Factorization>),
}

/// Options for [`nvi_fit`].
#[derive(Debug, Clone)]
pub struct NviOptions {
    /// Absolute bound-change stopping threshold of the joint optimizer.
    pub tol: f64,
    /// Outer Newton iteration cap.
    pub max_iter: usize,
}

impl Default for NviOptions {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 200 }
    }
}

/// A fitted batch mixture.
#[derive(Debug, Clone)]
pub struct NviFit {
    pub mixture: Mixture,
    /// The reported bound ([`elbo`]) at the fitted parameters.
    pub elbo: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits an M-component mixture with uniform weights `1/M` by jointly
/// optimizing every mean and log-variance with Newton-CG.
pub fn nvi_fit(
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    m: usize,
    init: NviInit,
    opts: &NviOptions,
) -> Result<NviFit> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    spec_checks(x, spec)?;
    let layout = spec.layout();
    let d = layout.len();

    let mus_init: Vec<DVector<f64>> = match init {
        NviInit::Random { seed } => {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scale = (x.mean() / spec.r as f64).max(0.0).sqrt();
            (0..m)
                .map(|_| DVector::from_fn(d, |_, _| (1.0 - rng.gen::<f64>()) * scale))
                .collect()
        }
        NviInit::Replicated(f) => {
            let mu = layout.encode(&f);
            vec![mu; m]
        }
        NviInit::Points(fs) => {
            if fs.len() != m {
                return Err(Error::InvalidArgument(format!(
                    "expected {m} starting points, got {}",
                    fs.len()
                )));
            }
            fs.iter().map(|f| layout.encode(f)).collect()
        }
    };

    let objective = objective_for(x, spec);
    // Every start must be finite-valued (feasible under uniform likelihood).
    for mu in &mus_init {
        let fac = layout.decode(mu)?;
        if log_joint(x, &fac, spec)? == f64::NEG_INFINITY {
            return Err(Error::Infeasible("infeasible starting point for the fit".into()));
        }
    }
    let sigma2_init: Vec<f64> =
        mus_init.iter().map(|mu| initial_sigma2(mu, spec, x)).collect();

    let weights = vec![1.0 / m as f64; m];

    // Pack [μ_1; ...; μ_M; ln σ_1²; ...; ln σ_M²].
    let mut z0 = DVector::zeros(m * d + m);
    for (k, mu) in mus_init.iter().enumerate() {
        z0.rows_mut(k * d, d).copy_from(mu);
    }
    for (k, s2) in sigma2_init.iter().enumerate() {
        z0[m * d + k] = s2.ln();
    }

    let obj_fn = |z: &DVector<f64>| -> (f64, DVector<f64>) {
        let mus: Vec<DVector<f64>> =
            (0..m).map(|k| DVector::from(z.rows(k * d, d).clone_owned())).collect();
        let sigma2s: Vec<f64> = (0..m).map(|k| z[m * d + k].exp()).collect();

        let mut value = 0.0;
        let mut grad = DVector::zeros(m * d + m);
        for k in 0..m {
            let eval = objective.eval(&mus[k], sigma2s[k]);
            if eval.value == f64::NEG_INFINITY {
                return (f64::NEG_INFINITY, grad);
            }
            value += weights[k] * eval.value;
            grad.rows_mut(k * d, d).copy_from(&(eval.grad_mu * weights[k]));
            grad[m * d + k] = weights[k] * eval.dvalue_dsigma2 * sigma2s[k];
        }
        let ent = entropy_eval(&mus, &sigma2s, &weights);
        value += ent.value;
        for k in 0..m {
            let mut rows = grad.rows_mut(k * d, d);
            rows += ent.grad_mu.column(k);
            grad[m * d + k] += ent.grad_sigma2[k] * sigma2s[k];
        }
        (value, grad)
    };

    let ncg = NewtonCgOptions { tol: opts.tol, max_iter: opts.max_iter, ..Default::default() };
    let result = maximize(obj_fn, z0, &ncg);

    let components: Vec<MixtureComponent> = (0..m)
        .map(|k| MixtureComponent {
            mu: DVector::from(result.x.rows(k * d, d).clone_owned()),
            sigma2: result.x[m * d + k].exp(),
            weight: weights[k],
        })
        .collect();
    let mixture = Mixture::new(components, layout)?;
    let bound = elbo(&mixture, x, spec)?;
    Ok(NviFit { mixture, elbo: bound, iterations: result.iterations, converged: result.converged })
}

fn spec_checks(x: &DMatrix<f64>, spec: &ModelSpec) -> Result<()> {
    if x.shape() != (spec.d, spec.n) {
        return Err(Error::DimensionMismatch(format!(
            "data must be {}x{}, got {:?}",
            spec.d,
            spec.n,
            x.shape()
        )));
    }
    Ok(())
}

/// Starting variance: the single-component optimum `-dim/Tr H` for Gaussian
/// models; for uniform models, the scale at which a one-sigma linearized
/// residual perturbation uses about half the feasibility slack.
fn initial_sigma2(mu: &DVector<f64>, spec: &ModelSpec, x: &DMatrix<f64>) -> f64 {
    let d = spec.layout().len() as f64;
    match spec.likelihood {
        Likelihood::Gaussian { .. } => {
            let layout = spec.layout();
            let fac = layout.decode(mu).expect("checked");
            match hessian_trace(&fac, spec) {
                Ok(t) if t < 0.0 => (-d / t).clamp(1e-12, 1e12),
                _ => 1.0,
            }
        }
        Likelihood::Uniform { eps } => {
            let layout = spec.layout();
            let fac = layout.decode(mu).expect("checked");
            let mut g2_mean = 0.0;
            let mut count = 0.0;
            for i in 0..spec.d {
                let ra = fac.a.row(i).norm_squared();
                for j in 0..spec.n {
                    g2_mean += ra + fac.w.column(j).norm_squared();
                    count += 1.0;
                }
            }
            g2_mean /= count;
            let slack = {
                let resid = x - fac.product();
                let worst = resid.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                (eps - worst).max(1e-3 * eps)
            };
            if g2_mean > 0.0 {
                (0.5 * slack) * (0.5 * slack) / g2_mean
            } else {
                1e-6
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Online protocol
// ---------------------------------------------------------------------------

/// Acceptance criteria for the online protocol.
#[derive(Debug, Clone)]
pub struct OnviCriteria {
    /// Minimum bound improvement for Gaussian-mode acceptance, and the
    /// removal threshold during pruning in both modes.
    pub min_gain: f64,
}

impl Default for OnviCriteria {
    fn default() -> Self {
        Self { min_gain: 1e-4 }
    }
}

/// Outcome of one proposal.
#[derive(Debug, Clone)]
pub struct ProposeReport {
    pub accepted: bool,
    /// Bound gain the optimized candidate achieved (whether or not it met
    /// the acceptance threshold).
    pub gain: f64,
    /// Acceptance threshold that was in force.
    pub threshold: f64,
    /// Components pruned after acceptance.
    pub pruned: usize,
}

/// Incremental mixture builder. Existing components stay frozen; each
/// proposal optimizes only the newcomer's variance (Gaussian mode) and
/// weight, with every previous weight scaled by `1 - w_new`.
pub struct OnviState<'a> {
    x: &'a DMatrix<f64>,
    spec: &'a ModelSpec,
    layout: ParamLayout,
    criteria: OnviCriteria,
    /// Fixed component variance in uniform mode (from a single-component
    /// batch fit); `None` in Gaussian mode where variances are optimized.
    uniform_sigma2: Option<f64>,
    mus: Vec<DVector<f64>>,
    sigma2s: Vec<f64>,
    weights: Vec<f64>,
    /// Cached reported expectation terms f(μ)+σ²/2·TrH (Gaussian) or f(μ).
    reported: Vec<f64>,
    proposals_seen: usize,
    accepted_count: usize,
}

impl<'a> OnviState<'a> {
    /// Starts from an initial mixture (typically a single-component batch
    /// fit). In uniform mode `uniform_sigma2` fixes every later component's
    /// variance.
    pub fn new(
        initial: Mixture,
        x: &'a DMatrix<f64>,
        spec: &'a ModelSpec,
        criteria: OnviCriteria,
        uniform_sigma2: Option<f64>,
    ) -> Result<Self> {
        spec_checks(x, spec)?;
        if initial.layout != spec.layout() {
            return Err(Error::DimensionMismatch("mixture layout mismatch".into()));
        }
        if !spec.likelihood.is_gaussian() {
            match uniform_sigma2 {
                None => {
                    return Err(Error::InvalidArgument(
                        "uniform mode needs the fixed component variance".into(),
                    ))
                }
                Some(s2) if !(s2 > 0.0 && s2.is_finite()) => {
                    return Err(Error::InvalidArgument(format!(
                        "fixed component variance must be positive, got {s2}"
                    )))
                }
                _ => {}
            }
        }
        let objective = objective_for(x, spec);
        let mut reported = Vec::with_capacity(initial.len());
        for c in &initial.components {
            let v = objective.eval_reported(&c.mu, c.sigma2);
            if v == f64::NEG_INFINITY {
                return Err(Error::Infeasible("initial mixture scores -inf".into()));
            }
            reported.push(v);
        }
        Ok(Self {
            x,
            spec,
            layout: spec.layout(),
            criteria,
            uniform_sigma2,
            mus: initial.components.iter().map(|c| c.mu.clone()).collect(),
            sigma2s: initial.components.iter().map(|c| c.sigma2).collect(),
            weights: initial.components.iter().map(|c| c.weight).collect(),
            reported,
            proposals_seen: 0,
            accepted_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    pub fn proposals_seen(&self) -> usize {
        self.proposals_seen
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted_count
    }

    /// Largest cached expectation term among current components.
    pub fn best_reported(&self) -> Option<f64> {
        self.reported.iter().copied().reduce(f64::max)
    }

    /// Current mixture snapshot.
    pub fn mixture(&self) -> Mixture {
        Mixture {
            components: (0..self.len())
                .map(|k| MixtureComponent {
                    mu: self.mus[k].clone(),
                    sigma2: self.sigma2s[k],
                    weight: self.weights[k],
                })
                .collect(),
            layout: self.layout,
        }
    }

    /// Reported bound of the current mixture.
    pub fn current_elbo(&self) -> f64 {
        let h = entropy_eval(&self.mus, &self.sigma2s, &self.weights).value;
        let e: f64 =
            self.weights.iter().zip(self.reported.iter()).map(|(w, r)| w * r).sum();
        h + e
    }

    /// Bound of the mixture with a candidate appended at (σ², w), previous
    /// weights scaled by (1-w).
    fn extended_elbo(
        &self,
        cand_mu: &DVector<f64>,
        cand_reported: f64,
        sigma2: f64,
        w: f64,
    ) -> f64 {
        let mut mus: Vec<DVector<f64>> = self.mus.clone();
        mus.push(cand_mu.clone());
        let mut sigma2s = self.sigma2s.clone();
        sigma2s.push(sigma2);
        let mut weights: Vec<f64> = self.weights.iter().map(|wk| wk * (1.0 - w)).collect();
        weights.push(w);
        let h = entropy_eval(&mus, &sigma2s, &weights).value;
        let mut e = 0.0;
        for (wk, rk) in weights.iter().zip(self.reported.iter()) {
            e += wk * rk;
        }
        e += w * cand_reported;
        h + e
    }

    /// Offers a candidate factorization to the mixture.
    pub fn propose(&mut self, candidate: &Factorization) -> Result<ProposeReport> {
        let mu = self.layout.encode(candidate);
        self.propose_mu(&mu)
    }

    /// Offers a candidate parameter vector to the mixture.
    pub fn propose_mu(&mut self, cand_mu: &DVector<f64>) -> Result<ProposeReport> {
        if cand_mu.len() != self.layout.len() {
            return Err(Error::DimensionMismatch("candidate dimension mismatch".into()));
        }
        self.proposals_seen += 1;
        let objective = objective_for(self.x, self.spec);

        let gaussian = self.spec.likelihood.is_gaussian();
        let base_elbo = self.current_elbo();

        // Reported expectation term of the candidate (σ²-dependent for the
        // Gaussian likelihood, recomputed inside the optimization loop).
        let cand_fixed_sigma2 = self.uniform_sigma2.unwrap_or(1.0);
        let cand_reported_at = |s2: f64| objective.eval_reported(cand_mu, s2);
        if cand_reported_at(cand_fixed_sigma2) == f64::NEG_INFINITY {
            // Candidate infeasible: never acceptable.
            return Ok(ProposeReport {
                accepted: false,
                gain: f64::NEG_INFINITY,
                threshold: self.acceptance_threshold(),
                pruned: 0,
            });
        }

        let m = self.len() as f64;
        let w_init = 1.0 / (m + 1.0);
        let y_init = (w_init / (1.0 - w_init)).ln();

        let (best_sigma2, best_w) = if gaussian {
            // Warm-start σ² at the candidate's single-component optimum.
            let fac = self.layout.decode(cand_mu)?;
            let t = hessian_trace(&fac, self.spec).expect("gaussian");
            let dim = self.layout.len() as f64;
            let s2_init = if t < 0.0 { (-dim / t).clamp(1e-12, 1e12) } else { 1.0 };
            let z0 = DVector::from_vec(vec![s2_init.ln(), y_init]);
            let obj = |z: &DVector<f64>| -> (f64, DVector<f64>) {
                let s2 = z[0].exp().clamp(1e-300, 1e300);
                let w = sigmoid(z[1]);
                let value = self.extended_elbo(cand_mu, cand_reported_at(s2), s2, w);
                (value, fd_grad_2d(z, |zz| {
                    let s2 = zz[0].exp().clamp(1e-300, 1e300);
                    let w = sigmoid(zz[1]);
                    self.extended_elbo(cand_mu, cand_reported_at(s2), s2, w)
                }))
            };
            let res = maximize(
                obj,
                z0,
                &NewtonCgOptions { tol: 1e-8, max_iter: 60, ..Default::default() },
            );
            (res.x[0].exp(), sigmoid(res.x[1]))
        } else {
            // Uniform mode: variance is pinned, only the weight moves.
            let s2 = cand_fixed_sigma2;
            let z0 = DVector::from_vec(vec![y_init]);
            let reported = cand_reported_at(s2);
            let obj = |z: &DVector<f64>| -> (f64, DVector<f64>) {
                let w = sigmoid(z[0]);
                let value = self.extended_elbo(cand_mu, reported, s2, w);
                let h = 1e-6;
                let vp = self.extended_elbo(cand_mu, reported, s2, sigmoid(z[0] + h));
                let vm = self.extended_elbo(cand_mu, reported, s2, sigmoid(z[0] - h));
                (value, DVector::from_vec(vec![(vp - vm) / (2.0 * h)]))
            };
            let res = maximize(
                obj,
                z0,
                &NewtonCgOptions { tol: 1e-8, max_iter: 60, ..Default::default() },
            );
            (s2, sigmoid(res.x[0]))
        };

        let cand_reported = cand_reported_at(best_sigma2);
        let gain =
            self.extended_elbo(cand_mu, cand_reported, best_sigma2, best_w) - base_elbo;
        let threshold = self.acceptance_threshold();

        if gain.is_nan() || gain < threshold {
            return Ok(ProposeReport { accepted: false, gain, threshold, pruned: 0 });
        }

        // Accept: rescale previous weights, append, then prune pre-existing
        // components whose removal costs less than the minimum gain.
        let pre_existing = self.len();
        for w in self.weights.iter_mut() {
            *w *= 1.0 - best_w;
        }
        self.mus.push(cand_mu.clone());
        self.sigma2s.push(best_sigma2);
        self.weights.push(best_w);
        self.reported.push(cand_reported);
        self.accepted_count += 1;

        let pruned = self.prune(pre_existing);
        Ok(ProposeReport { accepted: true, gain, threshold, pruned })
    }

    /// Gaussian mode accepts on the flat minimum gain; uniform mode prices
    /// the candidate against the entropy a just-distinguishable component
    /// would add.
    fn acceptance_threshold(&self) -> f64 {
        if self.spec.likelihood.is_gaussian() {
            self.criteria.min_gain
        } else {
            entropy_gain_threshold_parts(
                &self.mus,
                &self.sigma2s,
                &self.weights,
                self.uniform_sigma2.expect("uniform mode"),
            )
        }
    }

    /// Tries removing pre-existing components in ascending-weight order,
    /// re-evaluating after every removal; a component goes when the bound
    /// loses less than `min_gain` (or improves). The just-accepted newcomer
    /// is exempt. Returns how many went.
    fn prune(&mut self, pre_existing: usize) -> usize {
        let mut old_count = pre_existing.min(self.len());
        let mut pruned = 0;
        'scan: loop {
            if self.len() <= 1 || old_count == 0 {
                break;
            }
            let current = self.current_elbo();
            // Pre-existing components occupy the leading indices; cheapest
            // weight goes first.
            let mut order: Vec<usize> = (0..old_count).collect();
            order.sort_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]));
            for idx in order {
                let loss = current - self.elbo_without(idx);
                if loss < self.criteria.min_gain {
                    self.remove(idx);
                    old_count -= 1;
                    pruned += 1;
                    continue 'scan; // re-evaluate against the shrunken mixture
                }
            }
            break;
        }
        pruned
    }

    fn elbo_without(&self, idx: usize) -> f64 {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| k != idx).collect();
        let total: f64 = keep.iter().map(|&k| self.weights[k]).sum();
        if total <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let mus: Vec<DVector<f64>> = keep.iter().map(|&k| self.mus[k].clone()).collect();
        let sigma2s: Vec<f64> = keep.iter().map(|&k| self.sigma2s[k]).collect();
        let weights: Vec<f64> = keep.iter().map(|&k| self.weights[k] / total).collect();
        let h = entropy_eval(&mus, &sigma2s, &weights).value;
        let e: f64 = keep
            .iter()
            .zip(weights.iter())
            .map(|(&k, w)| w * self.reported[k])
            .sum();
        h + e
    }

    fn remove(&mut self, idx: usize) {
        self.mus.remove(idx);
        self.sigma2s.remove(idx);
        let w = self.weights.remove(idx);
        self.reported.remove(idx);
        let rest = 1.0 - w;
        for wk in self.weights.iter_mut() {
            *wk /= rest;
        }
    }
}

fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient for tiny (2-d) optimization problems.
fn fd_grad_2d<F: Fn(&DVector<f64>) -> f64>(z: &DVector<f64>, f: F) -> DVector<f64> {
    let mut g = DVector::zeros(z.len());
    let h = 1e-6;
    for i in 0..z.len() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        let (vp, vm) = (f(&zp), f(&zm));
        g[i] = if vp.is_finite() && vm.is_finite() { (vp - vm) / (2.0 * h) } else { 0.0 };
    }
    g
}

/// One-shot wrapper around [`OnviState`] for a single proposal.
pub fn onvi_propose(
    mix: &Mixture,
    candidate: &Factorization,
    x: &DMatrix<f64>,
    spec: &ModelSpec,
    criteria: &OnviCriteria,
    uniform_sigma2: Option<f64>,
) -> Result<(Mixture, ProposeReport)> {
    let mut state = OnviState::new(mix.clone(), x, spec, criteria.clone(), uniform_sigma2)?;
    let report = state.propose(candidate)?;
    Ok((state.mixture(), report))
}

/// Entropy gained by a hypothetical just-distinguishable component: a copy
/// of the largest-weight component offset by σ in every coordinate
/// (σ² = `sigma2`), inserted at weight `1/(M+1)` with existing weights
/// scaled by `M/(M+1)`.
pub fn entropy_gain_threshold(mix: &Mixture, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument("sigma2 must be positive".into()));
    }
    let mus: Vec<DVector<f64>> = mix.components.iter().map(|c| c.mu.clone()).collect();
    let sigma2s: Vec<f64> = mix.components.iter().map(|c| c.sigma2).collect();
    let weights: Vec<f64> = mix.components.iter().map(|c| c.weight).collect();
    Ok(entropy_gain_threshold_parts(&mus, &sigma2s, &weights, sigma2))
}

fn entropy_gain_threshold_parts(
    mus: &[DVector<f64>],
    sigma2s: &[f64],
    weights: &[f64],
    sigma2: f64,
) -> f64 {
    let base = entropy_eval(mus, sigma2s, weights).value;

    // Anchor: largest weight, ties to the lowest index.
    let mut anchor = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > weights[anchor] {
            anchor = k;
        }
    }
    let sigma = sigma2.sqrt();
    let hypothetical = mus[anchor].map(|v| v + sigma);

    let m = mus.len() as f64;
    let mut mus2: Vec<DVector<f64>> = mus.to_vec();
    mus2.push(hypothetical);
    let mut sigma2s2 = sigma2s.to_vec();
    sigma2s2.push(sigma2);
    let mut weights2: Vec<f64> = weights.iter().map(|w| w * m / (m + 1.0)).collect();
    weights2.push(1.0 / (m + 1.0));

    entropy_eval(&mus2, &sigma2s2, &weights2).value - base
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// On-disk mixture format (JSON). Floats survive a round trip bit-exactly:
/// the writer emits shortest-round-trip decimal representations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub format_version: u32,
    pub d: usize,
    pub n: usize,
    pub r: usize,
    /// Order of the flattened parameter vector.
    pub layout: String,
    pub components: Vec<ComponentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub weight: f64,
    pub sigma2: f64,
    pub mu: Vec<f64>,
}

pub const MIXTURE_FORMAT_VERSION: u32 = 1;
pub const MIXTURE_LAYOUT_TAG: &str = "a-colmajor;w-rowmajor";

impl MixtureRecord {
    pub fn from_mixture(mix: &Mixture) -> Self {
        Self {
            format_version: MIXTURE_FORMAT_VERSION,
            d: mix.layout.d,
            n: mix.layout.n,
            r: mix.layout.r,
            layout: MIXTURE_LAYOUT_TAG.to_string(),
            components: mix
                .components
                .iter()
                .map(|c| ComponentRecord {
                    weight: c.weight,
                    sigma2: c.sigma2,
                    mu: c.mu.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn into_mixture(self) -> Result<Mixture> {
        if self.format_version != MIXTURE_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported mixture format version {}",
                self.format_version
            )));
        }
        if self.layout != MIXTURE_LAYOUT_TAG {
            return Err(Error::InvalidArgument(format!("unknown layout tag {:?}", self.layout)));
        }
        let layout = ParamLayout { d: self.d, n: self.n, r: self.r };
        let components = self
            .components
            .into_iter()
            .map(|c| MixtureComponent {
                mu: DVector::from_vec(c.mu),
                sigma2: c.sigma2,
                weight: c.weight,
            })
            .collect();
        Mixture::new(components, layout)
    }
}

/// Serializes a mixture to JSON.
pub fn mixture_to_json(mix: &Mixture) -> String {
    serde_json::to_string_pretty(&MixtureRecord::from_mixture(mix)).expect("serializable")
}

/// Parses a mixture from JSON produced by [`mixture_to_json`].
pub fn mixture_from_json(json: &str) -> Result<Mixture> {
    let record: MixtureRecord = serde_json::from_str(json)
        .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })?;
    record.into_mixture()
}
