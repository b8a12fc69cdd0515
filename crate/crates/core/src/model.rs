//! Probabilistic model for Bayesian non-negative matrix factorization.
//!
//! The data matrix `X` (D×N) is modeled as the product of two entrywise
//! non-negative factors `A` (D×R) and `W` (R×N):
//!
//! ```text
//! p(A) = ∏_{d,k} Exp(A[d,k]; λ_A[d,k])
//! p(W) = ∏_{k,n} Exp(W[k,n]; λ_W[k,n])
//! p(X | A, W) = ∏_{d,n} N(X[d,n]; (AW)[d,n], σ_x²)        (Gaussian)
//!             = ∏_{d,n} U(X[d,n] - (AW)[d,n]; -ε, ε)      (Uniform)
//! ```
//!
//! The uniform likelihood is supported on the open interval: any residual
//! with |X - AW| ≥ ε has zero density, so the log joint is -∞ there.
//!
//! This module provides the log joint and its derivatives, the trace of the
//! Gaussian log-likelihood Hessian used by second-order ELBO expansions, the
//! closed-form column-scale optimization of that trace, and the flattened
//! parameter-vector layout shared by the variational and sampling code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observation noise model for the factorization residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// Independent Gaussian noise with variance `sigma2` on every entry.
    Gaussian { sigma2: f64 },
    /// Independent Uniform(-eps, eps) noise on every entry (open interval).
    Uniform { eps: f64 },
}

impl Likelihood {
    pub fn is_gaussian(&self) -> bool {
        matches!(self, Likelihood::Gaussian { .. })
    }
}

/// Fully specified model: dimensions, likelihood, and prior rates.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub d: usize,
    pub n: usize,
    pub r: usize,
    pub likelihood: Likelihood,
    /// Exponential prior rate for every entry of `A` (D×R).
    pub lambda_a: DMatrix<f64>,
    /// Exponential prior rate for every entry of `W` (R×N).
    pub lambda_w: DMatrix<f64>,
}

impl ModelSpec {
    /// Model with unit prior rates λ ≡ 1 everywhere.
    pub fn new(d: usize, n: usize, r: usize, likelihood: Likelihood) -> Result<Self> {
        Self::with_rates(
            d,
            n,
            r,
            likelihood,
            DMatrix::from_element(d, r, 1.0),
            DMatrix::from_element(r, n, 1.0),
        )
    }

    pub fn with_rates(
        d: usize,
        n: usize,
        r: usize,
        likelihood: Likelihood,
        lambda_a: DMatrix<f64>,
        lambda_w: DMatrix<f64>,
    ) -> Result<Self> {
        if d == 0 || n == 0 || r == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if lambda_a.shape() != (d, r) || lambda_w.shape() != (r, n) {
            return Err(Error::DimensionMismatch(format!(
                "prior rates must be ({d}x{r}) and ({r}x{n}), got {:?} and {:?}",
                lambda_a.shape(),
                lambda_w.shape()
            )));
        }
        if lambda_a.iter().chain(lambda_w.iter()).any(|&l| l <= 0.0 || !l.is_finite()) {
            return Err(Error::InvalidArgument("prior rates must be finite and > 0".into()));
        }
        match likelihood {
            Likelihood::Gaussian { sigma2 } if !(sigma2 > 0.0 && sigma2.is_finite()) => {
                return Err(Error::InvalidArgument("sigma2 must be finite and > 0".into()));
            }
            Likelihood::Uniform { eps } if !(eps > 0.0 && eps.is_finite()) => {
                return Err(Error::InvalidArgument("eps must be finite and > 0".into()));
            }
            _ => {}
        }
        Ok(Self { d, n, r, likelihood, lambda_a, lambda_w })
    }

    /// Layout of the flattened parameter vector for this model.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout { d: self.d, n: self.n, r: self.r }
    }

    fn check_x(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.d, self.n) {
            return Err(Error::DimensionMismatch(format!(
                "data must be {}x{}, got {:?}",
                self.d,
                self.n,
                x.shape()
            )));
        }
        Ok(())
    }

    fn check_factorization(&self, f: &Factorization) -> Result<()> {
        if f.a.shape() != (self.d, self.r) || f.w.shape() != (self.r, self.n) {
            return Err(Error::DimensionMismatch(format!(
                "factors must be {}x{} and {}x{}, got {:?} and {:?}",
                self.d,
                self.r,
                self.r,
                self.n,
                f.a.shape(),
                f.w.shape()
            )));
        }
        f.validate()
    }
}

/// A candidate solution: the pair of non-negative factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl Factorization {
    /// Builds a factorization, rejecting negative or non-finite entries and
    /// inconsistent inner dimensions.
    pub fn new(a: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if a.ncols() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "inner dimensions disagree: A is {:?}, W is {:?}",
                a.shape(),
                w.shape()
            )));
        }
        let f = Self { a, w };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        if self.a.iter().chain(self.w.iter()).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "factor entries must be non-negative and finite".into(),
            ));
        }
        Ok(())
    }

    /// The reconstruction `A * W`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.a * &self.w
    }

    /// Rank (number of columns of `A`).
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }
}

/// Log of the joint density `p(X, A, W)` under the model.
///
/// Returns `-inf` (not an error) when the uniform likelihood is violated,
/// including residuals exactly on the interval boundary.
pub fn log_joint(x: &DMatrix<f64>, f: &Factorization, spec: &ModelSpec) -> Result<f64> {
    spec.check_x(x)?;
    spec.check_factorization(f)?;

    let prior = log_prior(f, spec);
    let recon = f.product();
    let (d, n) = (spec.d as f64, spec.n as f64);

    let ll = match spec.likelihood {
        Likelihood::Gaussian { sigma2 } => {
            let mut sq = 0.0;
            for (xv, rv) in x.iter().zip(recon.iter()) {
                let r = xv - rv;
                sq += r * r;
            }
            -0.5 * d * n * (2.0 * std::f64::consts::PI * sigma2).ln() - sq / (2.0 * sigma2)
        }
        Likelihood::Uniform { eps } => {
            let feasible = x.iter().zip(recon.iter()).all(|(xv, rv)| (xv - rv).abs() < eps);
            if feasible {
                -d * n * (2.0 * eps).ln()
            } else {
                return Ok(f64::NEG_INFINITY);
            }
        }
    };
    Ok(ll + prior)
}

fn log_prior(f: &Factorization, spec: &ModelSpec) -> f64 {
    let mut acc = 0.0;
    for (v, l) in f.a.iter().zip(spec.lambda_a.iter()) {
        acc += l.ln() - l * v;
    }
    for (v, l) in f.w.iter().zip(spec.lambda_w.iter()) {
        acc += l.ln() - l * v;
    }
    acc
}

/// Gradient of [`log_joint`] with respect to `(A, W)`.
///
/// Under the uniform likelihood the gradient inside the feasible region is
/// the prior gradient `(-λ_A, -λ_W)`; an infeasible point is an error since
/// the log joint is -∞ there.
pub fn grad_log_joint(
    x: &DMatrix<f64>,
    f: &Factorization,
    spec: &ModelSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    spec.check_x(x)?;
    spec.check_factorization(f)?;

    match spec.likelihood {
        Likelihood::Gaussian { sigma2 } => {
            let resid = x - f.product();
            let ga = &resid * f.w.transpose() / sigma2 - &spec.lambda_a;
            let gw = f.a.transpose() * &resid / sigma2 - &spec.lambda_w;
            Ok((ga, gw))
        }
        Likelihood::Uniform { eps } => {
            let recon = f.product();
            let feasible = x.iter().zip(recon.iter()).all(|(xv, rv)| (xv - rv).abs() < eps);
            if !feasible {
                return Err(Error::Infeasible(
                    "gradient requested outside the uniform feasibility region".into(),
                ));
            }
            Ok((-&spec.lambda_a, -&spec.lambda_w))
        }
    }
}

/// Trace of the Hessian of the Gaussian log-likelihood at `(A, W)`:
///
/// ```text
/// Tr(H) = -(N·Tr(AᵀA) + D·Tr(WWᵀ)) / σ_x²
/// ```
///
/// The exponential priors are log-linear, so they contribute nothing; the
/// uniform likelihood has no curvature and is rejected here.
pub fn hessian_trace(f: &Factorization, spec: &ModelSpec) -> Result<f64> {
    spec.check_factorization(f)?;
    let sigma2 = match spec.likelihood {
        Likelihood::Gaussian { sigma2 } => sigma2,
        Likelihood::Uniform { .. } => {
            return Err(Error::InvalidArgument(
                "hessian trace is defined for the Gaussian likelihood only".into(),
            ));
        }
    };
    let (d, n) = (spec.d as f64, spec.n as f64);
    Ok(-(n * f.a.norm_squared() + d * f.w.norm_squared()) / sigma2)
}

/// Which function of the column scale β the scale optimizer maximizes.
///
/// `AsDisplayed` maximizes `-(β·N·K + D·T/β)`, whose argmax is
/// `β* = sqrt(D·T/(N·K))`. `BetaSquared` maximizes `-(β²·N·K + D·T/β²)`
/// (the trace of the rescaled pair `(βAS, β⁻¹S⁻¹W)` substituted literally),
/// whose argmax is `(D·T/(N·K))^(1/4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleObjective {
    #[default]
    AsDisplayed,
    BetaSquared,
}

/// Result of [`optimize_scale`]: the maximizing β and the rescaled pair.
#[derive(Debug, Clone)]
pub struct ScaledFactorization {
    pub beta: f64,
    pub factorization: Factorization,
}

/// Rescales a factorization to the column scale that maximizes the Hessian
/// trace (i.e. minimizes curvature magnitude), leaving `A·W` unchanged.
///
/// With `S = diag(1/‖a_k‖)` (so `AS` has unit Euclidean column norms),
/// `K = R`, and `T = Tr((S⁻¹W)(S⁻¹W)ᵀ)`, the returned pair is
/// `(β*·A·S, β*⁻¹·S⁻¹·W)`.
pub fn optimize_scale(f: &Factorization, objective: ScaleObjective) -> Result<ScaledFactorization> {
    let (d, n) = (f.a.nrows() as f64, f.w.ncols() as f64);
    let k = f.rank() as f64;

    let col_norms: Vec<f64> = (0..f.rank()).map(|j| f.a.column(j).norm()).collect();
    if col_norms.contains(&0.0) {
        return Err(Error::InvalidArgument(
            "scale optimization requires non-zero columns of A".into(),
        ));
    }

    // T = Tr((S⁻¹W)(S⁻¹W)ᵀ) with S⁻¹ = diag(‖a_k‖): row k of W scaled up.
    let mut t = 0.0;
    for (k_idx, &c) in col_norms.iter().enumerate() {
        t += c * c * f.w.row(k_idx).norm_squared();
    }
    if t == 0.0 {
        return Err(Error::InvalidArgument("scale optimization requires a non-zero W".into()));
    }

    let ratio = d * t / (n * k);
    let beta = match objective {
        ScaleObjective::AsDisplayed => ratio.sqrt(),
        ScaleObjective::BetaSquared => ratio.powf(0.25),
    };

    let mut a = f.a.clone();
    let mut w = f.w.clone();
    for (k_idx, &c) in col_norms.iter().enumerate() {
        a.column_mut(k_idx).scale_mut(beta / c);
        w.row_mut(k_idx).scale_mut(c / beta);
    }
    Ok(ScaledFactorization { beta, factorization: Factorization { a, w } })
}

/// Layout of the flattened parameter vector: all of `A` in column-major
/// order followed by all of `W` in row-major order, total length `R(D+N)`.
///
/// Encoding is lossless for valid factorizations; decoding clips negative
/// coordinates to zero (the variational posterior lives on the whole of
/// `R^{R(D+N)}`, the model on the non-negative orthant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub d: usize,
    pub n: usize,
    pub r: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.r * (self.d + self.n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, f: &Factorization) -> DVector<f64> {
        let mut v = DVector::zeros(self.len());
        // DMatrix stores column-major, so A's backing slice is already the
        // right order.
        v.rows_mut(0, self.d * self.r).copy_from_slice(f.a.as_slice());
        let mut idx = self.d * self.r;
        for k in 0..self.r {
            for n in 0..self.n {
                v[idx] = f.w[(k, n)];
                idx += 1;
            }
        }
        v
    }

    /// Decodes a parameter vector, clipping negative entries to zero.
    pub fn decode(&self, v: &DVector<f64>) -> Result<Factorization> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector must have length {}, got {}",
                self.len(),
                v.len()
            )));
        }
        let a = DMatrix::from_iterator(
            self.d,
            self.r,
            v.as_slice()[..self.d * self.r].iter().map(|&x| x.max(0.0)),
        );
        let mut w = DMatrix::zeros(self.r, self.n);
        let mut idx = self.d * self.r;
        for k in 0..self.r {
            for n in 0..self.n {
                w[(k, n)] = v[idx].max(0.0);
                idx += 1;
            }
        }
        Ok(Factorization { a, w })
    }
}
