//! Flat key=value run configuration.
//!
//! A config file is line-oriented text: `key = value` pairs, `#` comments,
//! blank lines ignored. Keys are dotted paths that group related settings
//! (`rrt.s0 = 0.02`, `hmc.leapfrog_steps = 30`), which keeps diffs readable
//! when experiments differ in one knob. Command-line `--override key=value`
//! entries replace file values, and the dedicated `--seed` flag and the
//! subcommand's method choice are applied last the same way.
//!
//! Validation is whole-file: every syntax problem, unknown key, bad value,
//! and violated range is collected and reported in one batch rather than
//! one-at-a-time.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use bnmf_core::model::{Likelihood, ModelSpec, ScaleObjective};
use bnmf_core::nmf::LinOptions;
use bnmf_core::rrt::{RrtConfig, ThresholdReferent};
use bnmf_core::samplers::HmcOptions;
use bnmf_core::vi::{NviOptions, OnviCriteria};

/// Default number of independent repetitions per run.
pub const DEFAULT_REPETITIONS: usize = 10;
/// Default number of solver fits used to calibrate empirical noise levels.
pub const DEFAULT_NOISE_RESTARTS: usize = 10;
/// Default chain length for both MCMC samplers.
pub const DEFAULT_CHAIN_LENGTH: usize = 10_000;
/// Default thinning interval for parameter snapshots in chain logs.
pub const DEFAULT_TRACE_THIN: usize = 1_000;
/// Default mixture size for the batch variational baseline.
pub const DEFAULT_NVI_M: usize = 10;

/// Where the observed matrix comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Load from a file (dense CSV or coordinate text, auto-detected).
    File { path: PathBuf },
    /// Synthetic data with two planted exact factorizations.
    TwoTruth { d: usize, n: usize, noise: f64, mix: f64 },
    /// Random low-rank data with Gaussian observation noise.
    Random { d: usize, n: usize, noise: f64 },
}

/// Gaussian observation variance: a number or a residual-calibrated value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSpec {
    Value(f64),
    Empirical,
    EmpiricalX10,
}

/// Interval half-width: a number or the largest residual over solver fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsSpec {
    Value(f64),
    Empirical,
}

/// Observation model plus its (possibly data-derived) noise scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodSpec {
    Gaussian(SigmaSpec),
    Uniform(EpsSpec),
}

impl LikelihoodSpec {
    pub fn is_gaussian(&self) -> bool {
        matches!(self, LikelihoodSpec::Gaussian(_))
    }
}

/// Which pipeline a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Nvi,
    GibbsOnvi,
    HmcOnvi,
    RrtOnvi,
    LinRestarts,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Nvi => "nvi",
            Method::GibbsOnvi => "gibbs_onvi",
            Method::HmcOnvi => "hmc_onvi",
            Method::RrtOnvi => "rrt_onvi",
            Method::LinRestarts => "lin_restarts",
        }
    }
}

/// Batch variational baseline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NviParams {
    pub m: usize,
    pub tol: f64,
    pub max_iter: usize,
}

/// Projected-gradient solver settings (restarts, tolerances).
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub restarts: usize,
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

/// Online mixture-building settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OnviParams {
    pub min_gain: f64,
}

/// Tree-exploration settings. `max_temp_nodes` and `n_init_restarts` default
/// per likelihood, so they stay unset until resolved against one.
#[derive(Debug, Clone, PartialEq)]
pub struct RrtParams {
    pub s0: f64,
    pub growth: f64,
    pub max_extend_steps: usize,
    pub max_temp_nodes: Option<usize>,
    pub min_angle_deg: f64,
    pub min_angle_increment_deg: f64,
    pub max_proposals: usize,
    pub max_failed_attempts: usize,
    pub n_init_restarts: Option<usize>,
    pub scale_objective: ScaleObjective,
    pub threshold_referent: ThresholdReferent,
}

/// Gibbs chain settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsParams {
    pub sweeps: usize,
}

/// Hamiltonian Monte Carlo settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcParams {
    pub iters: usize,
    pub leapfrog_steps: usize,
    pub step_init: f64,
    pub target_accept: f64,
    pub warmup_fraction: f64,
    pub adapt_rate: f64,
}

/// A fully typed run description. Construct with [`RunConfig::from_text`];
/// every field is populated (defaults expanded), so a written-back copy via
/// [`RunConfig::resolved_text`] is complete provenance for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub rank: usize,
    pub likelihood: LikelihoodSpec,
    /// `None` until a subcommand or config line picks a pipeline; running
    /// requires exactly one.
    pub method: Option<Method>,
    pub repetitions: usize,
    pub seed: u64,
    pub noise_restarts: usize,
    pub nvi: NviParams,
    pub solver: SolverParams,
    pub onvi: OnviParams,
    pub rrt: RrtParams,
    pub gibbs: GibbsParams,
    pub hmc: HmcParams,
    pub trace_thin: usize,
}

/// Batch of configuration problems; `Display` lists one per line.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Key-value store with error accumulation: `take_*` methods consume keys,
/// record type/range problems, and fall back to the given default so
/// extraction always completes and reports everything at once.
struct Entries {
    map: BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Entries {
    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn take_usize(&mut self, key: &str, default: usize) -> usize {
        match self.take_raw(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|_| {
                self.errors.push(format!("{key}: expected an integer, got `{v}`"));
                default
            }),
        }
    }

    fn take_opt_usize(&mut self, key: &str) -> Option<usize> {
        let v = self.take_raw(key)?;
        match v.parse() {
            Ok(u) => Some(u),
            Err(_) => {
                self.errors.push(format!("{key}: expected an integer, got `{v}`"));
                None
            }
        }
    }

    fn take_u64(&mut self, key: &str, default: u64) -> u64 {
        match self.take_raw(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|_| {
                self.errors.push(format!("{key}: expected an unsigned integer, got `{v}`"));
                default
            }),
        }
    }

    fn take_f64(&mut self, key: &str, default: f64) -> f64 {
        match self.take_raw(key) {
            None => default,
            Some(v) => v.parse().unwrap_or_else(|_| {
                self.errors.push(format!("{key}: expected a number, got `{v}`"));
                default
            }),
        }
    }

    fn unknown_keys(&mut self) {
        for key in self.map.keys() {
            self.errors.push(format!("unknown key `{key}`"));
        }
    }
}

/// Splits config text into key-value entries. Syntax errors (missing `=`,
/// empty key, duplicate key) are appended to `errors`.
fn parse_entries(text: &str, errors: &mut Vec<String>) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected `key = value`, got `{line}`", idx + 1));
            continue;
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            errors.push(format!("line {}: empty key", idx + 1));
            continue;
        }
        if map.insert(key.clone(), value).is_some() {
            errors.push(format!("line {}: duplicate key `{key}`", idx + 1));
        }
    }
    map
}

impl RunConfig {
    /// Parses config text plus `(key, value)` overrides applied in order
    /// (later entries win). Returns every problem found, or the fully
    /// defaulted configuration.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let mut map = parse_entries(text, &mut errors);
        for (key, value) in overrides {
            let key = key.trim().to_string();
            if key.is_empty() {
                errors.push("override with empty key".into());
                continue;
            }
            map.insert(key, value.trim().to_string());
        }
        let mut e = Entries { map, errors };

        let dataset = Self::extract_dataset(&mut e);
        let rank = e.take_usize("rank", 0);
        if rank == 0 {
            e.errors.push("rank: required, must be a positive integer".into());
        }
        let likelihood = Self::extract_likelihood(&mut e);
        let method = Self::extract_method(&mut e);

        let repetitions = e.take_usize("repetitions", DEFAULT_REPETITIONS);
        if repetitions == 0 {
            e.errors.push("repetitions: must be at least 1".into());
        }
        let seed = e.take_u64("seed", 0);
        let noise_restarts = e.take_usize("noise.restarts", DEFAULT_NOISE_RESTARTS);
        if noise_restarts == 0 {
            e.errors.push("noise.restarts: must be at least 1".into());
        }

        let nvi = NviParams {
            m: e.take_usize("nvi.m", DEFAULT_NVI_M),
            tol: e.take_f64("nvi.tol", NviOptions::default().tol),
            max_iter: e.take_usize("nvi.max_iter", NviOptions::default().max_iter),
        };
        if nvi.m == 0 {
            e.errors.push("nvi.m: must be at least 1".into());
        }
        if nvi.tol <= 0.0 || nvi.tol.is_nan() {
            e.errors.push("nvi.tol: must be positive".into());
        }
        if nvi.max_iter == 0 {
            e.errors.push("nvi.max_iter: must be at least 1".into());
        }

        let lin_defaults = LinOptions::default();
        let solver = SolverParams {
            restarts: e.take_usize("solver.restarts", DEFAULT_NOISE_RESTARTS),
            tol: e.take_f64("solver.tol", lin_defaults.tol),
            max_outer: e.take_usize("solver.max_outer", lin_defaults.max_outer),
            max_inner: e.take_usize("solver.max_inner", lin_defaults.max_inner),
        };
        if solver.restarts == 0 {
            e.errors.push("solver.restarts: must be at least 1".into());
        }
        if solver.tol <= 0.0 || solver.tol.is_nan() {
            e.errors.push("solver.tol: must be positive".into());
        }
        if solver.max_outer == 0 || solver.max_inner == 0 {
            e.errors.push("solver.max_outer / solver.max_inner: must be at least 1".into());
        }

        let onvi = OnviParams {
            min_gain: e.take_f64("onvi.min_gain", OnviCriteria::default().min_gain),
        };
        if onvi.min_gain <= 0.0 || onvi.min_gain.is_nan() {
            e.errors.push("onvi.min_gain: must be positive".into());
        }

        let rrt_defaults = RrtConfig::gaussian_defaults(0);
        let scale_objective = match e.take_raw("rrt.scale_objective").as_deref() {
            None | Some("displayed") => ScaleObjective::AsDisplayed,
            Some("beta_squared") => ScaleObjective::BetaSquared,
            Some(v) => {
                e.errors.push(format!(
                    "rrt.scale_objective: expected `displayed` or `beta_squared`, got `{v}`"
                ));
                ScaleObjective::AsDisplayed
            }
        };
        let threshold_referent = match e.take_raw("rrt.threshold_referent").as_deref() {
            None | Some("best_node") => ThresholdReferent::BestNode,
            Some("sink_best") => ThresholdReferent::SinkBest,
            Some(v) => {
                e.errors.push(format!(
                    "rrt.threshold_referent: expected `best_node` or `sink_best`, got `{v}`"
                ));
                ThresholdReferent::BestNode
            }
        };
        let rrt = RrtParams {
            s0: e.take_f64("rrt.s0", rrt_defaults.s0),
            growth: e.take_f64("rrt.growth", rrt_defaults.growth),
            max_extend_steps: e.take_usize("rrt.max_extend_steps", rrt_defaults.max_extend_steps),
            max_temp_nodes: e.take_opt_usize("rrt.max_temp_nodes"),
            min_angle_deg: e.take_f64("rrt.min_angle_deg", rrt_defaults.min_angle_deg),
            min_angle_increment_deg: e
                .take_f64("rrt.min_angle_increment_deg", rrt_defaults.min_angle_increment_deg),
            max_proposals: e.take_usize("rrt.max_proposals", rrt_defaults.max_proposals),
            max_failed_attempts: e
                .take_usize("rrt.max_failed_attempts", rrt_defaults.max_failed_attempts),
            n_init_restarts: e.take_opt_usize("rrt.n_init_restarts"),
            scale_objective,
            threshold_referent,
        };
        if !(rrt.s0.is_finite() && rrt.s0 > 0.0) {
            e.errors.push("rrt.s0: must be positive and finite".into());
        }
        if !(rrt.growth.is_finite() && rrt.growth > 1.0) {
            e.errors.push("rrt.growth: must exceed 1".into());
        }
        if rrt.max_extend_steps == 0 {
            e.errors.push("rrt.max_extend_steps: must be at least 1".into());
        }
        if rrt.max_temp_nodes == Some(0) {
            e.errors.push("rrt.max_temp_nodes: must be at least 1".into());
        }
        if rrt.min_angle_deg < 0.0 || rrt.min_angle_deg.is_nan() {
            e.errors.push("rrt.min_angle_deg: must be non-negative".into());
        }
        if rrt.min_angle_increment_deg <= 0.0 || rrt.min_angle_increment_deg.is_nan() {
            e.errors.push("rrt.min_angle_increment_deg: must be positive".into());
        }
        if rrt.max_proposals == 0 || rrt.max_failed_attempts == 0 {
            e.errors
                .push("rrt.max_proposals / rrt.max_failed_attempts: must be at least 1".into());
        }
        if rrt.n_init_restarts == Some(0) {
            e.errors.push("rrt.n_init_restarts: must be at least 1".into());
        }

        let gibbs = GibbsParams { sweeps: e.take_usize("gibbs.sweeps", DEFAULT_CHAIN_LENGTH) };
        if gibbs.sweeps == 0 {
            e.errors.push("gibbs.sweeps: must be at least 1".into());
        }

        let hmc_defaults = HmcOptions::default();
        let hmc = HmcParams {
            iters: e.take_usize("hmc.iters", DEFAULT_CHAIN_LENGTH),
            leapfrog_steps: e.take_usize("hmc.leapfrog_steps", hmc_defaults.leapfrog_steps),
            step_init: e.take_f64("hmc.step_init", hmc_defaults.step_init),
            target_accept: e.take_f64("hmc.target_accept", hmc_defaults.target_accept),
            warmup_fraction: e.take_f64("hmc.warmup_fraction", hmc_defaults.warmup_fraction),
            adapt_rate: e.take_f64("hmc.adapt_rate", hmc_defaults.adapt_rate),
        };
        if hmc.iters == 0 || hmc.leapfrog_steps == 0 {
            e.errors.push("hmc.iters / hmc.leapfrog_steps: must be at least 1".into());
        }
        if !(hmc.step_init.is_finite() && hmc.step_init > 0.0) {
            e.errors.push("hmc.step_init: must be positive and finite".into());
        }
        if hmc.target_accept <= 0.0 || hmc.target_accept >= 1.0 || hmc.target_accept.is_nan() {
            e.errors.push("hmc.target_accept: must lie in (0,1)".into());
        }
        if hmc.warmup_fraction < 0.0 || hmc.warmup_fraction >= 1.0 || hmc.warmup_fraction.is_nan() {
            e.errors.push("hmc.warmup_fraction: must lie in [0,1)".into());
        }
        if hmc.adapt_rate <= 0.0 || hmc.adapt_rate.is_nan() {
            e.errors.push("hmc.adapt_rate: must be positive".into());
        }

        let trace_thin = e.take_usize("trace.thin", DEFAULT_TRACE_THIN);
        if trace_thin == 0 {
            e.errors.push("trace.thin: must be at least 1".into());
        }

        if method == Some(Method::GibbsOnvi) && !likelihood.is_gaussian() {
            e.errors.push(
                "method gibbs_onvi needs likelihood.kind = gaussian \
                 (closed-form conditionals exist only there)"
                    .into(),
            );
        }

        e.unknown_keys();
        if e.errors.is_empty() {
            Ok(RunConfig {
                dataset,
                rank,
                likelihood,
                method,
                repetitions,
                seed,
                noise_restarts,
                nvi,
                solver,
                onvi,
                rrt,
                gibbs,
                hmc,
                trace_thin,
            })
        } else {
            Err(ConfigErrors(e.errors))
        }
    }

    fn extract_dataset(e: &mut Entries) -> DatasetSource {
        let fallback = DatasetSource::Random { d: 1, n: 1, noise: 0.0 };
        let kind = e.take_raw("dataset.kind");
        match kind.as_deref() {
            Some("file") => {
                let path = e.take_raw("dataset.path").map(PathBuf::from);
                for key in ["dataset.d", "dataset.n", "dataset.noise", "dataset.mix"] {
                    if e.take_raw(key).is_some() {
                        e.errors.push(format!("{key}: not applicable to a file dataset"));
                    }
                }
                match path {
                    Some(p) => DatasetSource::File { path: p },
                    None => {
                        e.errors.push("dataset.path: required for dataset.kind = file".into());
                        fallback
                    }
                }
            }
            Some("two_truth") => {
                let d = e.take_usize("dataset.d", 60);
                let n = e.take_usize("dataset.n", 60);
                let noise = e.take_f64("dataset.noise", 0.01);
                let mix = e.take_f64("dataset.mix", 0.6);
                if d < 4 || n < 4 {
                    e.errors.push("dataset.d / dataset.n: two_truth data needs at least 4".into());
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    e.errors.push("dataset.noise: must be non-negative and finite".into());
                }
                if mix <= 0.0 || mix >= 1.0 || mix.is_nan() {
                    e.errors.push("dataset.mix: must lie strictly between 0 and 1".into());
                }
                DatasetSource::TwoTruth { d, n, noise, mix }
            }
            Some("random") => {
                let d = e.take_usize("dataset.d", 30);
                let n = e.take_usize("dataset.n", 40);
                let noise = e.take_f64("dataset.noise", 0.01);
                if d == 0 || n == 0 {
                    e.errors.push("dataset.d / dataset.n: must be positive".into());
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    e.errors.push("dataset.noise: must be non-negative and finite".into());
                }
                if e.take_raw("dataset.mix").is_some() {
                    e.errors.push("dataset.mix: only applies to two_truth data".into());
                }
                DatasetSource::Random { d, n, noise }
            }
            Some(v) => {
                e.errors.push(format!(
                    "dataset.kind: expected `file`, `two_truth`, or `random`, got `{v}`"
                ));
                fallback
            }
            None => {
                e.errors.push("dataset.kind: required (`file`, `two_truth`, or `random`)".into());
                fallback
            }
        }
    }

    fn extract_likelihood(e: &mut Entries) -> LikelihoodSpec {
        let kind = e.take_raw("likelihood.kind");
        match kind.as_deref() {
            Some("gaussian") => {
                if e.take_raw("likelihood.eps").is_some() {
                    e.errors
                        .push("likelihood.eps: only applies to the uniform likelihood".into());
                }
                let sigma2 = match e.take_raw("likelihood.sigma2").as_deref() {
                    None | Some("empirical") => SigmaSpec::Empirical,
                    Some("empirical_x10") => SigmaSpec::EmpiricalX10,
                    Some(v) => match v.parse::<f64>() {
                        Ok(s) if s > 0.0 && s.is_finite() => SigmaSpec::Value(s),
                        _ => {
                            e.errors.push(format!(
                                "likelihood.sigma2: expected a positive number, \
                                 `empirical`, or `empirical_x10`, got `{v}`"
                            ));
                            SigmaSpec::Empirical
                        }
                    },
                };
                LikelihoodSpec::Gaussian(sigma2)
            }
            Some("uniform") => {
                if e.take_raw("likelihood.sigma2").is_some() {
                    e.errors
                        .push("likelihood.sigma2: only applies to the gaussian likelihood".into());
                }
                let eps = match e.take_raw("likelihood.eps").as_deref() {
                    None | Some("empirical") => EpsSpec::Empirical,
                    Some(v) => match v.parse::<f64>() {
                        Ok(s) if s > 0.0 && s.is_finite() => EpsSpec::Value(s),
                        _ => {
                            e.errors.push(format!(
                                "likelihood.eps: expected a positive number or \
                                 `empirical`, got `{v}`"
                            ));
                            EpsSpec::Empirical
                        }
                    },
                };
                LikelihoodSpec::Uniform(eps)
            }
            Some(v) => {
                e.errors
                    .push(format!("likelihood.kind: expected `gaussian` or `uniform`, got `{v}`"));
                LikelihoodSpec::Gaussian(SigmaSpec::Empirical)
            }
            None => {
                e.errors.push("likelihood.kind: required (`gaussian` or `uniform`)".into());
                LikelihoodSpec::Gaussian(SigmaSpec::Empirical)
            }
        }
    }

    fn extract_method(e: &mut Entries) -> Option<Method> {
        match e.take_raw("method").as_deref() {
            None => None,
            Some("nvi") => Some(Method::Nvi),
            Some("gibbs_onvi") => Some(Method::GibbsOnvi),
            Some("hmc_onvi") => Some(Method::HmcOnvi),
            Some("rrt_onvi") => Some(Method::RrtOnvi),
            Some("lin_restarts") => Some(Method::LinRestarts),
            Some(v) => {
                e.errors.push(format!(
                    "method: expected one of nvi, gibbs_onvi, hmc_onvi, rrt_onvi, \
                     lin_restarts, got `{v}`"
                ));
                None
            }
        }
    }

    /// Solver options with this config's tolerances.
    pub fn lin_options(&self) -> LinOptions {
        LinOptions {
            tol: self.solver.tol,
            max_outer: self.solver.max_outer,
            max_inner: self.solver.max_inner,
        }
    }

    /// Batch-fit options with this config's tolerances.
    pub fn nvi_options(&self) -> NviOptions {
        NviOptions { tol: self.nvi.tol, max_iter: self.nvi.max_iter }
    }

    /// Online acceptance criteria.
    pub fn onvi_criteria(&self) -> OnviCriteria {
        OnviCriteria { min_gain: self.onvi.min_gain }
    }

    /// Sampler options for the Hamiltonian chain.
    pub fn hmc_options(&self) -> HmcOptions {
        HmcOptions {
            leapfrog_steps: self.hmc.leapfrog_steps,
            step_init: self.hmc.step_init,
            target_accept: self.hmc.target_accept,
            warmup_fraction: self.hmc.warmup_fraction,
            adapt_rate: self.hmc.adapt_rate,
        }
    }

    /// Tree configuration resolved against the model's likelihood (which
    /// picks the node-cap and restart-count defaults) and a concrete seed.
    pub fn rrt_config(&self, spec: &ModelSpec, seed: u64) -> RrtConfig {
        let base = RrtConfig::for_spec(spec, seed);
        RrtConfig {
            s0: self.rrt.s0,
            growth: self.rrt.growth,
            max_extend_steps: self.rrt.max_extend_steps,
            max_temp_nodes: self.rrt.max_temp_nodes.unwrap_or(base.max_temp_nodes),
            min_angle_deg: self.rrt.min_angle_deg,
            min_angle_increment_deg: self.rrt.min_angle_increment_deg,
            max_proposals: self.rrt.max_proposals,
            max_failed_attempts: self.rrt.max_failed_attempts,
            n_init_restarts: self.rrt.n_init_restarts.unwrap_or(base.n_init_restarts),
            scale_objective: self.rrt.scale_objective,
            threshold_referent: self.rrt.threshold_referent,
            seed,
        }
    }

    /// The likelihood-dependent node cap actually in force.
    fn resolved_max_temp_nodes(&self) -> usize {
        self.rrt.max_temp_nodes.unwrap_or(if self.likelihood.is_gaussian() { 100 } else { 90 })
    }

    /// The likelihood-dependent seed-restart count actually in force.
    fn resolved_n_init_restarts(&self) -> usize {
        self.rrt.n_init_restarts.unwrap_or(if self.likelihood.is_gaussian() { 50 } else { 10 })
    }

    /// Renders the configuration back to config-file text with every
    /// default expanded, in a fixed key order. Parsing the result yields an
    /// equal `RunConfig`.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        match &self.dataset {
            DatasetSource::File { path } => {
                kv("dataset.kind", "file".into());
                kv("dataset.path", path.display().to_string());
            }
            DatasetSource::TwoTruth { d, n, noise, mix } => {
                kv("dataset.kind", "two_truth".into());
                kv("dataset.d", d.to_string());
                kv("dataset.n", n.to_string());
                kv("dataset.noise", noise.to_string());
                kv("dataset.mix", mix.to_string());
            }
            DatasetSource::Random { d, n, noise } => {
                kv("dataset.kind", "random".into());
                kv("dataset.d", d.to_string());
                kv("dataset.n", n.to_string());
                kv("dataset.noise", noise.to_string());
            }
        }
        kv("rank", self.rank.to_string());
        match &self.likelihood {
            LikelihoodSpec::Gaussian(sigma2) => {
                kv("likelihood.kind", "gaussian".into());
                kv(
                    "likelihood.sigma2",
                    match sigma2 {
                        SigmaSpec::Value(v) => v.to_string(),
                        SigmaSpec::Empirical => "empirical".into(),
                        SigmaSpec::EmpiricalX10 => "empirical_x10".into(),
                    },
                );
            }
            LikelihoodSpec::Uniform(eps) => {
                kv("likelihood.kind", "uniform".into());
                kv(
                    "likelihood.eps",
                    match eps {
                        EpsSpec::Value(v) => v.to_string(),
                        EpsSpec::Empirical => "empirical".into(),
                    },
                );
            }
        }
        if let Some(m) = self.method {
            kv("method", m.name().into());
        }
        kv("repetitions", self.repetitions.to_string());
        kv("seed", self.seed.to_string());
        kv("noise.restarts", self.noise_restarts.to_string());
        kv("solver.restarts", self.solver.restarts.to_string());
        kv("solver.tol", self.solver.tol.to_string());
        kv("solver.max_outer", self.solver.max_outer.to_string());
        kv("solver.max_inner", self.solver.max_inner.to_string());
        kv("nvi.m", self.nvi.m.to_string());
        kv("nvi.tol", self.nvi.tol.to_string());
        kv("nvi.max_iter", self.nvi.max_iter.to_string());
        kv("onvi.min_gain", self.onvi.min_gain.to_string());
        kv("rrt.s0", self.rrt.s0.to_string());
        kv("rrt.growth", self.rrt.growth.to_string());
        kv("rrt.max_extend_steps", self.rrt.max_extend_steps.to_string());
        kv("rrt.max_temp_nodes", self.resolved_max_temp_nodes().to_string());
        kv("rrt.min_angle_deg", self.rrt.min_angle_deg.to_string());
        kv("rrt.min_angle_increment_deg", self.rrt.min_angle_increment_deg.to_string());
        kv("rrt.max_proposals", self.rrt.max_proposals.to_string());
        kv("rrt.max_failed_attempts", self.rrt.max_failed_attempts.to_string());
        kv("rrt.n_init_restarts", self.resolved_n_init_restarts().to_string());
        kv(
            "rrt.scale_objective",
            match self.rrt.scale_objective {
                ScaleObjective::AsDisplayed => "displayed".into(),
                ScaleObjective::BetaSquared => "beta_squared".into(),
            },
        );
        kv(
            "rrt.threshold_referent",
            match self.rrt.threshold_referent {
                ThresholdReferent::BestNode => "best_node".into(),
                ThresholdReferent::SinkBest => "sink_best".into(),
            },
        );
        kv("gibbs.sweeps", self.gibbs.sweeps.to_string());
        kv("hmc.iters", self.hmc.iters.to_string());
        kv("hmc.leapfrog_steps", self.hmc.leapfrog_steps.to_string());
        kv("hmc.step_init", self.hmc.step_init.to_string());
        kv("hmc.target_accept", self.hmc.target_accept.to_string());
        kv("hmc.warmup_fraction", self.hmc.warmup_fraction.to_string());
        kv("hmc.adapt_rate", self.hmc.adapt_rate.to_string());
        kv("trace.thin", self.trace_thin.to_string());
        s
    }

    /// The concrete likelihood once noise scales are known.
    pub fn concrete_likelihood(&self, sigma2: Option<f64>, eps: Option<f64>) -> Likelihood {
        match self.likelihood {
            LikelihoodSpec::Gaussian(_) => {
                Likelihood::Gaussian { sigma2: sigma2.expect("gaussian noise resolved") }
            }
            LikelihoodSpec::Uniform(_) => {
                Likelihood::Uniform { eps: eps.expect("uniform noise resolved") }
            }
        }
    }
}

/// Splits a raw `key=value` override string.
pub fn split_override(raw: &str) -> Result<(String, String), String> {
    match raw.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().into(), v.trim().into())),
        _ => Err(format!("override `{raw}`: expected key=value")),
    }
}
