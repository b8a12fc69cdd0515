//! Pipeline execution: dataset materialization, noise calibration,
//! per-repetition method runs, artifact writing, and aggregation.
//!
//! A run directory is laid out as
//!
//! ```text
//! out/
//!   config.resolved          # defaults-expanded copy of the configuration
//!   noise.json               # resolved noise scales (and their empirical values)
//!   x.csv                    # the observed matrix the run saw
//!   rep_000/ … rep_NNN/      # one directory per repetition, written atomically
//!     summary.json           # seed, bound value, component count, method detail
//!     mixture.json           # final mixture (methods that build one)
//!     persistence.csv        # covering-number curve of the mixture components
//!     trace.csv, …           # method-specific logs
//!   aggregate.json           # mean / 25th / 75th percentile over repetitions
//! ```
//!
//! Repetition `i` derives its seed as `seed + i` and is independent of the
//! others, so repetitions may run on parallel workers without changing any
//! output byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use bnmf_core::data::{gen_gaussian_toy, gen_two_truth_toy, load_matrix, matrix_to_csv, Dataset, ToyOptions};
use bnmf_core::metrics::{pairwise_wad, persistence_csv, persistence_curve, ColumnScale};
use bnmf_core::model::{log_joint, Factorization, ModelSpec};
use bnmf_core::nmf::{empirical_noise_from_fits, lin_restarts, truncated_svd, LinFit, SigmaSource};
use bnmf_core::rrt::{self, Termination};
use bnmf_core::samplers::{hmc_run, GibbsChain};
use bnmf_core::vi::{mixture_to_json, nvi_fit, Mixture, MixtureComponent, NviInit, OnviState};

use crate::config::{
    ConfigErrors, DatasetSource, EpsSpec, LikelihoodSpec, Method, RunConfig, SigmaSpec,
};

/// Flags that tweak how a pipeline runs without being part of the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOpts {
    /// For the sampler methods: run the chain and its logs only, skipping
    /// the online mixture sink.
    pub raw_chain: bool,
}

/// Outcome counts of one multi-repetition run.
#[derive(Debug, Clone, Copy)]
pub struct RunStats {
    pub repetitions: usize,
    pub succeeded: usize,
    pub failed: usize,
}

/// Resolved noise scales, kept for provenance alongside the results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub likelihood: String,
    /// Gaussian observation variance in force (if Gaussian).
    pub sigma2: Option<f64>,
    /// Interval half-width in force (if interval-censored).
    pub eps: Option<f64>,
    /// Residual variance measured from calibration fits, when computed.
    pub empirical_sigma2: Option<f64>,
    /// Largest absolute calibration residual, when computed.
    pub empirical_eps: Option<f64>,
    /// Number of solver fits behind the empirical values.
    pub calibration_restarts: Option<usize>,
}

/// A dataset plus the fully concrete model it will be analyzed under.
pub struct Materialized {
    pub name: String,
    pub x: DMatrix<f64>,
    pub clean: Option<DMatrix<f64>>,
    pub ground_truths: Vec<Factorization>,
    pub spec: ModelSpec,
    pub noise: NoiseRecord,
}

/// A dataset before the model is attached.
struct RawData {
    name: String,
    x: DMatrix<f64>,
    clean: Option<DMatrix<f64>>,
    ground_truths: Vec<Factorization>,
}

/// Loads or generates the observed matrix. Synthetic data uses the config
/// seed itself; repetition seeds start at the same value but drive different
/// draws (solver restarts, chains), so there is no coupling to worry about.
fn load_data(config: &RunConfig) -> Result<RawData> {
    match &config.dataset {
        DatasetSource::File { path } => {
            let loaded = load_matrix(path)
                .with_context(|| format!("loading dataset from {}", path.display()))?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            if loaded.clipped_negatives > 0 {
                eprintln!(
                    "note: clipped {} negative entries in {}",
                    loaded.clipped_negatives,
                    path.display()
                );
            }
            Ok(RawData { name, x: loaded.x, clean: None, ground_truths: Vec::new() })
        }
        DatasetSource::TwoTruth { d, n, noise, mix } => {
            let opts = ToyOptions {
                d: *d,
                n: *n,
                noise_eps: *noise,
                mix: *mix,
                ..ToyOptions::default()
            };
            let ds: Dataset = gen_two_truth_toy(&opts, config.seed)?;
            Ok(RawData { name: ds.name, x: ds.x, clean: Some(ds.clean), ground_truths: ds.ground_truths })
        }
        DatasetSource::Random { d, n, noise } => {
            let ds = gen_gaussian_toy(*d, *n, config.rank, *noise, config.seed)?;
            Ok(RawData { name: ds.name, x: ds.x, clean: Some(ds.clean), ground_truths: ds.ground_truths })
        }
    }
}

/// Resolves symbolic noise levels against the data, running calibration
/// fits only when a value actually asks for them.
fn resolve_noise(config: &RunConfig, x: &DMatrix<f64>) -> Result<NoiseRecord> {
    let needs_fits = matches!(
        config.likelihood,
        LikelihoodSpec::Gaussian(SigmaSpec::Empirical)
            | LikelihoodSpec::Gaussian(SigmaSpec::EmpiricalX10)
            | LikelihoodSpec::Uniform(EpsSpec::Empirical)
    );
    let measured = if needs_fits {
        let fits = lin_restarts(
            x,
            config.rank,
            config.noise_restarts,
            config.seed,
            &config.lin_options(),
        )?;
        Some(empirical_noise_from_fits(x, &fits, SigmaSource::FirstFit))
    } else {
        None
    };
    let (empirical_sigma2, empirical_eps) =
        measured.as_ref().map_or((None, None), |m| (Some(m.sigma2), Some(m.eps)));
    let record = match config.likelihood {
        LikelihoodSpec::Gaussian(spec) => {
            let sigma2 = match spec {
                SigmaSpec::Value(v) => v,
                SigmaSpec::Empirical => empirical_sigma2.unwrap(),
                SigmaSpec::EmpiricalX10 => 10.0 * empirical_sigma2.unwrap(),
            };
            NoiseRecord {
                likelihood: "gaussian".into(),
                sigma2: Some(sigma2),
                eps: None,
                empirical_sigma2,
                empirical_eps,
                calibration_restarts: measured.as_ref().map(|_| config.noise_restarts),
            }
        }
        LikelihoodSpec::Uniform(spec) => {
            let eps = match spec {
                EpsSpec::Value(v) => v,
                EpsSpec::Empirical => empirical_eps.unwrap(),
            };
            NoiseRecord {
                likelihood: "uniform".into(),
                sigma2: None,
                eps: Some(eps),
                empirical_sigma2,
                empirical_eps,
                calibration_restarts: measured.as_ref().map(|_| config.noise_restarts),
            }
        }
    };
    Ok(record)
}

/// Loads the data and builds the concrete model specification.
pub fn materialize(config: &RunConfig) -> Result<Materialized> {
    let raw = load_data(config)?;
    let noise = resolve_noise(config, &raw.x)?;
    let likelihood = config.concrete_likelihood(noise.sigma2, noise.eps);
    let spec = ModelSpec::new(raw.x.nrows(), raw.x.ncols(), config.rank, likelihood)?;
    Ok(Materialized {
        name: raw.name,
        x: raw.x,
        clean: raw.clean,
        ground_truths: raw.ground_truths,
        spec,
        noise,
    })
}

// ---------------------------------------------------------------------------
// Per-repetition summaries and aggregation
// ---------------------------------------------------------------------------

/// One repetition's headline numbers plus method-specific detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepSummary {
    pub method: String,
    pub rep: usize,
    pub seed: u64,
    /// Variational bound of the final mixture (methods that build one).
    pub elbo: Option<f64>,
    /// Component count of the final mixture.
    pub components: Option<usize>,
    /// Set when the repetition aborted; other fields are then best-effort.
    pub error: Option<String>,
    pub detail: serde_json::Value,
}

/// Mean and interquartile positions of a sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsRecord {
    pub mean: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
}

/// Interpolated percentile of an unsorted sample (linear between order
/// statistics, the common numpy default).
pub fn quantile(xs: &[f64], p: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let rank = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(v[lo] * (1.0 - frac) + v[hi] * frac)
}

pub fn stats(xs: &[f64]) -> StatsRecord {
    if xs.is_empty() {
        return StatsRecord { mean: None, q25: None, q75: None };
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    StatsRecord { mean: Some(mean), q25: quantile(xs, 0.25), q75: quantile(xs, 0.75) }
}

/// A failed repetition's index and reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub rep: usize,
    pub error: String,
}

/// Whole-run aggregate written to `aggregate.json` and consumed by the
/// report renderer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: String,
    pub dataset: String,
    pub repetitions: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub elbo: StatsRecord,
    pub components: StatsRecord,
    pub failures: Vec<FailureRecord>,
}

// ---------------------------------------------------------------------------
// Atomic file helpers
// ---------------------------------------------------------------------------

/// Writes via a sibling temp file and rename, so readers never observe a
/// half-written file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, &text)
}

// ---------------------------------------------------------------------------
// Method pipelines
// ---------------------------------------------------------------------------

/// Decodes every component mean and writes the covering-number curve of the
/// mixture over the default radius grid.
fn write_persistence(dir: &Path, mix: &Mixture) -> Result<()> {
    let layout = mix.layout;
    let factorizations: Vec<Factorization> = mix
        .components
        .iter()
        .map(|c| layout.decode(&c.mu))
        .collect::<bnmf_core::error::Result<_>>()?;
    let dist = pairwise_wad(&factorizations, ColumnScale::L1)?;
    let curve = persistence_curve(&dist)?;
    fs::write(dir.join("persistence.csv"), persistence_csv(&curve))?;
    Ok(())
}

fn write_mixture(dir: &Path, mix: &Mixture) -> Result<()> {
    fs::write(dir.join("mixture.json"), mixture_to_json(mix))?;
    write_persistence(dir, mix)
}

/// Runs solver restarts and picks the best usable fit: lowest squared error,
/// restricted to fits the model considers feasible (interval noise rejects
/// fits whose worst residual reaches the band edge).
fn best_seed_fit(
    mat: &Materialized,
    n_restarts: usize,
    seed: u64,
    config: &RunConfig,
) -> Result<(Factorization, Vec<LinFit>)> {
    let fits = lin_restarts(&mat.x, mat.spec.r, n_restarts, seed, &config.lin_options())?;
    let mut best: Option<(f64, &LinFit)> = None;
    for fit in &fits {
        let quality = log_joint(&mat.x, &fit.factorization, &mat.spec)?;
        if quality == f64::NEG_INFINITY {
            continue;
        }
        let err = fit.squared_error();
        if best.is_none_or(|(b, _)| err < b) {
            best = Some((err, fit));
        }
    }
    match best {
        Some((_, fit)) => Ok((fit.factorization.clone(), fits)),
        None => Err(anyhow!(
            "none of the {n_restarts} solver fits lies strictly inside the noise band; \
             widen the band or add restarts"
        )),
    }
}

/// Fits the single-component mixture that seeds every online run: the best
/// solver fit, polished under the variational bound.
fn polished_initial(mat: &Materialized, best: Factorization, config: &RunConfig) -> Result<(Mixture, Option<f64>)> {
    let fit = nvi_fit(&mat.x, &mat.spec, 1, NviInit::Replicated(best), &config.nvi_options())?;
    let uniform_sigma2 = if mat.spec.likelihood.is_gaussian() {
        None
    } else {
        Some(fit.mixture.components[0].sigma2)
    };
    Ok((fit.mixture, uniform_sigma2))
}

fn run_lin_restarts(
    mat: &Materialized,
    config: &RunConfig,
    seed: u64,
    dir: &Path,
) -> Result<(Option<f64>, Option<usize>, serde_json::Value)> {
    let fits = lin_restarts(&mat.x, mat.spec.r, config.solver.restarts, seed, &config.lin_options())?;
    #[derive(Serialize)]
    struct RestartRow {
        restart: usize,
        squared_error: f64,
        iterations: usize,
    }
    let rows: Vec<RestartRow> = fits
        .iter()
        .enumerate()
        .map(|(i, f)| RestartRow {
            restart: i,
            squared_error: f.squared_error(),
            iterations: f.iterations,
        })
        .collect();
    write_json(&dir.join("restarts.json"), &rows)?;
    let best = fits
        .iter()
        .min_by(|a, b| a.squared_error().partial_cmp(&b.squared_error()).unwrap())
        .expect("at least one restart");
    fs::write(dir.join("best_a.csv"), matrix_to_csv(&best.factorization.a))?;
    fs::write(dir.join("best_w.csv"), matrix_to_csv(&best.factorization.w))?;
    let detail = serde_json::json!({
        "restarts": fits.len(),
        "best_squared_error": best.squared_error(),
    });
    Ok((None, None, detail))
}

fn run_nvi(
    mat: &Materialized,
    config: &RunConfig,
    seed: u64,
    dir: &Path,
) -> Result<(Option<f64>, Option<usize>, serde_json::Value)> {
    let init = if mat.spec.likelihood.is_gaussian() {
        NviInit::Random { seed }
    } else {
        // Random factors sit far outside a narrow noise band, so the batch
        // fit starts from the best feasible solver fit instead.
        let (best, _) = best_seed_fit(mat, config.solver.restarts, seed, config)?;
        NviInit::Replicated(best)
    };
    let fit = nvi_fit(&mat.x, &mat.spec, config.nvi.m, init, &config.nvi_options())?;
    write_mixture(dir, &fit.mixture)?;
    let detail = serde_json::json!({
        "iterations": fit.iterations,
        "converged": fit.converged,
    });
    Ok((Some(fit.elbo), Some(fit.mixture.len()), detail))
}

fn run_gibbs(
    mat: &Materialized,
    config: &RunConfig,
    seed: u64,
    dir: &Path,
    opts: RunOpts,
) -> Result<(Option<f64>, Option<usize>, serde_json::Value)> {
    let (best, _) = best_seed_fit(mat, config.solver.restarts, seed, config)?;
    let (initial, _) = polished_initial(mat, best, config)?;
    let init_fact = initial.layout.decode(&initial.components[0].mu)?;
    let mut onvi = if opts.raw_chain {
        None
    } else {
        Some(OnviState::new(initial, &mat.x, &mat.spec, config.onvi_criteria(), None)?)
    };

    let mut chain = GibbsChain::new(&mat.x, &mat.spec, init_fact, seed)?;
    let mut trace = String::from("sweep,log_joint\n");
    let mut snapshots = snapshot_header(mat.spec.layout().len());
    for s in 1..=config.gibbs.sweeps {
        chain.sweep()?;
        let f = chain.factorization();
        let lj = log_joint(&mat.x, &f, &mat.spec)?;
        trace.push_str(&format!("{s},{lj}\n"));
        if s.is_multiple_of(config.trace_thin) {
            push_snapshot(&mut snapshots, s, &mat.spec.layout().encode(&f));
        }
        if let Some(onvi) = onvi.as_mut() {
            onvi.propose(&f)?;
        }
    }
    fs::write(dir.join("trace.csv"), trace)?;
    fs::write(dir.join("snapshots.csv"), snapshots)?;

    match onvi {
        Some(onvi) => {
            let mix = onvi.mixture();
            write_mixture(dir, &mix)?;
            let detail = serde_json::json!({
                "sweeps": config.gibbs.sweeps,
                "proposals": onvi.proposals_seen(),
                "accepted": onvi.accepted_count(),
            });
            Ok((Some(onvi.current_elbo()), Some(mix.len()), detail))
        }
        None => {
            let detail = serde_json::json!({ "sweeps": config.gibbs.sweeps });
            Ok((None, None, detail))
        }
    }
}

fn run_hmc(
    mat: &Materialized,
    config: &RunConfig,
    seed: u64,
    dir: &Path,
    opts: RunOpts,
) -> Result<(Option<f64>, Option<usize>, serde_json::Value)> {
    let (best, _) = best_seed_fit(mat, config.solver.restarts, seed, config)?;
    let (initial, uniform_sigma2) = polished_initial(mat, best, config)?;
    let layout = initial.layout;
    let init_fact = layout.decode(&initial.components[0].mu)?;
    let mut onvi = if opts.raw_chain {
        None
    } else {
        Some(OnviState::new(initial, &mat.x, &mat.spec, config.onvi_criteria(), uniform_sigma2)?)
    };

    let mut trace = String::from("sample,log_joint\n");
    let mut snapshots = snapshot_header(layout.len());
    let mut sink_err: Option<anyhow::Error> = None;
    let mut emitted = 0usize;
    let report = hmc_run(
        &mat.x,
        &mat.spec,
        &init_fact,
        config.hmc.iters,
        &config.hmc_options(),
        seed,
        |theta| {
            if sink_err.is_some() {
                return;
            }
            emitted += 1;
            let step = (|| -> Result<()> {
                let f = layout.decode(theta)?;
                let lj = log_joint(&mat.x, &f, &mat.spec)?;
                trace.push_str(&format!("{emitted},{lj}\n"));
                if emitted.is_multiple_of(config.trace_thin) {
                    push_snapshot(&mut snapshots, emitted, theta);
                }
                if let Some(onvi) = onvi.as_mut() {
                    onvi.propose_mu(theta)?;
                }
                Ok(())
            })();
            if let Err(e) = step {
                sink_err = Some(e);
            }
        },
    )?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    fs::write(dir.join("trace.csv"), trace)?;
    fs::write(dir.join("snapshots.csv"), snapshots)?;

    let chain = serde_json::json!({
        "iters": config.hmc.iters,
        "acceptance_rate": report.acceptance_rate,
        "step_size": report.step_size,
        "samples_emitted": report.samples_emitted,
        "warmup_iters": report.warmup_iters,
    });
    match onvi {
        Some(onvi) => {
            let mix = onvi.mixture();
            write_mixture(dir, &mix)?;
            let detail = serde_json::json!({
                "chain": chain,
                "proposals": onvi.proposals_seen(),
                "accepted": onvi.accepted_count(),
            });
            Ok((Some(onvi.current_elbo()), Some(mix.len()), detail))
        }
        None => Ok((None, None, serde_json::json!({ "chain": chain }))),
    }
}

fn run_rrt(
    mat: &Materialized,
    config: &RunConfig,
    seed: u64,
    dir: &Path,
) -> Result<(Option<f64>, Option<usize>, serde_json::Value)> {
    let rrt_cfg = config.rrt_config(&mat.spec, seed);
    let seeded = rrt::seed(&mat.x, &mat.spec, &rrt_cfg)?;

    // The sink's starting component must live in the same candidate family
    // the tree proposes from, or the log-joint bar starts unreachably high.
    // Gaussian runs take the best seed node polished under the variational
    // bound; interval runs keep the first seed node as-is and use the
    // single-component batch fit only for its variance.
    let (initial, uniform_sigma2) = if mat.spec.likelihood.is_gaussian() {
        let best = seeded
            .tree
            .nodes()
            .iter()
            .max_by(|a, b| a.quality.partial_cmp(&b.quality).expect("finite quality"))
            .expect("seeded tree is non-empty")
            .factorization
            .clone();
        polished_initial(mat, best, config)?
    } else {
        let first = seeded.tree.nodes()[0].factorization.clone();
        let (fit, sigma2) = polished_initial(mat, first.clone(), config)?;
        let layout = fit.layout;
        let component = MixtureComponent {
            mu: layout.encode(&first),
            sigma2: sigma2.expect("interval fit carries the fixed variance"),
            weight: 1.0,
        };
        (Mixture::new(vec![component], layout)?, sigma2)
    };
    let mut onvi =
        OnviState::new(initial, &mat.x, &mat.spec, config.onvi_criteria(), uniform_sigma2)?;

    let report = rrt::explore_seeded(&mat.x, &mat.spec, &rrt_cfg, seeded, &mut onvi)?;

    let mut proposals = String::from("proposal,quality,wad_to_nearest_deg,accepted\n");
    for (i, p) in report.proposals.iter().enumerate() {
        let wad = p.wad_to_nearest_deg.map(|d| d.to_string()).unwrap_or_default();
        proposals.push_str(&format!(
            "{},{},{},{}\n",
            i,
            p.quality,
            wad,
            if p.accepted { 1 } else { 0 }
        ));
    }
    fs::write(dir.join("proposals.csv"), proposals)?;

    let mix = onvi.mixture();
    write_mixture(dir, &mix)?;
    let detail = serde_json::json!({
        "termination": match report.termination {
            Termination::ProposalBudget => "proposal_budget",
            Termination::FailedAttempts => "failed_attempts",
        },
        "extends": report.extends,
        "trapped_extends": report.trapped_extends,
        "nodes_final": report.nodes_final,
        "base_nodes_final": report.base_nodes_final,
        "resets": report.resets,
        "min_angle_final_deg": report.min_angle_final_deg,
        "quality_threshold_final": report.quality_threshold_final,
        "proposals": report.proposals.len(),
        "accepted": report.accepted,
    });
    Ok((Some(onvi.current_elbo()), Some(mix.len()), detail))
}

fn snapshot_header(dim: usize) -> String {
    let mut s = String::from("iter");
    for k in 0..dim {
        s.push_str(&format!(",p{k}"));
    }
    s.push('\n');
    s
}

fn push_snapshot(buf: &mut String, iter: usize, theta: &nalgebra::DVector<f64>) {
    buf.push_str(&iter.to_string());
    for v in theta.iter() {
        buf.push_str(&format!(",{v}"));
    }
    buf.push('\n');
}

fn run_method(
    mat: &Materialized,
    config: &RunConfig,
    method: Method,
    seed: u64,
    dir: &Path,
    opts: RunOpts,
) -> Result<(Option<f64>, Option<usize>, serde_json::Value)> {
    match method {
        Method::LinRestarts => run_lin_restarts(mat, config, seed, dir),
        Method::Nvi => run_nvi(mat, config, seed, dir),
        Method::GibbsOnvi => run_gibbs(mat, config, seed, dir, opts),
        Method::HmcOnvi => run_hmc(mat, config, seed, dir, opts),
        Method::RrtOnvi => run_rrt(mat, config, seed, dir),
    }
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

fn run_repetition(
    mat: &Materialized,
    config: &RunConfig,
    method: Method,
    index: usize,
    out: &Path,
    opts: RunOpts,
) -> Result<RepSummary> {
    let seed = config.seed.wrapping_add(index as u64);
    let rep_dir = out.join(format!("rep_{index:03}"));
    let tmp_dir = out.join(format!(".tmp_rep_{index:03}"));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir)?;
    }
    fs::create_dir_all(&tmp_dir)?;

    let outcome = run_method(mat, config, method, seed, &tmp_dir, opts);
    let summary = match outcome {
        Ok((elbo, components, detail)) => RepSummary {
            method: method.name().into(),
            rep: index,
            seed,
            elbo,
            components,
            error: None,
            detail,
        },
        Err(e) => RepSummary {
            method: method.name().into(),
            rep: index,
            seed,
            elbo: None,
            components: None,
            error: Some(format!("{e:#}")),
            detail: serde_json::Value::Null,
        },
    };
    write_json(&tmp_dir.join("summary.json"), &summary)?;
    if rep_dir.exists() {
        fs::remove_dir_all(&rep_dir)?;
    }
    fs::rename(&tmp_dir, &rep_dir)?;
    Ok(summary)
}

/// Executes every repetition of the configured method, writing artifacts
/// under `out`. Individual repetition failures are recorded and do not stop
/// the others; the returned counts drive the process exit code.
pub fn execute(config: &RunConfig, out: &Path, workers: usize, opts: RunOpts) -> Result<RunStats> {
    let method = config.method.ok_or_else(|| {
        anyhow::Error::new(ConfigErrors(vec![
            "method: required (nvi, gibbs_onvi, hmc_onvi, rrt_onvi, or lin_restarts)".into(),
        ]))
    })?;
    let mat = materialize(config)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("config.resolved"), &config.resolved_text())?;
    write_json(&out.join("noise.json"), &mat.noise)?;
    write_atomic(&out.join("x.csv"), &matrix_to_csv(&mat.x))?;

    let workers = workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    let mut summaries: Vec<RepSummary> = pool.install(|| {
        (0..config.repetitions)
            .into_par_iter()
            .map(|i| run_repetition(&mat, config, method, i, out, opts))
            .collect::<Result<Vec<_>>>()
    })?;
    summaries.sort_by_key(|s| s.rep);

    let elbos: Vec<f64> = summaries.iter().filter_map(|s| s.elbo).collect();
    let comps: Vec<f64> = summaries.iter().filter_map(|s| s.components.map(|c| c as f64)).collect();
    let failures: Vec<FailureRecord> = summaries
        .iter()
        .filter_map(|s| s.error.as_ref().map(|e| FailureRecord { rep: s.rep, error: e.clone() }))
        .collect();
    let failed = failures.len();
    let aggregate = AggregateRecord {
        method: method.name().into(),
        dataset: mat.name.clone(),
        repetitions: config.repetitions,
        succeeded: config.repetitions - failed,
        failed,
        elbo: stats(&elbos),
        components: stats(&comps),
        failures,
    };
    write_json(&out.join("aggregate.json"), &aggregate)?;

    Ok(RunStats {
        repetitions: config.repetitions,
        succeeded: config.repetitions - failed,
        failed,
    })
}

// ---------------------------------------------------------------------------
// Dataset generation and SVD utilities
// ---------------------------------------------------------------------------

/// Writes a synthetic dataset (observations, noiseless product, planted
/// factorizations, and a metadata file) to `out`.
pub fn generate(config: &RunConfig, out: &Path) -> Result<()> {
    let ds: Dataset = match &config.dataset {
        DatasetSource::File { .. } => {
            return Err(anyhow::Error::new(ConfigErrors(vec![
                "dataset.kind: generation needs a synthetic source (two_truth or random)".into(),
            ])))
        }
        DatasetSource::TwoTruth { d, n, noise, mix } => {
            let opts = ToyOptions {
                d: *d,
                n: *n,
                noise_eps: *noise,
                mix: *mix,
                ..ToyOptions::default()
            };
            gen_two_truth_toy(&opts, config.seed)?
        }
        DatasetSource::Random { d, n, noise } => {
            gen_gaussian_toy(*d, *n, config.rank, *noise, config.seed)?
        }
    };
    fs::create_dir_all(out)?;
    write_atomic(&out.join("x.csv"), &matrix_to_csv(&ds.x))?;
    write_atomic(&out.join("clean.csv"), &matrix_to_csv(&ds.clean))?;
    for (k, truth) in ds.ground_truths.iter().enumerate() {
        write_atomic(&out.join(format!("truth_{k}_a.csv")), &matrix_to_csv(&truth.a))?;
        write_atomic(&out.join(format!("truth_{k}_w.csv")), &matrix_to_csv(&truth.w))?;
    }
    let meta = serde_json::json!({
        "name": ds.name,
        "d": ds.x.nrows(),
        "n": ds.x.ncols(),
        "rank": ds.r,
        "planted_factorizations": ds.ground_truths.len(),
        "seed": config.seed,
    });
    write_json(&out.join("meta.json"), &meta)?;
    Ok(())
}

/// Computes the rank-R truncated SVD of the dataset and writes both factors
/// plus the reconstruction error.
pub fn svd_out(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    let raw = load_data(config)?;
    let pair = truncated_svd(&raw.x, config.rank)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("a_svd.csv"), &matrix_to_csv(&pair.a_svd))?;
    write_atomic(&out.join("w_svd.csv"), &matrix_to_csv(&pair.w_svd))?;
    let recon = (&raw.x - &pair.a_svd * &pair.w_svd).norm();
    let meta = serde_json::json!({
        "name": raw.name,
        "rank": config.rank,
        "reconstruction_frobenius": recon,
    });
    write_json(&out.join("svd.json"), &meta)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_linearly() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        // Sorted: 1,2,3,4; rank(0.25) = 0.75 → 1.75, rank(0.75) = 2.25 → 3.25.
        assert_eq!(quantile(&xs, 0.25), Some(1.75));
        assert_eq!(quantile(&xs, 0.75), Some(3.25));
        assert_eq!(quantile(&xs, 0.0), Some(1.0));
        assert_eq!(quantile(&xs, 1.0), Some(4.0));
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(quantile(&[7.0], 0.25), Some(7.0));
    }

    #[test]
    fn stats_of_empty_sample_are_absent() {
        let s = stats(&[]);
        assert!(s.mean.is_none() && s.q25.is_none() && s.q75.is_none());
        let s = stats(&[2.0, 4.0]);
        assert_eq!(s.mean, Some(3.0));
    }
}
