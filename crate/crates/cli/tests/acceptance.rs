//! Behavioral acceptance checks for the whole system, one test per
//! criterion. Each test prints a single `criterion NN: PASS/FAIL` line
//! (visible with `--nocapture`, and in the captured output on failure).
//!
//! Tolerances are pinned as constants next to the criteria that use them.

use std::fs;
use std::path::Path;
use std::time::Instant;

use bnmf_cli::config::RunConfig;
use bnmf_cli::run::{self, RunOpts};
use bnmf_core::data::gen_gaussian_toy;
use bnmf_core::manifold::{factorization_to_q, q_to_factorization, sample_uniform, step};
use bnmf_core::metrics::{covering_number, pairwise_wad, persistence_curve, wad, ColumnScale};
use bnmf_core::model::{
    grad_log_joint, hessian_trace, log_joint, optimize_scale, Factorization, Likelihood,
    ModelSpec, ParamLayout, ScaleObjective,
};
use bnmf_core::nmf::{empirical_noise_from_fits, lin_restarts, truncated_svd, LinOptions, SigmaSource};
use bnmf_core::samplers::{hmc_run, sample_truncated_normal, GibbsChain, HmcOptions};
use bnmf_core::vi::{
    entropy_lower_bound, mixture_from_json, second_order_expectation, Mixture, MixtureComponent,
};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Angular scale (degrees) at which mode separation and coverage are judged.
const SEPARATION_DEG: f64 = 0.01;
/// Seeds for the multi-seed experiments, and how many must pass.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_PASSING_SEEDS: usize = 4;
/// Per-method and total wall-clock budgets (seconds).
const BUDGET_PER_METHOD: f64 = 600.0;
const BUDGET_DOMINANCE_TOTAL: f64 = 900.0;
/// Relative slack for the bound-dominance comparison.
const DOMINANCE_REL_SLACK: f64 = 1e-3;
/// Entropy-bound validity: Monte-Carlo sample count and the z-multiple.
const ENTROPY_MC_SAMPLES: usize = 1_000_000;
const ENTROPY_Z: f64 = 3.0;
const ENTROPY_CLOSED_FORM_TOL: f64 = 1e-9;
/// Quadratic-expectation exactness.
const QUADRATIC_REL_TOL: f64 = 1e-10;
/// Derivative checks.
const GRAD_REL_TOL: f64 = 1e-6;
const TRACE_REL_TOL: f64 = 1e-4;
/// Scale-optimum grid: 1000 log-spaced points spanning [1e-3, 1e3].
const SCALE_GRID_POINTS: usize = 1000;
const SCALE_GRID_LO: f64 = 1e-3;
const SCALE_GRID_HI: f64 = 1e3;
/// Sampler checks.
const TN_DRAWS: usize = 1_000_000;
const TN_MOMENT_REL_TOL: f64 = 0.01;
const TN_MEANS: [f64; 5] = [-10.0, -1.0, 0.0, 1.0, 5.0];
const GIBBS_TV_TOL: f64 = 0.02;
const HMC_MOMENT_Z: f64 = 3.0;
const HMC_ACCEPT_RANGE: (f64, f64) = (0.55, 0.75);
/// Metric and manifold integrity.
const WAD_INVARIANCE_TOL: f64 = 1e-9;
const COVER_GREEDY_FACTOR: usize = 2;
const MANIFOLD_DRIFT_TOL: f64 = 1e-9;
const ROUND_TRIP_TOL: f64 = 1e-8;

fn verdict(tag: &str, pass: bool, detail: &str) {
    println!("criterion {tag}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {tag} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Experiment drivers (criteria 1–3, 10)
// ---------------------------------------------------------------------------

fn two_truth_config(likelihood: &str, noise_key: &str, seed: u64) -> String {
    format!(
        "dataset.kind = two_truth\ndataset.d = 60\ndataset.n = 60\ndataset.noise = 0.01\n\
         rank = 3\nlikelihood.kind = {likelihood}\n{noise_key} = empirical\n\
         repetitions = 1\nseed = {seed}\n"
    )
}

fn random_config(seed: u64, extra: &str) -> String {
    format!(
        "dataset.kind = random\ndataset.d = 30\ndataset.n = 40\ndataset.noise = 0.05\n\
         rank = 3\nlikelihood.kind = gaussian\nlikelihood.sigma2 = empirical\n\
         repetitions = 1\nseed = {seed}\n{extra}"
    )
}

/// Runs one method config to completion, returning the repetition summary.
fn run_to_summary(out: &Path, method: &str, text: &str) -> serde_json::Value {
    let text = format!("{text}method = {method}\n");
    let config = RunConfig::from_text(&text, &[]).expect("config parses");
    let stats = run::execute(&config, out, 1, RunOpts::default()).expect("pipeline runs");
    assert_eq!(stats.failed, 0, "{method} repetitions failed");
    let raw = fs::read_to_string(out.join("rep_000/summary.json")).expect("summary written");
    serde_json::from_str(&raw).expect("summary parses")
}

/// Final-mixture shape: component count, minimum pairwise angle (degrees),
/// and covering number at [`SEPARATION_DEG`].
fn mixture_shape(out: &Path) -> (usize, f64, usize) {
    let raw = fs::read_to_string(out.join("rep_000/mixture.json")).expect("mixture written");
    let mix = mixture_from_json(&raw).expect("mixture parses");
    let decoded: Vec<Factorization> = mix
        .components
        .iter()
        .map(|c| mix.layout.decode(&c.mu).expect("mean decodes"))
        .collect();
    let dist = pairwise_wad(&decoded, ColumnScale::L1).expect("pairwise distances");
    let mut min_off = f64::INFINITY;
    for i in 0..decoded.len() {
        for j in (i + 1)..decoded.len() {
            min_off = min_off.min(dist[(i, j)]);
        }
    }
    let cover = covering_number(&dist, SEPARATION_DEG).expect("covering number");
    (mix.len(), min_off, cover)
}

#[test]
fn criterion_01_interval_search_separates_modes_where_single_chains_do_not() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut passing = 0usize;
    let mut lines = Vec::new();
    let mut method_secs: [f64; 3] = [0.0; 3];

    for &seed in &SEEDS {
        let cfg = two_truth_config("uniform", "likelihood.eps", seed);
        let dir = tmp.path().join(format!("s{seed}"));

        let t = Instant::now();
        run_to_summary(&dir.join("rrt"), "rrt_onvi", &cfg);
        method_secs[0] += t.elapsed().as_secs_f64();
        let (tree_comps, tree_min_angle, tree_cover) = mixture_shape(&dir.join("rrt"));

        let t = Instant::now();
        run_to_summary(&dir.join("hmc"), "hmc_onvi", &cfg);
        method_secs[1] += t.elapsed().as_secs_f64();
        let (_, _, hmc_cover) = mixture_shape(&dir.join("hmc"));

        let t = Instant::now();
        run_to_summary(&dir.join("nvi"), "nvi", &cfg);
        method_secs[2] += t.elapsed().as_secs_f64();
        let (_, _, nvi_cover) = mixture_shape(&dir.join("nvi"));

        let ok = tree_comps >= 2
            && tree_min_angle > SEPARATION_DEG
            && tree_cover > 1
            && hmc_cover == 1
            && nvi_cover == 1;
        passing += ok as usize;
        lines.push(format!(
            "seed {seed}: tree {tree_comps} comps, min angle {tree_min_angle:.3} deg, \
             cover {tree_cover}; hmc cover {hmc_cover}; nvi cover {nvi_cover} -> {}",
            if ok { "ok" } else { "MISS" }
        ));
    }

    let within_budget = method_secs.iter().all(|&s| s < BUDGET_PER_METHOD);
    verdict(
        "01",
        passing >= MIN_PASSING_SEEDS && within_budget,
        &format!(
            "{passing}/{} seeds ({}); method seconds {:.0}/{:.0}/{:.0}",
            SEEDS.len(),
            lines.join(" | "),
            method_secs[0],
            method_secs[1],
            method_secs[2]
        ),
    );
}

#[test]
fn criterion_02_tree_guided_mixture_dominates_every_baseline_bound() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let methods: [(&str, &str, &str); 5] = [
        ("rrt", "rrt_onvi", ""),
        ("nvi4", "nvi", "nvi.m = 4\n"),
        ("nvi10", "nvi", "nvi.m = 10\n"),
        ("gibbs", "gibbs_onvi", ""),
        ("hmc", "hmc_onvi", ""),
    ];

    let mut means = [0.0f64; 5];
    for (mi, (label, method, extra)) in methods.iter().enumerate() {
        let mut total = 0.0;
        for &seed in &SEEDS {
            let out = tmp.path().join(format!("{label}-s{seed}"));
            let summary = run_to_summary(&out, method, &random_config(seed, extra));
            total += summary["elbo"].as_f64().expect("finite bound");
        }
        means[mi] = total / SEEDS.len() as f64;
    }

    let tree_mean = means[0];
    let best_baseline = means[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let slack = DOMINANCE_REL_SLACK * tree_mean.abs();
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "02",
        tree_mean >= best_baseline - slack && elapsed < BUDGET_DOMINANCE_TOTAL,
        &format!(
            "tree {tree_mean:.4} vs best baseline {best_baseline:.4} \
             (slack {slack:.4}, means rrt/nvi4/nvi10/gibbs/hmc = {means:.4?}), {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_03_gaussian_search_collapses_to_one_component() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let synthetic = run_to_summary(
        &tmp.path().join("two-truth"),
        "rrt_onvi",
        &two_truth_config("gaussian", "likelihood.sigma2", 0),
    );
    let random = run_to_summary(&tmp.path().join("random"), "rrt_onvi", &random_config(0, ""));

    let synth_comps = synthetic["components"].as_u64().expect("count");
    let random_comps = random["components"].as_u64().expect("count");
    verdict(
        "03",
        synth_comps == 1 && random_comps == 1,
        &format!("components: two-truth {synth_comps}, random {random_comps}"),
    );
}

// ---------------------------------------------------------------------------
// Mixture-bound properties (criteria 4–5)
// ---------------------------------------------------------------------------

/// Layout whose only role is to fix the flattened dimension.
fn layout_of_dim(dim: usize) -> ParamLayout {
    ParamLayout { d: dim - 1, n: 1, r: 1 }
}

fn random_mixture(rng: &mut ChaCha8Rng, dim: usize, m: usize) -> Mixture {
    let mut weights: Vec<f64> = (0..m).map(|_| -rng.gen::<f64>().ln()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let components = weights
        .into_iter()
        .map(|weight| MixtureComponent {
            mu: DVector::from_fn(dim, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal)),
            sigma2: rng.gen_range(0.25..2.0),
            weight,
        })
        .collect();
    Mixture::new(components, layout_of_dim(dim)).expect("valid mixture")
}

fn log_mixture_density(mix: &Mixture, x: &DVector<f64>) -> f64 {
    let d = mix.dim() as f64;
    let mut best = f64::NEG_INFINITY;
    let terms: Vec<f64> = mix
        .components
        .iter()
        .map(|c| {
            let t = c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * c.sigma2).ln()
                - (x - &c.mu).norm_squared() / (2.0 * c.sigma2);
            best = best.max(t);
            t
        })
        .collect();
    best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
}

#[test]
fn criterion_04_entropy_bound_stays_below_monte_carlo_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_margin = f64::INFINITY;
    let mut checked = 0usize;

    'outer: for round in 0.. {
        for &dim in &[2usize, 5, 10] {
            for m in 1..=5usize {
                if checked == 50 {
                    break 'outer;
                }
                let mix = random_mixture(&mut rng, dim, m);
                let bound = entropy_lower_bound(&mix);

                // Monte-Carlo entropy of the mixture itself.
                let cumulative: Vec<f64> = mix
                    .components
                    .iter()
                    .scan(0.0, |acc, c| {
                        *acc += c.weight;
                        Some(*acc)
                    })
                    .collect();
                let (mut sum, mut sumsq) = (0.0, 0.0);
                for _ in 0..ENTROPY_MC_SAMPLES {
                    let u: f64 = rng.gen();
                    let k = cumulative.iter().position(|&c| u <= c).unwrap_or(m - 1);
                    let c = &mix.components[k];
                    let x = DVector::from_fn(dim, |i, _| {
                        c.mu[i] + c.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
                    });
                    let neg_log_q = -log_mixture_density(&mix, &x);
                    sum += neg_log_q;
                    sumsq += neg_log_q * neg_log_q;
                }
                let n = ENTROPY_MC_SAMPLES as f64;
                let mc = sum / n;
                let se = ((sumsq / n - mc * mc).max(0.0) / n).sqrt();
                let margin = mc + ENTROPY_Z * se - bound;
                worst_margin = worst_margin.min(margin);
                assert!(
                    margin >= 0.0,
                    "bound {bound} exceeds MC entropy {mc} + {ENTROPY_Z}se ({se}) \
                     at dim {dim}, {m} components, round {round}"
                );
                checked += 1;
            }
        }
    }

    // Single-component closed form: (d/2)·ln(4π σ²).
    let mut closed_err = 0.0f64;
    for &dim in &[2usize, 5, 10] {
        for &sigma2 in &[0.3, 1.0, 4.2] {
            let mix = Mixture::new(
                vec![MixtureComponent {
                    mu: DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)),
                    sigma2,
                    weight: 1.0,
                }],
                layout_of_dim(dim),
            )
            .expect("valid mixture");
            let exact = 0.5 * dim as f64 * (4.0 * std::f64::consts::PI * sigma2).ln();
            closed_err = closed_err.max((entropy_lower_bound(&mix) - exact).abs());
        }
    }

    verdict(
        "04",
        checked == 50 && closed_err < ENTROPY_CLOSED_FORM_TOL,
        &format!(
            "50 mixtures valid (worst slack {worst_margin:.5} nats), \
             single-component closed-form error {closed_err:.2e}"
        ),
    );
}

#[test]
fn criterion_05_second_order_expectation_is_exact_on_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut worst_rel = 0.0f64;

    for i in 0..20 {
        let dim = [3usize, 6][i % 2];
        let m = 1 + i % 5;
        let mix = random_mixture(&mut rng, dim, m);

        let g = DMatrix::from_fn(dim, dim, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let h = &g + g.transpose();
        let lin = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let offset = 10.0 + rng.gen::<f64>();
        let trace_h = h.trace();

        let approx = second_order_expectation(
            &mix,
            |mu| offset + lin.dot(mu) + 0.5 * (mu.transpose() * &h * mu)[(0, 0)],
            |_| trace_h,
        );

        // Exact Gaussian moment: E[θᵀHθ] = μᵀHμ + σ²·Tr(H) per component.
        let exact: f64 = mix
            .components
            .iter()
            .map(|c| {
                let quad = (c.mu.transpose() * &h * &c.mu)[(0, 0)];
                c.weight * (offset + lin.dot(&c.mu) + 0.5 * (quad + c.sigma2 * trace_h))
            })
            .sum();

        worst_rel = worst_rel.max((approx - exact).abs() / exact.abs());
    }

    verdict(
        "05",
        worst_rel < QUADRATIC_REL_TOL,
        &format!("worst relative error {worst_rel:.2e} over 20 mixtures"),
    );
}

// ---------------------------------------------------------------------------
// Derivatives and the scale optimum (criterion 6)
// ---------------------------------------------------------------------------

fn random_instance(rng: &mut ChaCha8Rng, d: usize, n: usize, r: usize) -> (DMatrix<f64>, ModelSpec) {
    let a = DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.2..1.2));
    let w = DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.2..1.2));
    let x = (&a * &w).map(|v| (v + 0.3 * rng.sample::<f64, _>(StandardNormal)).max(0.0));
    let spec = ModelSpec::new(d, n, r, Likelihood::Gaussian { sigma2: 0.49 }).expect("spec");
    (x, spec)
}

#[test]
fn criterion_06_derivatives_match_finite_differences_and_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (d, n, r) = (8usize, 9usize, 3usize);
    let (x, spec) = random_instance(&mut rng, d, n, r);

    // Gradient against central differences at 20 random interior points.
    let mut worst_grad_rel = 0.0f64;
    for _ in 0..20 {
        let f = Factorization::new(
            DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.2..1.5)),
            DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.2..1.5)),
        )
        .expect("factorization");
        let (ga, gw) = grad_log_joint(&x, &f, &spec).expect("gradient");

        let h = 1e-5;
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        let probe = |fa: &DMatrix<f64>, fw: &DMatrix<f64>| {
            log_joint(&x, &Factorization { a: fa.clone(), w: fw.clone() }, &spec).expect("joint")
        };
        for i in 0..d {
            for j in 0..r {
                let (mut up, mut dn) = (f.a.clone(), f.a.clone());
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                let fd = (probe(&up, &f.w) - probe(&dn, &f.w)) / (2.0 * h);
                err2 += (fd - ga[(i, j)]).powi(2);
                norm2 += ga[(i, j)].powi(2);
            }
        }
        for i in 0..r {
            for j in 0..n {
                let (mut up, mut dn) = (f.w.clone(), f.w.clone());
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                let fd = (probe(&f.a, &up) - probe(&f.a, &dn)) / (2.0 * h);
                err2 += (fd - gw[(i, j)]).powi(2);
                norm2 += gw[(i, j)].powi(2);
            }
        }
        worst_grad_rel = worst_grad_rel.max((err2 / norm2).sqrt());
    }

    // Likelihood Hessian trace against diagonal second differences. The
    // log joint is exactly quadratic in each single coordinate, so the
    // second difference carries no truncation error.
    let mut worst_trace_rel = 0.0f64;
    for _ in 0..10 {
        let (x, spec) = random_instance(&mut rng, d, n, r);
        let f = Factorization::new(
            DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.2..1.5)),
            DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.2..1.5)),
        )
        .expect("factorization");
        let analytic = hessian_trace(&f, &spec).expect("trace");

        let h = 5e-4;
        let f0 = log_joint(&x, &f, &spec).expect("joint");
        let mut fd_trace = 0.0;
        for i in 0..d {
            for j in 0..r {
                let (mut up, mut dn) = (f.a.clone(), f.a.clone());
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                let fu = log_joint(&x, &Factorization { a: up, w: f.w.clone() }, &spec).unwrap();
                let fd = log_joint(&x, &Factorization { a: dn, w: f.w.clone() }, &spec).unwrap();
                fd_trace += (fu - 2.0 * f0 + fd) / (h * h);
            }
        }
        for i in 0..r {
            for j in 0..n {
                let (mut up, mut dn) = (f.w.clone(), f.w.clone());
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                let fu = log_joint(&x, &Factorization { a: f.a.clone(), w: up }, &spec).unwrap();
                let fd = log_joint(&x, &Factorization { a: f.a.clone(), w: dn }, &spec).unwrap();
                fd_trace += (fu - 2.0 * f0 + fd) / (h * h);
            }
        }
        worst_trace_rel = worst_trace_rel.max((fd_trace - analytic).abs() / analytic.abs());
    }

    // Scale optimum against a 1000-point log-spaced grid, for both
    // objective conventions.
    let cell = (SCALE_GRID_HI / SCALE_GRID_LO).ln() / (SCALE_GRID_POINTS - 1) as f64;
    let mut worst_cells = 0.0f64;
    for _ in 0..10 {
        let f = Factorization::new(
            DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.2..1.5)),
            DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.2..1.5)),
        )
        .expect("factorization");
        let col_norms: Vec<f64> = (0..r).map(|k| f.a.column(k).norm()).collect();
        let t: f64 = col_norms
            .iter()
            .enumerate()
            .map(|(k, &c)| c * c * f.w.row(k).norm_squared())
            .sum();

        let rescaled_at = |beta: f64| {
            let mut a = f.a.clone();
            let mut w = f.w.clone();
            for (k, &c) in col_norms.iter().enumerate() {
                a.column_mut(k).scale_mut(beta / c);
                w.row_mut(k).scale_mut(c / beta);
            }
            Factorization { a, w }
        };

        for objective in [ScaleObjective::AsDisplayed, ScaleObjective::BetaSquared] {
            let beta = optimize_scale(&f, objective).expect("scale").beta;
            let mut best = f64::NEG_INFINITY;
            let mut best_ln = f64::NAN;
            for i in 0..SCALE_GRID_POINTS {
                let ln_b = SCALE_GRID_LO.ln() + cell * i as f64;
                let b = ln_b.exp();
                let value = match objective {
                    ScaleObjective::AsDisplayed => {
                        -(b * (n * r) as f64 + d as f64 * t / b)
                    }
                    // The literal curvature of the rescaled pair.
                    ScaleObjective::BetaSquared => {
                        hessian_trace(&rescaled_at(b), &spec).expect("trace")
                    }
                };
                if value > best {
                    best = value;
                    best_ln = ln_b;
                }
            }
            worst_cells = worst_cells.max((beta.ln() - best_ln).abs() / cell);
        }
    }

    verdict(
        "06",
        worst_grad_rel < GRAD_REL_TOL
            && worst_trace_rel < TRACE_REL_TOL
            && worst_cells <= 1.0,
        &format!(
            "gradient rel {worst_grad_rel:.2e}, trace rel {worst_trace_rel:.2e}, \
             scale optimum within {worst_cells:.2} grid cells"
        ),
    );
}

// ---------------------------------------------------------------------------
// Sampler correctness (criterion 7)
// ---------------------------------------------------------------------------

/// Mean and variance of a normal truncated to `[0, ∞)`, by Simpson
/// quadrature — independent of any sampler internals or CDF library.
fn tn_moments(mean: f64, var: f64) -> (f64, f64) {
    let sigma = var.sqrt();
    let hi = (mean + 12.0 * sigma).max(12.0 * sigma);
    let steps = 400_000usize;
    let h = hi / steps as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=steps {
        let x = i as f64 * h;
        let weight = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = weight * (-0.5 * (x - mean) * (x - mean) / var).exp();
        z += f;
        m1 += f * x;
        m2 += f * x * x;
    }
    let m1 = m1 / z;
    let m2 = m2 / z;
    (m1, m2 - m1 * m1)
}

#[test]
fn criterion_07_samplers_reproduce_their_target_distributions() {
    // (a) Truncated-normal moments across easy and far-tail means.
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut worst_tn_rel = 0.0f64;
    for &mean in &TN_MEANS {
        let (em, ev) = tn_moments(mean, 1.0);
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..TN_DRAWS {
            let v = sample_truncated_normal(&mut rng, mean, 1.0).expect("draw");
            sum += v;
            sumsq += v * v;
        }
        let n = TN_DRAWS as f64;
        let sm = sum / n;
        let sv = sumsq / n - sm * sm;
        worst_tn_rel = worst_tn_rel.max((sm - em).abs() / em.abs());
        worst_tn_rel = worst_tn_rel.max((sv - ev).abs() / ev.abs());
    }

    // (b) Scalar Gibbs chain against the quadrature-normalized posterior of
    // the 1×1×1 model, in total variation over a 100-bin histogram.
    let x_val = 1.0;
    let sigma2 = 0.5;
    let x = DMatrix::from_element(1, 1, x_val);
    let spec = ModelSpec::new(1, 1, 1, Likelihood::Gaussian { sigma2 }).expect("spec");
    let init = Factorization::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
    )
    .expect("factorization");
    let mut chain = GibbsChain::new(&x, &spec, init, 11).expect("chain");

    let bins = 100usize;
    let hi = 6.0;
    // Marginal of `a`: integrate exp(-(x-aw)²/2σ² - a - w) over w per bin.
    let mut truth = vec![0.0f64; bins];
    let grid = 800usize;
    let (ha, hw) = (hi / bins as f64, 8.0 / grid as f64);
    for (bi, p) in truth.iter_mut().enumerate() {
        for sub in 0..4 {
            let a = (bi as f64 + (sub as f64 + 0.5) / 4.0) * ha;
            let mut inner = 0.0;
            for wi in 0..=grid {
                let w = wi as f64 * hw;
                let resid = x_val - a * w;
                let f = (-0.5 * resid * resid / sigma2 - a - w).exp();
                inner += if wi == 0 || wi == grid { 0.5 * f } else { f };
            }
            *p += inner;
        }
    }
    let total: f64 = truth.iter().sum();
    truth.iter_mut().for_each(|p| *p /= total);

    for _ in 0..5_000 {
        chain.sweep().expect("burn-in sweep");
    }
    let sweeps = 600_000usize;
    let mut counts = vec![0u64; bins];
    for _ in 0..sweeps {
        chain.sweep().expect("sweep");
        let v = chain.factorization().a[(0, 0)];
        let b = (v / hi * bins as f64) as usize;
        if b < bins {
            counts[b] += 1;
        }
    }
    let tv: f64 = counts
        .iter()
        .zip(truth.iter())
        .map(|(&c, &p)| (c as f64 / sweeps as f64 - p).abs())
        .sum::<f64>()
        / 2.0;

    // (c) HMC on the bare exponential prior (interval half-width so large
    // the likelihood never binds): coordinate moments of Exp(1).
    let spec_prior =
        ModelSpec::new(2, 2, 1, Likelihood::Uniform { eps: 1e6 }).expect("spec");
    let x_prior = DMatrix::from_element(2, 2, 0.5);
    let init = Factorization::new(
        DMatrix::from_element(2, 1, 1.0),
        DMatrix::from_element(1, 2, 1.0),
    )
    .expect("factorization");
    let mut draws_m1 = Vec::new();
    let mut draws_m2 = Vec::new();
    hmc_run(&x_prior, &spec_prior, &init, 50_000, &HmcOptions::default(), 29, |theta| {
        let m1 = theta.iter().sum::<f64>() / theta.len() as f64;
        let m2 = theta.iter().map(|v| v * v).sum::<f64>() / theta.len() as f64;
        draws_m1.push(m1);
        draws_m2.push(m2);
    })
    .expect("prior chain");
    // Batch-means standard errors absorb the chain's autocorrelation.
    let batch_se = |xs: &[f64]| {
        let b = 100usize;
        let len = xs.len() / b;
        let means: Vec<f64> =
            (0..b).map(|i| xs[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64).collect();
        let grand = means.iter().sum::<f64>() / b as f64;
        let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (b - 1) as f64;
        (grand, (var / b as f64).sqrt())
    };
    let (mean1, se1) = batch_se(&draws_m1);
    let (mean2, se2) = batch_se(&draws_m2);
    let prior_ok =
        (mean1 - 1.0).abs() <= HMC_MOMENT_Z * se1 && (mean2 - 2.0).abs() <= HMC_MOMENT_Z * se2;

    // (d) Post-adaptation acceptance on a Gaussian instance at its
    // empirically calibrated noise floor.
    let toy = gen_gaussian_toy(30, 40, 3, 0.05, 0).expect("dataset");
    let fits = lin_restarts(&toy.x, 3, 10, 0, &LinOptions::default()).expect("restarts");
    let noise = empirical_noise_from_fits(&toy.x, &fits, SigmaSource::FirstFit);
    let spec_g = ModelSpec::new(30, 40, 3, Likelihood::Gaussian { sigma2: noise.sigma2 })
        .expect("spec");
    let best = fits
        .iter()
        .min_by(|a, b| a.squared_error().partial_cmp(&b.squared_error()).expect("finite"))
        .expect("fits")
        .factorization
        .clone();
    let report = hmc_run(&toy.x, &spec_g, &best, 10_000, &HmcOptions::default(), 0, |_| {})
        .expect("gaussian chain");
    let accept_ok =
        report.acceptance_rate >= HMC_ACCEPT_RANGE.0 && report.acceptance_rate <= HMC_ACCEPT_RANGE.1;

    verdict(
        "07",
        worst_tn_rel < TN_MOMENT_REL_TOL && tv < GIBBS_TV_TOL && prior_ok && accept_ok,
        &format!(
            "truncated-normal rel {worst_tn_rel:.4}; Gibbs TV {tv:.4}; prior moments \
             {mean1:.3}±{se1:.3}/{mean2:.3}±{se2:.3}; acceptance {:.3}",
            report.acceptance_rate
        ),
    );
}

// ---------------------------------------------------------------------------
// Metric properties (criterion 8)
// ---------------------------------------------------------------------------

fn random_factorization(rng: &mut ChaCha8Rng, d: usize, n: usize, r: usize) -> Factorization {
    Factorization::new(
        DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.05..1.0)),
        DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.05..1.0)),
    )
    .expect("factorization")
}

/// Exact minimum number of sample-centred balls of `radius` covering all
/// samples, by subset enumeration (feasible for n ≤ 10).
fn brute_force_cover(dist: &DMatrix<f64>, radius: f64) -> usize {
    let n = dist.nrows();
    for size in 1..=n {
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let covered = (0..n).all(|i| {
                (0..n).any(|c| mask & (1 << c) != 0 && dist[(i, c)] <= radius)
            });
            if covered {
                return size;
            }
        }
    }
    n
}

#[test]
fn criterion_08_angular_distance_and_coverage_behave_as_a_metric_summary() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let (d, n, r) = (6usize, 7usize, 2usize);

    // Self-distance, bounds, and invariance under the factorization's
    // symmetries: column permutation plus positive rescaling.
    let mut worst_self = 0.0f64;
    let mut worst_invariance = 0.0f64;
    let mut range_ok = true;
    for _ in 0..50 {
        let f = random_factorization(&mut rng, d, n, r);
        worst_self = worst_self.max(wad(&f, &f, ColumnScale::L1).expect("distance"));

        let perm: Vec<usize> = if rng.gen() { vec![1, 0] } else { vec![0, 1] };
        let scales: Vec<f64> = (0..r).map(|_| rng.gen_range(0.1..10.0)).collect();
        let mut a2 = DMatrix::zeros(d, r);
        let mut w2 = DMatrix::zeros(r, n);
        for (k_new, &k_old) in perm.iter().enumerate() {
            a2.set_column(k_new, &(f.a.column(k_old) * scales[k_old]));
            w2.set_row(k_new, &(f.w.row(k_old) / scales[k_old]));
        }
        let g = Factorization::new(a2, w2).expect("rescaled");
        worst_invariance = worst_invariance.max(wad(&f, &g, ColumnScale::L1).expect("distance"));

        let other = random_factorization(&mut rng, d, n, r);
        let v = wad(&f, &other, ColumnScale::L1).expect("distance");
        range_ok &= (0.0..=90.0).contains(&v);
    }

    // Greedy covering number within a factor of the exact optimum.
    let mut greedy_ok = true;
    for i in 0..50 {
        let count = 2 + i % 9;
        let samples: Vec<Factorization> =
            (0..count).map(|_| random_factorization(&mut rng, d, n, r)).collect();
        let dist = pairwise_wad(&samples, ColumnScale::L1).expect("distances");
        let mut offs: Vec<f64> = Vec::new();
        for a in 0..count {
            for b in (a + 1)..count {
                offs.push(dist[(a, b)]);
            }
        }
        offs.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
        let radius = offs[offs.len() / 2];
        let greedy = covering_number(&dist, radius).expect("cover");
        let exact = brute_force_cover(&dist, radius);
        greedy_ok &= greedy <= COVER_GREEDY_FACTOR * exact;
    }

    // Persistence counts never increase with the radius.
    let samples: Vec<Factorization> =
        (0..8).map(|_| random_factorization(&mut rng, d, n, r)).collect();
    let dist = pairwise_wad(&samples, ColumnScale::L1).expect("distances");
    let curve = persistence_curve(&dist).expect("curve");
    let monotone = curve.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 >= w[1].1);

    verdict(
        "08",
        worst_self == 0.0
            && worst_invariance < WAD_INVARIANCE_TOL
            && range_ok
            && greedy_ok
            && monotone,
        &format!(
            "self {worst_self:.1e}, invariance {worst_invariance:.1e}, ranges ok: {range_ok}, \
             greedy within {COVER_GREEDY_FACTOR}x: {greedy_ok}, persistence monotone: {monotone}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Manifold integrity (criterion 9)
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_manifold_steps_and_embeddings_are_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);

    // Norm drift over a long chain of interpolation steps.
    let mut q = sample_uniform(4, &mut rng).expect("start point");
    for _ in 0..10_000 {
        let target = sample_uniform(4, &mut rng).expect("target");
        q = step(&q, &target, 0.01).expect("step");
    }
    let drift = (0..4)
        .map(|j| (q.matrix().column(j).norm() - 1.0).abs())
        .fold(0.0f64, f64::max);

    // Round trip through the subspace embedding on an exact, clip-free
    // instance: unit-column A, strictly positive factors, X = A·W exactly.
    let (d, n, r) = (20usize, 20usize, 3usize);
    let mut a = DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.1..1.0));
    let mut w = DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.1..1.0));
    for i in 0..d {
        a[(i, i % r)] += 2.0;
    }
    for j in 0..n {
        w[(j % r, j)] += 2.0;
    }
    for k in 0..r {
        let norm = a.column(k).norm();
        a.column_mut(k).scale_mut(1.0 / norm);
        w.row_mut(k).scale_mut(norm);
    }
    let f0 = Factorization::new(a, w).expect("planted factorization");
    let x = f0.product();
    let svd = truncated_svd(&x, r).expect("svd");

    // Q → factorization → Q must return to the same manifold point; the
    // factorization leg reproduces the planted product and angles exactly
    // (entries only up to the unit-column scale convention).
    let q0 = factorization_to_q(&f0, &svd).expect("embedding");
    let f1 = q_to_factorization(&q0, &svd).expect("projection");
    let q1 = factorization_to_q(&f1, &svd).expect("re-embedding");
    let q_err = (q1.matrix() - q0.matrix()).norm();
    let product_err = (f1.product() - f0.product()).norm() / f0.product().norm();
    let angle_err = wad(&f0, &f1, ColumnScale::L1).expect("distance");
    let clip_free = f1.a.iter().chain(f1.w.iter()).all(|&v| v > 0.0);

    verdict(
        "09",
        drift < MANIFOLD_DRIFT_TOL
            && q_err < ROUND_TRIP_TOL
            && product_err < ROUND_TRIP_TOL
            && angle_err < ROUND_TRIP_TOL
            && clip_free,
        &format!(
            "norm drift {drift:.2e} after 10,000 steps; round trip: embedding {q_err:.2e}, \
             product {product_err:.2e}, angles {angle_err:.2e} deg, clip-free: {clip_free}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Reproducibility (criterion 10)
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_identical_runs_render_identical_report_tables() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tmp.path().join("run.conf");
    fs::write(
        &config,
        "dataset.kind = random\ndataset.d = 15\ndataset.n = 18\ndataset.noise = 0.05\n\
         rank = 2\nlikelihood.kind = gaussian\nlikelihood.sigma2 = empirical\n\
         repetitions = 2\nseed = 5\nsolver.restarts = 4\nnoise.restarts = 4\n\
         gibbs.sweeps = 300\n",
    )
    .expect("config written");

    let spawn = |args: &[&str]| {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_bnmf"))
            .args(args)
            .current_dir(tmp.path())
            .output()
            .expect("binary spawns");
        assert!(
            out.status.success(),
            "command {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out.stdout
    };

    let cfg = config.to_str().expect("utf-8 path");
    for side in ["a", "b"] {
        spawn(&["nvi", "--config", cfg, "--out", &format!("{side}/runs/nvi"), "--workers", "1"]);
        spawn(&[
            "sample",
            "gibbs",
            "--config",
            cfg,
            "--out",
            &format!("{side}/runs/gibbs"),
            "--workers",
            "1",
        ]);
    }
    let table_a = spawn(&["report", "a/runs", "--out", "a/report"]);
    let table_b = spawn(&["report", "b/runs", "--out", "b/report"]);

    let file_a = fs::read(tmp.path().join("a/report/report.txt")).expect("first table");
    let file_b = fs::read(tmp.path().join("b/report/report.txt")).expect("second table");
    let csv_a = fs::read(tmp.path().join("a/report/summary.csv")).expect("first csv");
    let csv_b = fs::read(tmp.path().join("b/report/summary.csv")).expect("second csv");

    verdict(
        "10",
        table_a == table_b && file_a == file_b && csv_a == csv_b,
        &format!(
            "stdout {} bytes, report.txt {} bytes, summary.csv {} bytes, all pairs identical",
            table_a.len(),
            file_a.len(),
            csv_a.len()
        ),
    );
}
