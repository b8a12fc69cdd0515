//! Data loading, saving, and synthetic dataset generation.
//!
//! Matrices load from two plain-text formats, distinguished by the first
//! non-comment line: lines with commas are dense CSV rows; otherwise the
//! file is coordinate form — a `rows cols nnz` header followed by `i j v`
//! triples (1-indexed). Blank lines and lines starting with `#` are skipped.
//! Negative values are clipped to zero and counted so callers can warn.
//!
//! The synthetic generator builds datasets that provably admit two distinct
//! exact non-negative factorizations. A 4×4 rank-3 core is built from
//! `A₁ (4×3)`, a doubly stochastic mixing matrix `B = (1-t)·I + (t/3)·J`,
//! and `W₂ = [I₃ | c]`:
//!
//! ```text
//! C = A₁·W₁ = A₂·W₂   with   A₂ = A₁B,  W₁ = B·W₂.
//! ```
//!
//! Because `B` is doubly stochastic, both pairs have the same entry sums,
//! hence identical exponential prior mass: neither truth is preferred. The
//! core embeds into any size via non-negative mixing `X = P·C·Q`, which
//! preserves both factorizations (`(P·Aᵢ)·(Wᵢ·Q) = X`) and keeps the rank
//! deficit visible (the fourth singular value stays at zero). Draws are
//! retried until the two truths are angularly separated both in the core
//! and after embedding.

use std::path::Path;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{wad, ColumnScale};
use crate::model::Factorization;

/// A loaded matrix plus how many negative entries were clipped to zero.
#[derive(Debug, Clone)]
pub struct LoadedMatrix {
    pub x: DMatrix<f64>,
    pub clipped_negatives: usize,
}

/// Parses a matrix from text (dense CSV or coordinate form; see the module
/// docs). Errors carry 1-based line numbers.
pub fn load_matrix_str(text: &str) -> Result<LoadedMatrix> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if lines.is_empty() {
        return Err(Error::Parse { line: 1, message: "no data lines".into() });
    }
    let dense = lines[0].1.contains(',');
    let mut clipped = 0usize;

    let x = if dense {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(lines.len());
        for &(ln, l) in &lines {
            let mut row = Vec::new();
            for tok in l.split(',') {
                let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                    line: ln,
                    message: format!("not a number: {tok:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: ln,
                        message: format!("non-finite value {v}"),
                    });
                }
                row.push(if v < 0.0 {
                    clipped += 1;
                    0.0
                } else {
                    v
                });
            }
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Parse {
                        line: ln,
                        message: format!(
                            "row has {} entries, expected {}",
                            row.len(),
                            first.len()
                        ),
                    });
                }
            }
            rows.push(row);
        }
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    } else {
        let (hdr_ln, hdr) = lines[0];
        let dims: Vec<usize> = hdr
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    line: hdr_ln,
                    message: format!("header wants `rows cols nnz`, got {hdr:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Parse {
                line: hdr_ln,
                message: format!("header wants 3 fields, got {}", dims.len()),
            });
        }
        let (nr, nc, nnz) = (dims[0], dims[1], dims[2]);
        if nr == 0 || nc == 0 {
            return Err(Error::Parse { line: hdr_ln, message: "empty matrix".into() });
        }
        if lines.len() - 1 != nnz {
            return Err(Error::Parse {
                line: hdr_ln,
                message: format!("expected {nnz} entries, file has {}", lines.len() - 1),
            });
        }
        let mut x = DMatrix::zeros(nr, nc);
        for &(ln, l) in &lines[1..] {
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("entry wants `i j value`, got {l:?}"),
                });
            }
            let i: usize = toks[0].parse().map_err(|_| Error::Parse {
                line: ln,
                message: format!("bad row index {:?}", toks[0]),
            })?;
            let j: usize = toks[1].parse().map_err(|_| Error::Parse {
                line: ln,
                message: format!("bad column index {:?}", toks[1]),
            })?;
            let v: f64 = toks[2].parse().map_err(|_| Error::Parse {
                line: ln,
                message: format!("bad value {:?}", toks[2]),
            })?;
            if i == 0 || i > nr || j == 0 || j > nc {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("index ({i}, {j}) outside {nr}x{nc} (1-indexed)"),
                });
            }
            if !v.is_finite() {
                return Err(Error::Parse { line: ln, message: format!("non-finite value {v}") });
            }
            x[(i - 1, j - 1)] = if v < 0.0 {
                clipped += 1;
                0.0
            } else {
                v
            };
        }
        x
    };
    Ok(LoadedMatrix { x, clipped_negatives: clipped })
}

/// Loads a matrix from a file (see [`load_matrix_str`]).
pub fn load_matrix(path: &Path) -> Result<LoadedMatrix> {
    let text = std::fs::read_to_string(path)?;
    load_matrix_str(&text)
}

/// Renders a matrix as dense CSV with shortest-round-trip floats.
pub fn matrix_to_csv(x: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            if j > 0 {
                s.push(',');
            }
            s.push_str(&format!("{}", x[(i, j)]));
        }
        s.push('\n');
    }
    s
}

/// Writes a matrix as dense CSV.
pub fn save_matrix_csv(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_csv(x))?;
    Ok(())
}

/// A generated dataset: observations, the noiseless product, and every
/// planted factorization (post-embedding, pre-noise).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Observed data (noise applied, clipped non-negative).
    pub x: DMatrix<f64>,
    /// Noiseless low-rank product.
    pub clean: DMatrix<f64>,
    /// Exact factorizations of `clean`.
    pub ground_truths: Vec<Factorization>,
    /// Inner dimension of the planted factorizations.
    pub r: usize,
}

/// Options for [`gen_two_truth_toy`].
#[derive(Debug, Clone)]
pub struct ToyOptions {
    pub d: usize,
    pub n: usize,
    /// Half-width of the uniform observation noise (clipped at zero).
    pub noise_eps: f64,
    /// Mixing strength `t` of the doubly stochastic core rotation, in (0,1).
    pub mix: f64,
    /// Required angular separation of the two truths before embedding.
    pub core_wad_min_deg: f64,
    /// Required angular separation after embedding.
    pub embedded_wad_min_deg: f64,
    pub max_attempts: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            d: 60,
            n: 60,
            noise_eps: 0.01,
            mix: 0.6,
            core_wad_min_deg: 5.0,
            embedded_wad_min_deg: 1.0,
            max_attempts: 200,
        }
    }
}

/// Rank of the planted factorizations.
pub const TOY_RANK: usize = 3;
/// Embedded rank-3 data must look numerically rank 3: σ₄ below this fraction
/// of σ₁.
const RANK_GAP_TOL: f64 = 1e-10;

/// Generates a dataset with two planted, equally prior-weighted, exact
/// non-negative factorizations (see the module docs for the construction).
pub fn gen_two_truth_toy(opts: &ToyOptions, seed: u64) -> Result<Dataset> {
    if opts.d < 4 || opts.n < 4 {
        return Err(Error::InvalidArgument("toy needs at least 4 rows and columns".into()));
    }
    if !(opts.mix > 0.0 && opts.mix < 1.0) {
        return Err(Error::InvalidArgument("mixing strength must lie in (0,1)".into()));
    }
    if !(opts.noise_eps >= 0.0 && opts.noise_eps.is_finite()) {
        return Err(Error::InvalidArgument("noise half-width must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = opts.mix;
    let b = DMatrix::from_fn(TOY_RANK, TOY_RANK, |i, j| {
        if i == j {
            1.0 - t + t / TOY_RANK as f64
        } else {
            t / TOY_RANK as f64
        }
    });

    for _ in 0..opts.max_attempts {
        // Fresh jittered draw each attempt.
        let a1 = DMatrix::from_fn(4, TOY_RANK, |_, _| rng.gen_range(0.05..1.0));
        let c = DMatrix::from_fn(TOY_RANK, 1, |_, _| rng.gen_range(0.05..1.0));
        let mut w2 = DMatrix::zeros(TOY_RANK, 4);
        for k in 0..TOY_RANK {
            w2[(k, k)] = 1.0;
        }
        w2.column_mut(TOY_RANK).copy_from(&c.column(0));

        let a2 = &a1 * &b;
        let w1 = &b * &w2;
        let core1 = Factorization::new(a1.clone(), w1.clone())?;
        let core2 = Factorization::new(a2.clone(), w2.clone())?;
        if (core1.product() - core2.product()).norm() > 1e-12 {
            continue;
        }
        if wad(&core1, &core2, ColumnScale::L1)? <= opts.core_wad_min_deg {
            continue;
        }

        let p = DMatrix::from_fn(opts.d, 4, |_, _| rng.gen::<f64>());
        let q = DMatrix::from_fn(4, opts.n, |_, _| rng.gen::<f64>());
        let f1 = Factorization::new(&p * &a1, &w1 * &q)?;
        let f2 = Factorization::new(&p * &a2, &w2 * &q)?;
        if wad(&f1, &f2, ColumnScale::L1)? <= opts.embedded_wad_min_deg {
            continue;
        }

        let clean = f1.product();
        if (&clean - f2.product()).norm() > 1e-10 * clean.norm().max(1.0) {
            continue;
        }
        let sv = clean.clone().svd(false, false).singular_values;
        if sv.len() > TOY_RANK && sv[TOY_RANK] > RANK_GAP_TOL * sv[0] {
            continue;
        }

        let x = clean.map(|v| (v + rng.gen_range(-opts.noise_eps..=opts.noise_eps)).max(0.0));
        return Ok(Dataset {
            name: format!("two-truth-toy-{}x{}-seed{}", opts.d, opts.n, seed),
            x,
            clean,
            ground_truths: vec![f1, f2],
            r: TOY_RANK,
        });
    }
    Err(Error::Numerical(format!(
        "no sufficiently separated toy instance within {} attempts",
        opts.max_attempts
    )))
}

/// Generates a single-truth Gaussian-noise dataset: `X = AW + N(0, sd²)`,
/// clipped non-negative, with `A, W` drawn i.i.d. uniform.
pub fn gen_gaussian_toy(
    d: usize,
    n: usize,
    r: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 || n == 0 || r == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidArgument("noise scale must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, r, |_, _| rng.gen_range(0.05..1.0));
    let w = DMatrix::from_fn(r, n, |_, _| rng.gen_range(0.05..1.0));
    let truth = Factorization::new(a, w)?;
    let clean = truth.product();
    let x = clean.map(|v| {
        let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
        (v + noise_sd * noise).max(0.0)
    });
    Ok(Dataset {
        name: format!("gaussian-toy-{d}x{n}-r{r}-seed{seed}"),
        x,
        clean,
        ground_truths: vec![truth],
        r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dense_csv_round_trips() {
        let x = DMatrix::from_row_slice(2, 3, &[0.5, 1.25, 0.0, 3.00000000001, 2.0, 0.125]);
        let csv = matrix_to_csv(&x);
        let back = load_matrix_str(&csv).unwrap();
        assert_eq!(back.clipped_negatives, 0);
        assert_eq!(back.x.shape(), (2, 3));
        for (a, b) in back.x.iter().zip(x.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dense_csv_clips_negatives_and_reports_count() {
        let loaded = load_matrix_str("1.0,-2.0\n-0.5,3.0\n").unwrap();
        assert_eq!(loaded.clipped_negatives, 2);
        assert_eq!(loaded.x[(0, 1)], 0.0);
        assert_eq!(loaded.x[(1, 0)], 0.0);
        assert_eq!(loaded.x[(1, 1)], 3.0);
    }

    #[test]
    fn coordinate_format_loads_one_indexed_entries() {
        let text = "# sparse example\n2 3 2\n1 2 0.5\n2 1 1.5\n";
        let loaded = load_matrix_str(text).unwrap();
        assert_eq!(loaded.x.shape(), (2, 3));
        assert_eq!(loaded.x[(0, 1)], 0.5);
        assert_eq!(loaded.x[(1, 0)], 1.5);
        assert_eq!(loaded.x[(0, 0)], 0.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        // Bad token on line 2 of a dense file.
        let err = load_matrix_str("1.0,2.0\n1.0,oops\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error {other:?}"),
        }
        // Ragged row.
        let err = load_matrix_str("1.0,2.0\n1.0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error {other:?}"),
        }
        // Out-of-range coordinate (header says 2x2).
        let err = load_matrix_str("2 2 1\n3 1 0.5\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error {other:?}"),
        }
        // Wrong entry count.
        assert!(load_matrix_str("2 2 3\n1 1 0.5\n").is_err());
    }

    #[test]
    fn file_round_trip_via_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        save_matrix_csv(&path, &x).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back.x, x);
    }

    #[test]
    fn toy_plants_two_exact_equally_weighted_truths() {
        let opts = ToyOptions { d: 20, n: 24, ..Default::default() };
        let ds = gen_two_truth_toy(&opts, 7).unwrap();
        assert_eq!(ds.ground_truths.len(), 2);
        assert_eq!(ds.x.shape(), (20, 24));

        let f1 = &ds.ground_truths[0];
        let f2 = &ds.ground_truths[1];
        // Both factorizations reproduce the clean matrix exactly.
        assert!((f1.product() - &ds.clean).norm() < 1e-9 * ds.clean.norm());
        assert!((f2.product() - &ds.clean).norm() < 1e-9 * ds.clean.norm());
        // Equal prior mass: identical entry sums in A and in W.
        assert_relative_eq!(f1.a.sum(), f2.a.sum(), max_relative = 1e-10);
        assert_relative_eq!(f1.w.sum(), f2.w.sum(), max_relative = 1e-10);
        // The truths are angularly separated after embedding.
        assert!(wad(f1, f2, ColumnScale::L1).unwrap() > opts.embedded_wad_min_deg);
        // Noise bounded by the half-width, data non-negative.
        let max_dev = (&ds.x - &ds.clean).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_dev <= opts.noise_eps + 1e-15);
        assert!(ds.x.iter().all(|&v| v >= 0.0));
        // The clean matrix is numerically rank 3.
        let sv = ds.clean.clone().svd(false, false).singular_values;
        assert!(sv[3] < 1e-10 * sv[0]);
    }

    #[test]
    fn toy_is_deterministic_per_seed() {
        let opts = ToyOptions { d: 10, n: 12, ..Default::default() };
        let d1 = gen_two_truth_toy(&opts, 3).unwrap();
        let d2 = gen_two_truth_toy(&opts, 3).unwrap();
        assert!(d1.x.iter().zip(d2.x.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let d3 = gen_two_truth_toy(&opts, 4).unwrap();
        assert!(d1.x.iter().zip(d3.x.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn gaussian_toy_is_well_formed() {
        let ds = gen_gaussian_toy(30, 40, 3, 0.05, 11).unwrap();
        assert_eq!(ds.x.shape(), (30, 40));
        assert_eq!(ds.ground_truths.len(), 1);
        assert!(ds.x.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let resid = (&ds.x - &ds.clean).norm() / (30.0f64 * 40.0).sqrt();
        // Residual RMS should sit near the noise scale.
        assert!(resid > 0.01 && resid < 0.2, "rms {resid}");

        let again = gen_gaussian_toy(30, 40, 3, 0.05, 11).unwrap();
        assert!(ds.x.iter().zip(again.x.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
