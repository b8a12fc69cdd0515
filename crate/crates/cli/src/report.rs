//! Report rendering: scans run directories, tabulates aggregate statistics,
//! and bundles per-repetition persistence curves for external plotting.
//!
//! Human-facing tables round to six significant digits; machine-readable
//! CSV/JSON keep full precision. Rows are ordered by directory name, so the
//! same inputs always render byte-identical output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use bnmf_core::metrics::{covering_number, pairwise_wad, persistence_csv, persistence_curve, ColumnScale};
use bnmf_core::model::Factorization;
use bnmf_core::vi::mixture_from_json;

use crate::run::AggregateRecord;

/// Formats with six significant digits: plain decimal in a comfortable
/// magnitude range, scientific notation outside it. Deterministic for every
/// input, including zeros, infinities, and NaN.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let mag = x.abs();
    if (1e-4..1e6).contains(&mag) {
        let exp = mag.log10().floor() as i32;
        let prec = (5 - exp).max(0) as usize;
        format!("{x:.prec$}")
    } else {
        format!("{x:.5e}")
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_else(|| "-".into())
}

/// One table row, read from a run directory's aggregate file.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub dir_name: String,
    pub aggregate: AggregateRecord,
}

/// Rendered summary of a directory of runs.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    /// Plain-text table (also written to `report.txt`).
    pub table: String,
    pub rows: usize,
    /// Per-file problems encountered while scanning (corrupt/missing files).
    pub warnings: Vec<String>,
}

/// Collects run directories: either `dir` itself (if it holds an
/// `aggregate.json`) or its immediate subdirectories, sorted by name.
fn find_runs(dir: &Path, warnings: &mut Vec<String>) -> Result<Vec<ReportRow>> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if dir.join("aggregate.json").is_file() {
        candidates.push(dir.to_path_buf());
    } else {
        let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() && path.join("aggregate.json").is_file() {
                candidates.push(path);
            }
        }
        candidates.sort();
    }
    let mut rows = Vec::new();
    for path in candidates {
        let file = path.join("aggregate.json");
        let parsed: Result<AggregateRecord> = fs::read_to_string(&file)
            .map_err(anyhow::Error::from)
            .and_then(|t| serde_json::from_str(&t).map_err(anyhow::Error::from));
        match parsed {
            Ok(aggregate) => rows.push(ReportRow {
                dir_name: path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string()),
                aggregate,
            }),
            Err(e) => warnings.push(format!("{}: {e:#}", file.display())),
        }
    }
    Ok(rows)
}

fn render_table(rows: &[ReportRow]) -> String {
    let header = ["method", "mean_elbo", "elbo_q25", "elbo_q75", "mean_components", "reps_ok"];
    let mut cells: Vec<[String; 6]> = Vec::with_capacity(rows.len());
    for row in rows {
        let a = &row.aggregate;
        cells.push([
            a.method.clone(),
            cell(a.elbo.mean),
            cell(a.elbo.q25),
            cell(a.elbo.q75),
            cell(a.components.mean),
            format!("{}/{}", a.succeeded, a.repetitions),
        ]);
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for (i, h) in header.iter().enumerate() {
        if i > 0 {
            out.push_str("  ");
        }
        out.push_str(&format!("{h:<width$}", width = widths[i]));
    }
    out.push('\n');
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{c:<width$}", width = widths[i]));
            } else {
                out.push_str(&format!("{c:>width$}", width = widths[i]));
            }
        }
        out.push('\n');
    }
    out
}

/// Concatenates every repetition's persistence curve under each run, adding
/// method and repetition columns.
fn bundle_persistence(runs: &[(PathBuf, String)], warnings: &mut Vec<String>) -> String {
    let mut out = String::from("method,rep,epsilon_degrees,covering_number\n");
    for (dir, method) in runs {
        let mut reps: Vec<PathBuf> = match fs::read_dir(dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_dir()
                        && p.file_name()
                            .map(|n| n.to_string_lossy().starts_with("rep_"))
                            .unwrap_or(false)
                })
                .collect(),
            Err(e) => {
                warnings.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        reps.sort();
        for rep_dir in reps {
            let file = rep_dir.join("persistence.csv");
            if !file.is_file() {
                continue; // methods without mixtures have no curve
            }
            let rep_name = rep_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let rep_index = rep_name.strip_prefix("rep_").unwrap_or(&rep_name).to_string();
            match fs::read_to_string(&file) {
                Ok(text) => {
                    for line in text.lines().skip(1) {
                        if !line.is_empty() {
                            out.push_str(&format!("{method},{rep_index},{line}\n"));
                        }
                    }
                }
                Err(e) => warnings.push(format!("{}: {e}", file.display())),
            }
        }
    }
    out
}

/// Renders the summary table and CSV bundle for a directory of runs. Writes
/// `report.txt`, `summary.csv`, and `persistence_all.csv` into `out_dir`
/// (defaulting to the scanned directory itself).
pub fn render(dir: &Path, out_dir: Option<&Path>) -> Result<ReportBundle> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut warnings = Vec::new();
    let rows = find_runs(dir, &mut warnings)?;
    let table = render_table(&rows);

    let out_dir = out_dir.unwrap_or(dir);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.txt"), &table)?;

    // Machine-readable companion of the table, full precision.
    let mut csv = String::from(
        "method,mean_elbo,elbo_q25,elbo_q75,mean_components,succeeded,repetitions\n",
    );
    let full = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &rows {
        let a = &row.aggregate;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            a.method,
            full(a.elbo.mean),
            full(a.elbo.q25),
            full(a.elbo.q75),
            full(a.components.mean),
            a.succeeded,
            a.repetitions,
        ));
    }
    fs::write(out_dir.join("summary.csv"), &csv)?;

    let run_dirs: Vec<(PathBuf, String)> = rows
        .iter()
        .map(|r| {
            let path = if r.dir_name == dir.file_name().unwrap_or_default().to_string_lossy() {
                dir.to_path_buf()
            } else {
                dir.join(&r.dir_name)
            };
            (path, r.aggregate.method.clone())
        })
        .collect();
    let bundle = bundle_persistence(&run_dirs, &mut warnings);
    fs::write(out_dir.join("persistence_all.csv"), &bundle)?;

    Ok(ReportBundle { table, rows: rows.len(), warnings })
}

/// Distance statistics over a directory of mixture files.
#[derive(Debug, Clone)]
pub struct MetricsSummary {
    pub files: usize,
    pub samples: usize,
    /// Covering number at a 0.01-degree radius.
    pub covering_at_001: usize,
    pub skipped: Vec<String>,
}

/// Decodes every component of every mixture file in `dir` (sorted by name)
/// into factorizations, then writes the pairwise angular distances
/// (`wad.csv`), the covering-number curve (`persistence.csv`), and a short
/// JSON summary into `out_dir`.
pub fn metrics_dir(dir: &Path, out_dir: &Path) -> Result<MetricsSummary> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    files.sort();

    let mut samples: Vec<Factorization> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut skipped = Vec::new();
    let mut decoded_files = 0usize;
    for file in &files {
        let parsed = fs::read_to_string(file)
            .map_err(anyhow::Error::from)
            .and_then(|t| mixture_from_json(&t).map_err(anyhow::Error::from));
        match parsed {
            Ok(mix) => {
                decoded_files += 1;
                let stem = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                for (k, comp) in mix.components.iter().enumerate() {
                    match mix.layout.decode(&comp.mu) {
                        Ok(f) => {
                            samples.push(f);
                            labels.push(format!("{stem}:{k}"));
                        }
                        Err(e) => skipped.push(format!("{}[{k}]: {e}", file.display())),
                    }
                }
            }
            Err(e) => skipped.push(format!("{}: {e:#}", file.display())),
        }
    }
    if samples.is_empty() {
        bail!("no decodable mixture components under {}", dir.display());
    }

    let dist = pairwise_wad(&samples, ColumnScale::L1)?;
    fs::create_dir_all(out_dir)?;

    let mut wad_csv = String::from("i,j,label_i,label_j,wad_degrees\n");
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            wad_csv.push_str(&format!("{i},{j},{},{},{}\n", labels[i], labels[j], dist[(i, j)]));
        }
    }
    fs::write(out_dir.join("wad.csv"), &wad_csv)?;

    let curve = persistence_curve(&dist)?;
    fs::write(out_dir.join("persistence.csv"), persistence_csv(&curve))?;

    let covering_at_001 = covering_number(&dist, 0.01)?;
    let meta = serde_json::json!({
        "files": decoded_files,
        "samples": samples.len(),
        "covering_at_0.01deg": covering_at_001,
        "skipped": skipped,
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(out_dir.join("metrics.json"), text)?;

    Ok(MetricsSummary { files: decoded_files, samples: samples.len(), covering_at_001, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits_across_magnitudes() {
        assert_eq!(fmt_sig6(1234.5678), "1234.57");
        assert_eq!(fmt_sig6(-1234.5678), "-1234.57");
        assert_eq!(fmt_sig6(2.0), "2.00000");
        assert_eq!(fmt_sig6(0.00012345678), "0.000123457");
        assert_eq!(fmt_sig6(123456.78), "123457");
        assert_eq!(fmt_sig6(0.0), "0.00000");
        assert_eq!(fmt_sig6(1.5e8), "1.50000e8");
        assert_eq!(fmt_sig6(-3.25e-7), "-3.25000e-7");
        assert_eq!(fmt_sig6(f64::NAN), "nan");
        assert_eq!(fmt_sig6(f64::INFINITY), "inf");
    }

    #[test]
    fn table_aligns_and_orders_rows() {
        use crate::run::{AggregateRecord, StatsRecord};
        let mk = |method: &str, mean: f64| ReportRow {
            dir_name: method.into(),
            aggregate: AggregateRecord {
                method: method.into(),
                dataset: "d".into(),
                repetitions: 3,
                succeeded: 3,
                failed: 0,
                elbo: StatsRecord { mean: Some(mean), q25: Some(mean - 1.0), q75: Some(mean + 1.0) },
                components: StatsRecord { mean: Some(2.0), q25: Some(2.0), q75: Some(2.0) },
                failures: vec![],
            },
        };
        let t = render_table(&[mk("rrt_onvi", -10.0), mk("nvi", -20.0)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("method"));
        assert!(lines[1].starts_with("rrt_onvi"));
        assert!(lines[2].starts_with("nvi"));
        // Every row renders to the same width.
        assert_eq!(lines[1].len(), lines[2].len());
    }
}
