use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{
    mean_std, summary_row, write_summary, FailureRecord, RunConfig, SummaryRow, REPORTS_DIR,
};
use crate::domains::fmt_f64;
use crate::error::{Error, Result};
use crate::meta::RunReport;

/// Reports read back from disk, grouped by grid cell.
#[derive(Clone, Debug, Default)]
pub struct StoredReports {
    /// cell -> (method, meta mode, seed -> report)
    pub cells: BTreeMap<String, (String, String, BTreeMap<u64, RunReport>)>,
    /// cell -> failure count
    pub failures: BTreeMap<String, usize>,
}

/// Paired-seed comparison of two cells (`a - b`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n_pairs: usize,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

impl PairedStats {
    /// `a` and `b` map seed to accuracy; only seeds present in both count.
    pub fn from_samples(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> PairedStats {
        let diffs: Vec<f64> = a
            .iter()
            .filter_map(|(s, x)| b.get(s).map(|y| x - y))
            .collect();
        let n = diffs.len();
        let (mean_diff, std_diff) = mean_std(&diffs);
        let half = if n >= 2 {
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("positive degrees of freedom")
                .inverse_cdf(0.975);
            t * std_diff / (n as f64).sqrt()
        } else {
            f64::NAN
        };
        PairedStats {
            n_pairs: n,
            mean_diff,
            std_diff,
            ci95_low: mean_diff - half,
            ci95_high: mean_diff + half,
            wins_a: diffs.iter().filter(|&&d| d > 0.0).count(),
            wins_b: diffs.iter().filter(|&&d| d < 0.0).count(),
            ties: diffs.iter().filter(|&&d| d == 0.0).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub cell_a: String,
    pub cell_b: String,
    pub n_unpaired: usize,
    #[serde(flatten)]
    pub stats: PairedStats,
}

#[derive(Clone, Debug)]
pub struct AggregateOutcome {
    pub summary: Vec<SummaryRow>,
    pub comparisons: Vec<ComparisonRow>,
    pub warnings: Vec<String>,
}

fn reports_dir(dir: &Path) -> PathBuf {
    let nested = dir.join(REPORTS_DIR);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Reads every report and failure record under `dir` (or `dir/reports`).
pub fn load_reports(dir: &Path) -> Result<StoredReports> {
    let rdir = reports_dir(dir);
    let mut paths: Vec<PathBuf> = fs::read_dir(&rdir)
        .map_err(|e| Error::io(&rdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = StoredReports::default();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |e: serde_json::Error| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        };
        if path.to_string_lossy().ends_with(".error.json") {
            let rec: FailureRecord = serde_json::from_str(&text).map_err(bad)?;
            let rc: RunConfig = serde_json::from_value(rec.config).map_err(bad)?;
            *out.failures.entry(rc.cell_name()).or_default() += 1;
            continue;
        }
        let report: RunReport = serde_json::from_str(&text).map_err(bad)?;
        let rc: RunConfig = serde_json::from_value(report.config.clone()).map_err(bad)?;
        let entry = out.cells.entry(rc.cell_name()).or_insert_with(|| {
            (
                rc.train.method.kind.as_str().to_string(),
                rc.meta_mode.as_str().to_string(),
                BTreeMap::new(),
            )
        });
        if entry.2.insert(report.seed, report).is_some() {
            return Err(Error::Format {
                path,
                detail: format!(
                    "second report for cell {} with the same seed",
                    rc.cell_name()
                ),
            });
        }
    }
    if out.cells.is_empty() {
        return Err(Error::contract(format!(
            "no run reports found in {}",
            rdir.display()
        )));
    }
    Ok(out)
}

impl StoredReports {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut names: BTreeSet<&String> = self.cells.keys().collect();
        names.extend(self.failures.keys());
        names
            .into_iter()
            .map(|name| {
                let failed = self.failures.get(name).copied().unwrap_or(0);
                match self.cells.get(name) {
                    Some((method, mode, reports)) => {
                        summary_row(method, mode, &reports.values().collect::<Vec<_>>(), failed)
                    }
                    None => {
                        let (method, mode) = name.split_once("__").unwrap_or((name, ""));
                        summary_row(method, mode, &[], failed)
                    }
                }
            })
            .collect()
    }

    /// Paired comparison of every pair of cells, with warnings for unpaired seeds.
    pub fn compare(&self) -> (Vec<ComparisonRow>, Vec<String>) {
        let accs: Vec<(&String, BTreeMap<u64, f64>)> = self
            .cells
            .iter()
            .map(|(name, (_, _, reps))| {
                (name, reps.iter().map(|(s, r)| (*s, r.final_acc)).collect())
            })
            .collect();
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        for (i, (na, a)) in accs.iter().enumerate() {
            for (nb, b) in &accs[i + 1..] {
                let sa: BTreeSet<_> = a.keys().collect();
                let sb: BTreeSet<_> = b.keys().collect();
                let unpaired: Vec<_> = sa.symmetric_difference(&sb).collect();
                if !unpaired.is_empty() {
                    warnings.push(format!(
                        "{na} vs {nb}: seeds {unpaired:?} lack a partner and are excluded"
                    ));
                }
                rows.push(ComparisonRow {
                    cell_a: (*na).clone(),
                    cell_b: (*nb).clone(),
                    n_unpaired: unpaired.len(),
                    stats: PairedStats::from_samples(a, b),
                });
            }
        }
        (rows, warnings)
    }
}

/// Recomputes `summary.csv` and writes `comparison.csv` in `dir` from the
/// stored reports alone.
pub fn aggregate_runs(dir: &Path) -> Result<AggregateOutcome> {
    let stored = load_reports(dir)?;
    let summary = stored.summary();
    let (comparisons, warnings) = stored.compare();
    for w in &warnings {
        log::warn!("{w}");
    }
    write_summary(&dir.join("summary.csv"), &summary)?;
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "cell_a",
        "cell_b",
        "n_pairs",
        "n_unpaired",
        "mean_diff",
        "std_diff",
        "ci95_low",
        "ci95_high",
        "wins_a",
        "wins_b",
        "ties",
    ])?;
    for r in &comparisons {
        let s = &r.stats;
        w.write_record([
            r.cell_a.clone(),
            r.cell_b.clone(),
            s.n_pairs.to_string(),
            r.n_unpaired.to_string(),
            fmt_f64(s.mean_diff),
            fmt_f64(s.std_diff),
            fmt_f64(s.ci95_low),
            fmt_f64(s.ci95_high),
            s.wins_a.to_string(),
            s.wins_b.to_string(),
            s.ties.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(AggregateOutcome {
        summary,
        comparisons,
        warnings,
    })
}
