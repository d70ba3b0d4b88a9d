use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Benchmark, MethodEntry, ProblemData, Scenario};
use crate::da::{sup_loss, uda_loss, DaMethod};
use crate::domains::{fmt_f64, LabeledBatch};
use crate::error::{Error, Result};
use crate::models::{accuracy, Architecture, ParamSet};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMetric {
    /// Target test accuracy of head 0.
    TestAcc,
    /// Supervised loss on all labelled training rows.
    SupLoss,
    /// Adaptation term on the full source and unlabelled target sets.
    AdaptLoss,
}

impl SliceMetric {
    pub fn name(self) -> &'static str {
        match self {
            SliceMetric::TestAcc => "test_acc",
            SliceMetric::SupLoss => "sup_loss",
            SliceMetric::AdaptLoss => "adapt_loss",
        }
    }
}

fn default_grid_min() -> f64 {
    -0.5
}
fn default_grid_max() -> f64 {
    1.5
}
fn default_grid_n() -> usize {
    41
}
fn default_metrics() -> Vec<SliceMetric> {
    vec![
        SliceMetric::TestAcc,
        SliceMetric::SupLoss,
        SliceMetric::AdaptLoss,
    ]
}

/// A plane through three parameter files, sampled on a square grid.
///
/// The point at grid coordinates `(a, b)` is
/// `(1 - a - b) * theta0 + a * thetaA + b * thetaB`, i.e.
/// `theta0 + a (thetaA - theta0) + b (thetaB - theta0)` evaluated so that
/// the three anchors are reproduced exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub theta0: PathBuf,
    #[serde(rename = "thetaA")]
    pub theta_a: PathBuf,
    #[serde(rename = "thetaB")]
    pub theta_b: PathBuf,
    #[serde(default = "default_grid_min")]
    pub grid_min: f64,
    #[serde(default = "default_grid_max")]
    pub grid_max: f64,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<SliceMetric>,
    pub scenario: Scenario,
    #[serde(default)]
    pub benchmark: Benchmark,
    /// Base method defining the adaptation loss.
    pub method: MethodEntry,
    /// Grid CSV path.
    pub output: PathBuf,
}

/// Loads a slice spec; relative paths resolve against its directory.
pub fn load_slice_spec(path: &Path) -> Result<SliceSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec: SliceSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [
        &mut spec.theta0,
        &mut spec.theta_a,
        &mut spec.theta_b,
        &mut spec.output,
    ] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(spec)
}

/// Metrics at an anchor, computed from the interpolation formula and directly.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerCheck {
    pub name: &'static str,
    pub a: f64,
    pub b: f64,
    pub via_plane: Vec<f64>,
    pub direct: Vec<f64>,
}

impl CornerCheck {
    pub fn exact(&self) -> bool {
        self.via_plane
            .iter()
            .zip(&self.direct)
            .all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

#[derive(Clone, Debug)]
pub struct SliceOutcome {
    pub metrics: Vec<SliceMetric>,
    /// `(a, b, metric values)` in a-major order.
    pub rows: Vec<(f64, f64, Vec<f64>)>,
    pub corners: Vec<CornerCheck>,
}

struct Evaluator<'a> {
    arch: &'a Architecture,
    method: DaMethod,
    data: &'a ProblemData,
    labeled: LabeledBatch,
    source: LabeledBatch,
    target: &'a Matrix,
}

impl Evaluator<'_> {
    fn eval(&self, p: &ParamSet, metrics: &[SliceMetric]) -> Result<Vec<f64>> {
        metrics
            .iter()
            .map(|m| match m {
                SliceMetric::TestAcc => accuracy(p, self.arch, self.data.target_test(), 0),
                SliceMetric::SupLoss => {
                    Ok(sup_loss(&self.method, p, self.arch, &self.labeled)?.total())
                }
                SliceMetric::AdaptLoss => {
                    Ok(
                        uda_loss(&self.method, p, self.arch, &self.source, self.target)?
                            .losses()
                            .adapt,
                    )
                }
            })
            .collect()
    }
}

fn combine(t0: &[f64], ta: &[f64], tb: &[f64], a: f64, b: f64) -> Vec<f64> {
    let c = 1.0 - a - b;
    t0.iter()
        .zip(ta)
        .zip(tb)
        .map(|((x0, xa), xb)| c * x0 + a * xa + b * xb)
        .collect()
}

/// Grid coordinate `i` of `n` over `[min, max]`.
pub fn grid_value(min: f64, max: f64, n: usize, i: usize) -> f64 {
    min + (max - min) * i as f64 / (n - 1) as f64
}

/// Samples the plane and writes the grid CSV (`a, b, metric...`).
pub fn slice_weight_space(spec: &SliceSpec) -> Result<SliceOutcome> {
    if spec.grid_n < 2 {
        return Err(Error::Config(format!(
            "grid_n must be >= 2, got {}",
            spec.grid_n
        )));
    }
    if !(spec.grid_min.is_finite() && spec.grid_max.is_finite() && spec.grid_min < spec.grid_max) {
        return Err(Error::Config("grid_min must be below grid_max".into()));
    }
    if spec.metrics.is_empty() {
        return Err(Error::Config("metrics must not be empty".into()));
    }
    let (arch, p0) = ParamSet::load(&spec.theta0)?;
    let (arch_a, pa) = ParamSet::load(&spec.theta_a)?;
    let (arch_b, pb) = ParamSet::load(&spec.theta_b)?;
    for (name, p) in [("thetaA", &pa), ("thetaB", &pb)] {
        if p.len() != p0.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: theta0 has {}, {name} has {}",
                p0.len(),
                p.len()
            )));
        }
    }
    if arch_a != arch || arch_b != arch {
        return Err(Error::contract(
            "theta0, thetaA and thetaB have different architectures",
        ));
    }

    let data = ProblemData::build(spec.scenario, &spec.benchmark)?;
    if data.input_dim() != arch.input_dim || data.num_classes() != arch.num_classes {
        return Err(Error::contract(
            "parameters do not fit the benchmark's input width or class count",
        ));
    }
    let ev = Evaluator {
        arch: &arch,
        method: spec.method.method(),
        data: &data,
        labeled: data.labeled_train()?,
        source: data.source_train()?,
        target: data.target_unlabeled(),
    };
    let (f0, fa, fb) = (p0.flatten(), pa.flatten(), pb.flatten());
    let at = |a: f64, b: f64| -> Result<Vec<f64>> {
        let p = ParamSet::unflatten(&combine(&f0, &fa, &fb, a, b), &arch)?;
        ev.eval(&p, &spec.metrics)
    };

    let n = spec.grid_n;
    let coords: Vec<(f64, f64)> = (0..n * n)
        .map(|k| {
            (
                grid_value(spec.grid_min, spec.grid_max, n, k / n),
                grid_value(spec.grid_min, spec.grid_max, n, k % n),
            )
        })
        .collect();
    let rows = coords
        .par_iter()
        .map(|&(a, b)| Ok((a, b, at(a, b)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut corners = Vec::new();
    for (name, a, b, p) in [
        ("theta0", 0.0, 0.0, &p0),
        ("thetaA", 1.0, 0.0, &pa),
        ("thetaB", 0.0, 1.0, &pb),
    ] {
        corners.push(CornerCheck {
            name,
            a,
            b,
            via_plane: at(a, b)?,
            direct: ev.eval(p, &spec.metrics)?,
        });
    }

    if let Some(dir) = spec.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(&spec.output)?;
    let mut header = vec!["a".to_string(), "b".to_string()];
    header.extend(spec.metrics.iter().map(|m| m.name().to_string()));
    w.write_record(&header)?;
    for (a, b, vals) in &rows {
        let mut rec = vec![fmt_f64(*a), fmt_f64(*b)];
        rec.extend(vals.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&spec.output, e))?;

    Ok(SliceOutcome {
        metrics: spec.metrics.clone(),
        rows,
        corners,
    })
}
