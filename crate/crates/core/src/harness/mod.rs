//! Experiment harness: JSON configs, the seeded grid runner, report
//! aggregation and weight-space slices.
//!
//! An [`ExperimentConfig`] expands to a grid of cells (method x meta mode),
//! each run once per seed. Every run writes a [`RunReport`] whose `config`
//! field is the [`RunConfig`] that produced it, so a report can be re-run
//! on its own with [`rerun_report`].

mod aggregate;
mod slice;

pub use aggregate::{
    aggregate_runs, load_reports, AggregateOutcome, ComparisonRow, PairedStats, StoredReports,
};
pub use slice::{
    load_slice_spec, slice_weight_space, CornerCheck, SliceMetric, SliceOutcome, SliceSpec,
};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::da::{DaKind, DaMethod};
use crate::domains::{
    fmt_f64, gen_gaussian_shift, gen_rotated_moons, select_kshot, DomainDataset, GaussShiftSpec,
    LabeledBatch, MoonsSpec, Split,
};
use crate::error::{Error, Result};
use crate::meta::{
    train, MetaConfig, MetaMode, MsdaProblem, Problem, RunReport, SsdaProblem, TrainConfig, Trained,
};
use crate::models::{Architecture, ClassifierKind, InitScheme};
use crate::seeding::{stream_rng, STREAM_KSHOT};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Several labelled sources, an unlabelled target.
    Msda,
    /// One labelled source, a k-shot labelled target plus its unlabelled rest.
    Ssda,
}

fn default_sources_deg() -> Vec<f64> {
    vec![0.0, 15.0, 30.0]
}
fn default_target_deg() -> f64 {
    45.0
}
fn default_n_per_class() -> usize {
    500
}
fn default_noise() -> f64 {
    0.1
}
fn default_k_shot() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoonsBenchmark {
    #[serde(default = "default_sources_deg")]
    pub sources_deg: Vec<f64>,
    #[serde(default = "default_target_deg")]
    pub target_deg: f64,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub data_seed: u64,
    /// Labelled target rows per class (ssda only).
    #[serde(default = "default_k_shot")]
    pub k_shot: usize,
}

impl Default for MoonsBenchmark {
    fn default() -> Self {
        MoonsBenchmark {
            sources_deg: default_sources_deg(),
            target_deg: default_target_deg(),
            n_per_class: default_n_per_class(),
            noise_sigma: default_noise(),
            data_seed: 0,
            k_shot: default_k_shot(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussBenchmark {
    pub class_means: Vec<Vec<f64>>,
    pub source_offsets: Vec<Vec<f64>>,
    pub target_offset: Vec<f64>,
    pub cov_scale: f64,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_k_shot")]
    pub k_shot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Benchmark {
    RotatedMoons(MoonsBenchmark),
    GaussianShift(GaussBenchmark),
}

impl Default for Benchmark {
    fn default() -> Self {
        Benchmark::RotatedMoons(MoonsBenchmark::default())
    }
}

/// Domain `i` of a benchmark draws from its own seed so domains do not share
/// noise realisations.
fn domain_seed(data_seed: u64, i: usize) -> u64 {
    data_seed.wrapping_mul(1000).wrapping_add(i as u64)
}

impl Benchmark {
    fn k_shot(&self) -> usize {
        match self {
            Benchmark::RotatedMoons(m) => m.k_shot,
            Benchmark::GaussianShift(g) => g.k_shot,
        }
    }

    fn data_seed(&self) -> u64 {
        match self {
            Benchmark::RotatedMoons(m) => m.data_seed,
            Benchmark::GaussianShift(g) => g.data_seed,
        }
    }

    fn num_sources(&self) -> usize {
        match self {
            Benchmark::RotatedMoons(m) => m.sources_deg.len(),
            Benchmark::GaussianShift(g) => g.source_offsets.len(),
        }
    }

    /// Domain `i < num_sources` is a source; `num_sources` is the target.
    fn domain(&self, i: usize, split: Split) -> Result<DomainDataset> {
        let n = self.num_sources();
        match self {
            Benchmark::RotatedMoons(m) => {
                let deg = if i < n {
                    m.sources_deg[i]
                } else {
                    m.target_deg
                };
                let spec = MoonsSpec {
                    rotation_deg: deg,
                    n_per_class: m.n_per_class,
                    noise_sigma: m.noise_sigma,
                    seed: domain_seed(m.data_seed, i),
                };
                gen_rotated_moons(&spec, split)
            }
            Benchmark::GaussianShift(g) => {
                let (offset, tag) = if i < n {
                    (g.source_offsets[i].clone(), format!("gauss-source{i}"))
                } else {
                    (g.target_offset.clone(), "gauss-target".to_string())
                };
                let spec = GaussShiftSpec {
                    class_means: g.class_means.clone(),
                    domain_offset: offset,
                    cov_scale: g.cov_scale,
                    n_per_class: g.n_per_class,
                    seed: domain_seed(g.data_seed, i),
                    tag: Some(tag),
                };
                gen_gaussian_shift(&spec, split)
            }
        }
    }
}

/// Materialised data for one scenario.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum ProblemData {
    Msda(MsdaProblem),
    Ssda(SsdaProblem),
}

impl ProblemData {
    pub fn build(scenario: Scenario, benchmark: &Benchmark) -> Result<ProblemData> {
        let n = benchmark.num_sources();
        let target_train = benchmark.domain(n, Split::Train)?;
        let target_test = benchmark.domain(n, Split::Test)?;
        match scenario {
            Scenario::Msda => {
                if n < 2 {
                    return Err(Error::Config(format!(
                        "scenario msda needs at least 2 source domains, benchmark has {n}"
                    )));
                }
                let sources = (0..n)
                    .map(|i| benchmark.domain(i, Split::Train))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ProblemData::Msda(MsdaProblem {
                    sources,
                    target: target_train.unlabeled(),
                    target_test,
                }))
            }
            Scenario::Ssda => {
                if n != 1 {
                    return Err(Error::Config(format!(
                        "scenario ssda needs exactly 1 source domain, benchmark has {n}"
                    )));
                }
                let mut rng = stream_rng(benchmark.data_seed(), STREAM_KSHOT);
                let (labeled, rest) = select_kshot(&target_train, benchmark.k_shot(), &mut rng)?;
                Ok(ProblemData::Ssda(SsdaProblem::new(
                    benchmark.domain(0, Split::Train)?,
                    labeled,
                    rest,
                    target_test,
                )?))
            }
        }
    }

    pub fn problem(&self) -> Problem<'_> {
        match self {
            ProblemData::Msda(p) => Problem::Msda(p),
            ProblemData::Ssda(p) => Problem::Ssda(p),
        }
    }

    pub fn target_test(&self) -> &DomainDataset {
        match self {
            ProblemData::Msda(p) => &p.target_test,
            ProblemData::Ssda(p) => &p.target_test,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.target_test().dim()
    }

    pub fn num_classes(&self) -> usize {
        self.target_test().num_classes()
    }

    /// Every labelled training row: all sources, plus the k-shot target rows.
    pub fn labeled_train(&self) -> Result<LabeledBatch> {
        match self {
            ProblemData::Msda(p) => {
                LabeledBatch::concat(&p.sources.iter().map(|d| d.as_batch()).collect::<Vec<_>>())
            }
            ProblemData::Ssda(p) => {
                LabeledBatch::concat(&[p.source.as_batch(), p.labeled_target.as_batch()])
            }
        }
    }

    /// Labelled source rows only.
    pub fn source_train(&self) -> Result<LabeledBatch> {
        match self {
            ProblemData::Msda(_) => self.labeled_train(),
            ProblemData::Ssda(p) => Ok(p.source.as_batch()),
        }
    }

    /// Unlabelled target training rows.
    pub fn target_unlabeled(&self) -> &Matrix {
        match self {
            ProblemData::Msda(p) => p.target.x(),
            ProblemData::Ssda(p) => p.unlabeled_target.x(),
        }
    }

    /// Writes every domain split as CSV into `dir`; returns the files written.
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        let mut put = |name: String, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            let path = dir.join(name);
            write(&path)?;
            out.push(path);
            Ok(())
        };
        match self {
            ProblemData::Msda(p) => {
                for (i, s) in p.sources.iter().enumerate() {
                    put(format!("source{i}_train.csv"), &|f| s.write_csv(f))?;
                }
                put("target_train_unlabeled.csv".into(), &|f| {
                    p.target.write_csv(f)
                })?;
                put("target_test.csv".into(), &|f| p.target_test.write_csv(f))?;
            }
            ProblemData::Ssda(p) => {
                put("source0_train.csv".into(), &|f| p.source.write_csv(f))?;
                put("target_train_labeled.csv".into(), &|f| {
                    p.labeled_target.write_csv(f)
                })?;
                put("target_train_unlabeled.csv".into(), &|f| {
                    p.unlabeled_target.write_csv(f)
                })?;
                put("target_test.csv".into(), &|f| p.target_test.write_csv(f))?;
            }
        }
        Ok(out)
    }
}

fn default_feature_dims() -> Vec<usize> {
    vec![64, 32]
}
fn default_disc_dims() -> Vec<usize> {
    vec![16]
}
fn default_temperature() -> f64 {
    0.05
}

/// Network shape; input width and class count come from the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_feature_dims")]
    pub feature_dims: Vec<usize>,
    #[serde(default = "default_disc_dims")]
    pub discriminator_dims: Vec<usize>,
    /// Defaults to the method's usual head (normalised for MME).
    #[serde(default)]
    pub classifier_kind: Option<ClassifierKind>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dims: default_feature_dims(),
            discriminator_dims: default_disc_dims(),
            classifier_kind: None,
            temperature: default_temperature(),
            init: InitScheme::default(),
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, input_dim: usize, num_classes: usize, kind: DaKind) -> Architecture {
        Architecture {
            input_dim,
            feature_dims: self.feature_dims.clone(),
            num_classes,
            num_classifiers: kind.num_classifiers(),
            discriminator_dims: self.discriminator_dims.clone(),
            classifier_kind: self
                .classifier_kind
                .unwrap_or(kind.default_classifier_kind()),
            temperature: self.temperature,
        }
    }
}

/// A bare method name or a full method object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Kind(DaKind),
    Full(DaMethod),
}

impl MethodEntry {
    pub fn method(self) -> DaMethod {
        match self {
            MethodEntry::Kind(k) => DaMethod::new(k),
            MethodEntry::Full(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    32
}
fn default_eval_interval() -> usize {
    25
}

/// A grid of runs: every method crossed with every meta mode, once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub benchmark: Benchmark,
    pub method: OneOrMany<MethodEntry>,
    pub meta_mode: OneOrMany<MetaMode>,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    /// Also write initial and final parameters of every run.
    #[serde(default)]
    pub save_params: bool,
}

/// Everything needed to reproduce one run except its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub benchmark: Benchmark,
    pub train: TrainConfig,
    pub meta_mode: MetaMode,
}

impl RunConfig {
    pub fn cell_name(&self) -> String {
        cell_name(&self.train.method, self.meta_mode)
    }
}

fn cell_name(method: &DaMethod, mode: MetaMode) -> String {
    format!("{}__{}", method.kind, mode.as_str())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates `path`; a relative `output_dir` is made relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = path
                .parent()
                .unwrap_or(Path::new("."))
                .join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds contain duplicates".into()));
        }
        if self.method.to_vec().is_empty() || self.meta_mode.to_vec().is_empty() {
            return Err(Error::Config(
                "method and meta_mode must not be empty".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for rc in self.run_configs_with_dims(2, 2) {
            if !names.insert(rc.cell_name()) {
                return Err(Error::Config(format!(
                    "grid cell {} appears twice",
                    rc.cell_name()
                )));
            }
            rc.train
                .validate()
                .map_err(|e| Error::Config(format!("{}: {}", rc.cell_name(), e)))?;
        }
        let n = self.benchmark.num_sources();
        match self.scenario {
            Scenario::Msda if n < 2 => Err(Error::Config(format!(
                "scenario msda needs at least 2 source domains, benchmark has {n}"
            ))),
            Scenario::Ssda if n != 1 => Err(Error::Config(format!(
                "scenario ssda needs exactly 1 source domain, benchmark has {n}"
            ))),
            _ => Ok(()),
        }
    }

    fn run_configs_with_dims(&self, input_dim: usize, num_classes: usize) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for entry in self.method.to_vec() {
            let method = entry.method();
            for mode in self.meta_mode.to_vec() {
                out.push(RunConfig {
                    scenario: self.scenario,
                    benchmark: self.benchmark.clone(),
                    train: TrainConfig {
                        arch: self.model.arch(input_dim, num_classes, method.kind),
                        init: self.model.init,
                        method,
                        meta: self.meta.clone(),
                        momentum: self.momentum,
                        batch_size: self.batch_size,
                        eval_interval: self.eval_interval,
                    },
                    meta_mode: mode,
                });
            }
        }
        out
    }

    /// One [`RunConfig`] per grid cell, shaped for `data`.
    pub fn run_configs(&self, data: &ProblemData) -> Vec<RunConfig> {
        self.run_configs_with_dims(data.input_dim(), data.num_classes())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Trains one run on already-built data and embeds `rc` in its report.
pub fn run_single_on(data: &ProblemData, rc: &RunConfig, seed: u64) -> Result<Trained> {
    let mut trained = train(data.problem(), &rc.train, rc.meta_mode, seed)?;
    trained.report.config = serde_json::to_value(rc)?;
    Ok(trained)
}

pub fn run_single(rc: &RunConfig, seed: u64) -> Result<Trained> {
    run_single_on(&ProblemData::build(rc.scenario, &rc.benchmark)?, rc, seed)
}

/// Re-runs a report from its embedded config and seed.
pub fn rerun_report(report: &RunReport) -> Result<RunReport> {
    let rc: RunConfig = serde_json::from_value(report.config.clone())?;
    Ok(run_single(&rc, report.seed)?.report)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Added to every configured seed.
    pub seed_offset: u64,
}

/// One `(cell, seed)` run of a grid.
#[derive(Clone, Debug)]
pub struct JobOutcome {
    pub cell: String,
    pub seed: u64,
    pub result: std::result::Result<RunReport, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub meta_mode: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
    pub s_per_outer_iter: f64,
    pub n_failed: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub jobs: Vec<JobOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutcome {
    pub fn n_failed(&self) -> usize {
        self.jobs.iter().filter(|j| j.result.is_err()).count()
    }

    /// Successful reports of one cell, in seed order.
    pub fn reports(&self, cell: &str) -> Vec<&RunReport> {
        let mut v: Vec<&JobOutcome> = self.jobs.iter().filter(|j| j.cell == cell).collect();
        v.sort_by_key(|j| j.seed);
        v.into_iter()
            .filter_map(|j| j.result.as_ref().ok())
            .collect()
    }
}

/// Record written in place of a report when a run fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub config: serde_json::Value,
    pub seed: u64,
    pub error: String,
}

pub(crate) const REPORTS_DIR: &str = "reports";
pub(crate) const PARAMS_DIR: &str = "params";

pub fn report_file_name(cell: &str, seed: u64) -> String {
    format!("{cell}__seed{seed}.json")
}

pub fn failure_file_name(cell: &str, seed: u64) -> String {
    format!("{cell}__seed{seed}.error.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the grid on the current rayon pool and writes reports and
/// `summary.csv` under `cfg.output_dir`. Failed runs are recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = ProblemData::build(cfg.scenario, &cfg.benchmark)?;
    let reports_dir = cfg.output_dir.join(REPORTS_DIR);
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let params_dir = cfg.output_dir.join(PARAMS_DIR);
    if cfg.save_params {
        fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    }

    let run_cfgs = cfg.run_configs(&data);
    let grid: Vec<(&RunConfig, u64)> = run_cfgs
        .iter()
        .flat_map(|rc| {
            cfg.seeds
                .iter()
                .map(move |&s| (rc, s.wrapping_add(opts.seed_offset)))
        })
        .collect();

    let jobs: Vec<JobOutcome> = grid
        .par_iter()
        .map(|&(rc, seed)| {
            let cell = rc.cell_name();
            let result = run_job(
                &data,
                rc,
                seed,
                &reports_dir,
                cfg.save_params.then_some(params_dir.as_path()),
            );
            match &result {
                Ok(r) => log::info!("{cell} seed {seed}: final acc {:.4}", r.final_acc),
                Err(e) => log::error!("{cell} seed {seed} failed: {e}"),
            }
            JobOutcome { cell, seed, result }
        })
        .collect();

    let summary = run_cfgs
        .iter()
        .map(|rc| {
            let cell = rc.cell_name();
            let mine: Vec<&JobOutcome> = jobs.iter().filter(|j| j.cell == cell).collect();
            let ok: Vec<&RunReport> = mine.iter().filter_map(|j| j.result.as_ref().ok()).collect();
            summary_row(
                rc.train.method.kind.as_str(),
                rc.meta_mode.as_str(),
                &ok,
                mine.len() - ok.len(),
            )
        })
        .collect::<Vec<_>>();
    write_summary(&cfg.output_dir.join("summary.csv"), &summary)?;
    Ok(ExperimentOutcome { jobs, summary })
}

fn run_job(
    data: &ProblemData,
    rc: &RunConfig,
    seed: u64,
    reports_dir: &Path,
    params_dir: Option<&Path>,
) -> std::result::Result<RunReport, String> {
    let cell = rc.cell_name();
    let attempt = || -> Result<RunReport> {
        let trained = run_single_on(data, rc, seed)?;
        write_json(
            &reports_dir.join(report_file_name(&cell, seed)),
            &trained.report,
        )?;
        if let Some(dir) = params_dir {
            let arch = &rc.train.arch;
            trained
                .initial_params
                .save(arch, &dir.join(format!("{cell}__seed{seed}__init.bin")))?;
            trained
                .params
                .save(arch, &dir.join(format!("{cell}__seed{seed}__final.bin")))?;
        }
        Ok(trained.report)
    };
    attempt().map_err(|e| {
        let msg = e.to_string();
        let record = FailureRecord {
            config: serde_json::to_value(rc).unwrap_or(serde_json::Value::Null),
            seed,
            error: msg.clone(),
        };
        if let Err(w) = write_json(&reports_dir.join(failure_file_name(&cell, seed)), &record) {
            log::error!("could not record failure of {cell} seed {seed}: {w}");
        }
        msg
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub(crate) fn summary_row(
    method: &str,
    mode: &str,
    ok: &[&RunReport],
    n_failed: usize,
) -> SummaryRow {
    let accs: Vec<f64> = ok.iter().map(|r| r.final_acc).collect();
    let times: Vec<f64> = ok.iter().map(|r| r.timing_s_per_outer_iter).collect();
    let (mean_acc, std_acc) = mean_std(&accs);
    SummaryRow {
        method: method.to_string(),
        meta_mode: mode.to_string(),
        mean_acc,
        std_acc,
        n_seeds: ok.len(),
        s_per_outer_iter: mean_std(&times).0,
        n_failed,
    }
}

pub(crate) fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "meta_mode",
        "mean_acc",
        "std_acc",
        "n_seeds",
        "s_per_outer_iter",
        "n_failed",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.meta_mode.clone(),
            fmt_f64(r.mean_acc),
            fmt_f64(r.std_acc),
            r.n_seeds.to_string(),
            fmt_f64(r.s_per_outer_iter),
            r.n_failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_moons() -> Benchmark {
        Benchmark::RotatedMoons(MoonsBenchmark {
            n_per_class: 30,
            ..MoonsBenchmark::default()
        })
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            scenario: Scenario::Msda,
            benchmark: small_moons(),
            method: OneOrMany::One(MethodEntry::Kind(DaKind::Dann)),
            meta_mode: OneOrMany::Many(vec![MetaMode::Online, MetaMode::Vanilla]),
            meta: MetaConfig {
                i: 4,
                s: 2,
                ..MetaConfig::default()
            },
            model: ModelConfig {
                feature_dims: vec![6],
                discriminator_dims: vec![4],
                ..ModelConfig::default()
            },
            momentum: 0.9,
            batch_size: 8,
            eval_interval: 3,
            seeds: vec![1, 2, 3],
            output_dir: dir.to_path_buf(),
            save_params: false,
        }
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"scenario": "msda", "method": "dann", "meta_mode": ["online", "vanilla"],
                "seeds": [1], "output_dir": "out"}"#,
        )
        .unwrap();
        assert_eq!(cfg.benchmark, Benchmark::default());
        assert_eq!(cfg.method.to_vec(), vec![MethodEntry::Kind(DaKind::Dann)]);
        assert_eq!(cfg.meta, MetaConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_full_method_objects_and_benchmarks() {
        let cfg = ExperimentConfig::from_json(
            r#"{"scenario": "ssda",
                "benchmark": {"kind": "gaussian-shift", "class_means": [[0,0],[2,2]],
                              "source_offsets": [[0,0]], "target_offset": [1,-1], "cov_scale": 0.2},
                "method": [{"kind": "mme", "lambda": 0.1}, "dann"], "meta_mode": "online",
                "meta": {"j": 2, "meta_alpha": 0.001}, "seeds": [4], "output_dir": "o"}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        let m = cfg.method.to_vec();
        assert_eq!(m[0].method().lambda, 0.1);
        assert_eq!(cfg.meta.meta_alpha(), 0.001);
        let data = ProblemData::build(cfg.scenario, &cfg.benchmark).unwrap();
        match &data {
            ProblemData::Ssda(p) => assert_eq!(p.labeled_target.len(), 6),
            _ => panic!(),
        }
    }

    #[test]
    fn unknown_fields_are_rejected_with_position() {
        let err = ExperimentConfig::from_json(
            "{\"scenario\": \"msda\", \"method\": \"dann\", \"meta_mode\": \"online\",\n \"seeds\": [1], \"output_dir\": \"o\", \"sedes\": 3}",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("sedes") && err.contains("line 2"), "{err}");
        let err = ExperimentConfig::from_json(
            r#"{"scenario": "msda", "benchmark": {"kind": "rotated-moons", "n_per_clas": 3},
                "method": "dann", "meta_mode": "online", "seeds": [1], "output_dir": "o"}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("n_per_clas"), "{err}");
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let dir = Path::new("unused");
        let mut c = tiny_config(dir);
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config(dir);
        c.scenario = Scenario::Ssda;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("exactly 1 source"));
        let mut c = tiny_config(dir);
        c.meta_mode = OneOrMany::Many(vec![MetaMode::Online, MetaMode::Online]);
        assert!(c.validate().unwrap_err().to_string().contains("twice"));
        let mut c = tiny_config(dir);
        c.meta.s = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_writes_one_report_per_seed_and_a_consistent_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path());
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.n_failed(), 0);
        for cell in ["dann__online", "dann__vanilla"] {
            for seed in [1, 2, 3] {
                assert!(tmp
                    .path()
                    .join(REPORTS_DIR)
                    .join(report_file_name(cell, seed))
                    .exists());
            }
            let row = out
                .summary
                .iter()
                .find(|r| format!("{}__{}", r.method, r.meta_mode) == cell)
                .unwrap();
            let accs: Vec<f64> = out.reports(cell).iter().map(|r| r.final_acc).collect();
            assert_eq!(row.n_seeds, 3);
            assert_eq!(row.mean_acc, accs.iter().sum::<f64>() / 3.0);
        }
        let text = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
        assert!(
            text.starts_with("method,meta_mode,mean_acc,std_acc,n_seeds,s_per_outer_iter,n_failed")
        );
    }

    #[test]
    fn reports_embed_a_reproducing_config() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tmp.path());
        cfg.seeds = vec![7];
        let out = run_experiment(&cfg, &RunOptions { seed_offset: 10 }).unwrap();
        let r = out.reports("dann__online")[0];
        assert_eq!(r.seed, 17);
        let again = rerun_report(r).unwrap();
        assert_eq!(again.without_timing(), r.without_timing());
    }

    #[test]
    fn failed_run_is_recorded_and_others_continue() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(tmp.path());
        // Huge steps blow the parameters up to infinity.
        cfg.meta.alpha = 1e200;
        cfg.meta.meta_alpha = Some(0.01);
        cfg.meta_mode = OneOrMany::Many(vec![MetaMode::Vanilla]);
        cfg.method = OneOrMany::Many(vec![MethodEntry::Kind(DaKind::Dann)]);
        let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.n_failed(), 3);
        assert_eq!(out.summary[0].n_failed, 3);
        assert!(tmp
            .path()
            .join(REPORTS_DIR)
            .join(failure_file_name("dann__vanilla", 1))
            .exists());
    }

    #[test]
    fn export_writes_every_split() {
        let tmp = tempfile::tempdir().unwrap();
        let data = ProblemData::build(Scenario::Msda, &small_moons()).unwrap();
        let files = data.export_csv(tmp.path()).unwrap();
        assert_eq!(files.len(), 5);
        let back = DomainDataset::read_csv(&files[0], 2).unwrap();
        match &data {
            ProblemData::Msda(p) => assert_eq!(back.x(), p.sources[0].x()),
            _ => unreachable!(),
        }
    }
}
