//! Meta-updates of the initial condition and the training loops around them.
//!
//! `UpdateIC` copies the current parameters, runs `J` plain gradient steps
//! of the base adaptation objective on the copy, and then moves the
//! original parameters with the supervised validation gradient evaluated at
//! the end of that rollout. [`update_ic_spg`] expresses the evaluation point
//! as `theta0 - (theta0 - theta_J)` on a tape rooted at `theta0`, so the
//! rollout itself is never differentiated; [`update_ic_firstorder`] takes the
//! gradient at `theta_J` directly. The two agree to rounding.
//! [`update_ic_exact_fd`] is the full second-order meta-gradient by central
//! differences, for small models only.
//!
//! The trainers interleave one meta-update with `S` momentum-SGD adaptation
//! steps (online), front-load all meta-updates (sequential), or skip them
//! (vanilla, source-only). Meta-episodes draw from RNG streams disjoint from
//! the adaptation batches, so a zero meta step leaves the adaptation
//! trajectory bit-identical to vanilla training.

use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::da::{
    adapt_step, sup_loss, supervised_step, DaMethod, ParamMask, SgdState, StepLosses, Stepper,
};
use crate::domains::{
    batch_iter, sample_meta_split, BatchStream, DomainDataset, LabeledBatch, UnlabeledView,
};
use crate::error::{ensure, Error, Result};
use crate::models::{accuracy, init_params, Architecture, InitScheme, Module, Net, ParamSet};
use crate::seeding::*;
use crate::tensor::Matrix;

/// Which parameters the meta step moves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScope {
    #[default]
    AllParams,
    /// Skip the discriminator and the second classifier head.
    ExcludeAdversarial,
}

impl UpdateScope {
    fn mask(self, arch: &Architecture) -> ParamMask {
        match self {
            UpdateScope::AllParams => ParamMask::all(arch),
            UpdateScope::ExcludeAdversarial => {
                ParamMask::modules(arch, |m| matches!(m, Module::Features | Module::Head(0)))
            }
        }
    }
}

fn default_j() -> usize {
    1
}
fn default_s() -> usize {
    3
}
fn default_i() -> usize {
    1000
}
fn default_alpha() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner steps per meta-update.
    #[serde(default = "default_j")]
    pub j: usize,
    /// Adaptation steps per meta-update.
    #[serde(default = "default_s")]
    pub s: usize,
    /// Outer iterations.
    #[serde(default = "default_i")]
    pub i: usize,
    /// Learning rate of the inner rollout and of the adaptation steps.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Meta step size; `alpha` when absent.
    #[serde(default)]
    pub meta_alpha: Option<f64>,
    #[serde(default)]
    pub update_scope: UpdateScope,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            j: default_j(),
            s: default_s(),
            i: default_i(),
            alpha: default_alpha(),
            meta_alpha: None,
            update_scope: UpdateScope::AllParams,
        }
    }
}

impl MetaConfig {
    pub fn meta_alpha(&self) -> f64 {
        self.meta_alpha.unwrap_or(self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.j >= 1, "J must be >= 1");
        ensure!(self.s >= 1, "S must be >= 1");
        ensure!(self.i >= 1, "I must be >= 1");
        ensure!(
            self.alpha > 0.0 && self.alpha.is_finite(),
            "alpha must be > 0"
        );
        let m = self.meta_alpha();
        ensure!(
            m >= 0.0 && m.is_finite(),
            "meta_alpha must be finite and >= 0"
        );
        Ok(())
    }
}

/// One inner-loop minibatch pair: labelled meta-train rows and unlabelled meta-test rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerBatch {
    pub src: LabeledBatch,
    pub tgt: Matrix,
}

/// Data consumed by one meta-update. The rollout length is `inner.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaEpisode {
    pub inner: Vec<InnerBatch>,
    pub val: LabeledBatch,
    pub meta_train_tags: Vec<String>,
    pub meta_test_tag: String,
}

impl MetaEpisode {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.val.is_empty(), "meta-validation batch is empty");
        ensure!(
            !self.meta_train_tags.contains(&self.meta_test_tag),
            "meta-test domain {} also appears in meta-train",
            self.meta_test_tag
        );
        Ok(())
    }
}

/// `J` plain gradient steps of `method` from a copy of `params`.
pub fn inner_rollout(
    method: &DaMethod,
    params: &ParamSet,
    arch: &Architecture,
    episode: &MetaEpisode,
    alpha: f64,
) -> Result<ParamSet> {
    let mut tilde = params.clone();
    for b in &episode.inner {
        adapt_step(
            method,
            &mut tilde,
            arch,
            &b.src,
            None,
            &b.tgt,
            &mut Stepper::Plain(alpha),
        )?;
    }
    Ok(tilde)
}

fn meta_step(
    params: &ParamSet,
    arch: &Architecture,
    grad: &[f64],
    cfg: &MetaConfig,
) -> Result<ParamSet> {
    let mut out = params.clone();
    crate::da::plain_step(
        &mut out,
        grad,
        cfg.meta_alpha(),
        &cfg.update_scope.mask(arch),
    )?;
    Ok(out)
}

/// Shortest-path-gradient meta-update.
///
/// With `short = theta0 - theta_J` held constant, the outer loss is built on a
/// tape whose leaves are `theta0` and evaluated at `theta0 - short`; its
/// gradient with respect to `theta0` drives the step
/// `theta0 - meta_alpha * grad`.
pub fn update_ic_spg(
    params: &ParamSet,
    arch: &Architecture,
    episode: &MetaEpisode,
    method: &DaMethod,
    cfg: &MetaConfig,
) -> Result<ParamSet> {
    episode.validate()?;
    let tilde = inner_rollout(method, params, arch, episode, cfg.alpha)?;

    let mut tape = Tape::new();
    let theta0 = params.to_tape(&mut tape);
    let mut shifted = Vec::with_capacity(theta0.len());
    for ((&leaf, p0), pj) in theta0.iter().zip(params.tensors()).zip(tilde.tensors()) {
        let neg_short = pj.zip_map(p0, |j, z| -(z - j));
        let c = tape.leaf(neg_short);
        shifted.push(tape.add(leaf, c)?);
    }
    let net = Net::new(arch, &shifted)?;
    let obj = crate::da::build_objective(&mut tape, method, &net, &episode.val, None, None)?;
    let graph = crate::da::LossGraph {
        tape,
        params: theta0,
        objective: obj,
    };
    let grad = graph.gradient("meta-update (shortest path)")?;
    meta_step(params, arch, &grad, cfg)
}

/// First-order meta-update: the validation gradient taken at `theta_J`
/// applied to `theta0`.
pub fn update_ic_firstorder(
    params: &ParamSet,
    arch: &Architecture,
    episode: &MetaEpisode,
    method: &DaMethod,
    cfg: &MetaConfig,
) -> Result<ParamSet> {
    episode.validate()?;
    let tilde = inner_rollout(method, params, arch, episode, cfg.alpha)?;
    let grad =
        sup_loss(method, &tilde, arch, &episode.val)?.gradient("meta-update (first order)")?;
    meta_step(params, arch, &grad, cfg)
}

/// A two-level objective over a flat parameter vector.
pub trait BilevelProblem {
    fn dim(&self) -> usize;
    /// Parameters after inner step `step` (0-based) taken from `theta`.
    fn inner_update(&self, theta: &[f64], step: usize, alpha: f64) -> Result<Vec<f64>>;
    fn outer_loss(&self, theta: &[f64]) -> Result<f64>;
}

/// Outer loss after `steps` inner updates from `theta0`.
pub fn rollout_outer_loss<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    steps: usize,
    alpha: f64,
) -> Result<f64> {
    let mut theta = theta0.to_vec();
    for j in 0..steps {
        theta = problem.inner_update(&theta, j, alpha)?;
    }
    problem.outer_loss(&theta)
}

/// Largest model [`update_ic_exact_fd`] accepts: the oracle costs two full
/// rollouts per parameter.
pub const EXACT_FD_MAX_PARAMS: usize = 200;

/// Full meta-gradient `d L_outer(rollout(theta0)) / d theta0` by central differences.
pub fn exact_meta_gradient_fd<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    steps: usize,
    alpha: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    ensure!(eps > 0.0, "finite-difference step must be positive");
    ensure!(
        theta0.len() == problem.dim(),
        "theta0 has the wrong dimension"
    );
    let mut work = theta0.to_vec();
    let mut out = Vec::with_capacity(theta0.len());
    for i in 0..theta0.len() {
        work[i] = theta0[i] + eps;
        let plus = rollout_outer_loss(problem, &work, steps, alpha)?;
        work[i] = theta0[i] - eps;
        let minus = rollout_outer_loss(problem, &work, steps, alpha)?;
        work[i] = theta0[i];
        let g = (plus - minus) / (2.0 * eps);
        if !g.is_finite() {
            return Err(Error::numeric(
                "exact meta-gradient",
                format!("coordinate {i}"),
            ));
        }
        out.push(g);
    }
    Ok(out)
}

/// A network, base method and episode seen as a [`BilevelProblem`].
pub struct EpisodeProblem<'a> {
    pub method: &'a DaMethod,
    pub arch: &'a Architecture,
    pub episode: &'a MetaEpisode,
}

impl BilevelProblem for EpisodeProblem<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn inner_update(&self, theta: &[f64], step: usize, alpha: f64) -> Result<Vec<f64>> {
        let b = &self.episode.inner[step];
        let mut p = ParamSet::unflatten(theta, self.arch)?;
        adapt_step(
            self.method,
            &mut p,
            self.arch,
            &b.src,
            None,
            &b.tgt,
            &mut Stepper::Plain(alpha),
        )?;
        Ok(p.flatten())
    }

    fn outer_loss(&self, theta: &[f64]) -> Result<f64> {
        let p = ParamSet::unflatten(theta, self.arch)?;
        Ok(sup_loss(self.method, &p, self.arch, &self.episode.val)?.total())
    }
}

/// Exact (second-order) meta-gradient of one episode by finite differences.
pub fn update_ic_exact_fd(
    params: &ParamSet,
    arch: &Architecture,
    episode: &MetaEpisode,
    method: &DaMethod,
    cfg: &MetaConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    episode.validate()?;
    let n = params.len();
    if n > EXACT_FD_MAX_PARAMS {
        return Err(Error::contract(format!(
            "exact meta-gradient oracle refused: {n} parameters exceeds the cap of {EXACT_FD_MAX_PARAMS}"
        )));
    }
    let problem = EpisodeProblem {
        method,
        arch,
        episode,
    };
    exact_meta_gradient_fd(
        &problem,
        &params.flatten(),
        episode.inner.len(),
        cfg.alpha,
        eps,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaMode {
    Online,
    Sequential,
    Vanilla,
    SourceOnly,
}

impl MetaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaMode::Online => "online",
            MetaMode::Sequential => "sequential",
            MetaMode::Vanilla => "vanilla",
            MetaMode::SourceOnly => "source-only",
        }
    }

    fn uses_meta(self) -> bool {
        matches!(self, MetaMode::Online | MetaMode::Sequential)
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

/// Everything a trainer needs besides the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    #[serde(default)]
    pub init: InitScheme,
    pub method: DaMethod,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Evaluate every this many adaptation steps.
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
}

impl TrainConfig {
    /// Defaults for the 2-D, 2-class synthetic benchmarks.
    pub fn for_method(method: DaMethod) -> Self {
        let mut arch = Architecture::new(2, 2);
        arch.num_classifiers = method.kind.num_classifiers();
        arch.classifier_kind = method.kind.default_classifier_kind();
        TrainConfig {
            arch,
            init: InitScheme::default(),
            method,
            meta: MetaConfig::default(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            eval_interval: default_eval_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.method.validate()?;
        self.meta.validate()?;
        ensure!(
            self.arch.num_classifiers >= self.method.kind.num_classifiers(),
            "{} needs {} classifier heads",
            self.method.kind,
            self.method.kind.num_classifiers()
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must be in [0, 1)"
        );
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(self.eval_interval >= 1, "eval_interval must be >= 1");
        Ok(())
    }
}

/// Multi-source problem: labelled sources, unlabelled target, held-out target test split.
#[derive(Clone, Debug)]
pub struct MsdaProblem {
    pub sources: Vec<DomainDataset>,
    pub target: UnlabeledView,
    pub target_test: DomainDataset,
}

/// Semi-supervised problem: one source, a few labelled target rows, the
/// unlabelled remainder, and a held-out target test split.
#[derive(Clone, Debug)]
pub struct SsdaProblem {
    pub source: DomainDataset,
    pub labeled_target: DomainDataset,
    pub unlabeled_target: UnlabeledView,
    pub target_test: DomainDataset,
}

impl SsdaProblem {
    pub fn new(
        source: DomainDataset,
        labeled_target: DomainDataset,
        unlabeled_target: UnlabeledView,
        target_test: DomainDataset,
    ) -> Result<Self> {
        let p = SsdaProblem {
            source,
            labeled_target,
            unlabeled_target,
            target_test,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.labeled_target.is_empty(),
            "labelled target set is empty"
        );
        ensure!(
            !self.labeled_target.overlaps(
                self.target_test.domain_tag(),
                self.target_test.split(),
                self.target_test.indices()
            ),
            "labelled target rows overlap the target test split"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Problem<'a> {
    Msda(&'a MsdaProblem),
    Ssda(&'a SsdaProblem),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTraces {
    pub sup: Vec<f64>,
    pub adapt: Vec<f64>,
}

/// Exact step counts of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub update_ic_calls: usize,
    pub inner_steps: usize,
    pub da_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub seed: u64,
    /// `[da_step, target accuracy]` pairs.
    pub curve: Vec<(usize, f64)>,
    /// Mean losses over the steps between consecutive evaluation points.
    pub losses: LossTraces,
    pub timing_s_per_outer_iter: f64,
    pub final_acc: f64,
    pub budget: Budget,
}

impl RunReport {
    /// Copy with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            timing_s_per_outer_iter: 0.0,
            ..self.clone()
        }
    }
}

/// A finished run: its report plus the initial and final parameters.
#[derive(Clone, Debug)]
pub struct Trained {
    pub report: RunReport,
    pub initial_params: ParamSet,
    pub params: ParamSet,
}

fn stream(n: usize, batch_size: usize, seed: u64, id: u64) -> Result<BatchStream> {
    batch_iter(n, batch_size.min(n), stream_rng(seed, id))
}

/// Per-scenario batch sampling.
trait Sampler {
    fn da_step(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamSet,
        opt: &mut SgdState,
    ) -> Result<StepLosses>;
    fn source_only_step(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamSet,
        opt: &mut SgdState,
    ) -> Result<StepLosses>;
    fn episode(&mut self, j: usize) -> Result<MetaEpisode>;
    fn eval_set(&self) -> &DomainDataset;
}

struct MsdaSampler<'a> {
    p: &'a MsdaProblem,
    da_src: Vec<BatchStream>,
    da_tgt: BatchStream,
    split_rng: ChaCha8Rng,
    meta_src: Vec<BatchStream>,
    meta_heldout: Vec<BatchStream>,
    meta_val: Vec<BatchStream>,
}

impl<'a> MsdaSampler<'a> {
    fn new(p: &'a MsdaProblem, batch: usize, seed: u64) -> Result<Self> {
        ensure!(
            p.sources.len() >= 2,
            "multi-source adaptation needs at least 2 source domains, got {}",
            p.sources.len()
        );
        ensure!(!p.target.is_empty(), "target domain is empty");
        let per_source = |base: u64| -> Result<Vec<BatchStream>> {
            p.sources
                .iter()
                .enumerate()
                .map(|(i, d)| stream(d.len(), batch, seed, base + i as u64))
                .collect()
        };
        Ok(MsdaSampler {
            p,
            da_src: per_source(STREAM_DA_SOURCE)?,
            da_tgt: stream(p.target.len(), batch, seed, STREAM_DA_TARGET)?,
            split_rng: stream_rng(seed, STREAM_META_SPLIT),
            meta_src: per_source(STREAM_META_SOURCE)?,
            meta_heldout: per_source(STREAM_META_HELDOUT)?,
            meta_val: per_source(STREAM_META_VAL)?,
        })
    }

    fn source_batch(&mut self) -> Result<LabeledBatch> {
        let parts: Vec<LabeledBatch> = self
            .p
            .sources
            .iter()
            .zip(self.da_src.iter_mut())
            .map(|(d, s)| d.batch(&s.next_batch()))
            .collect();
        LabeledBatch::concat(&parts)
    }
}

impl Sampler for MsdaSampler<'_> {
    fn da_step(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamSet,
        opt: &mut SgdState,
    ) -> Result<StepLosses> {
        let src = self.source_batch()?;
        let tgt = self.p.target.batch(&self.da_tgt.next_batch());
        crate::da::da_step(&cfg.method, params, &cfg.arch, &src, &tgt, opt)
    }

    fn source_only_step(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamSet,
        opt: &mut SgdState,
    ) -> Result<StepLosses> {
        let src = self.source_batch()?;
        supervised_step(&cfg.method, params, &cfg.arch, &src, None, opt)
    }

    fn episode(&mut self, j: usize) -> Result<MetaEpisode> {
        let split = sample_meta_split(&self.p.sources, &mut self.split_rng)?;
        let sources = &self.p.sources;
        let mte = split.meta_test;
        let mut inner = Vec::with_capacity(j);
        for _ in 0..j {
            let parts: Vec<LabeledBatch> = split
                .meta_train
                .iter()
                .map(|&i| sources[i].batch(&self.meta_src[i].next_batch()))
                .collect();
            let tgt = sources[mte]
                .x()
                .select_rows(&self.meta_heldout[mte].next_batch());
            inner.push(InnerBatch {
                src: LabeledBatch::concat(&parts)?,
                tgt,
            });
        }
        let val = sources[mte].batch(&self.meta_val[mte].next_batch());
        Ok(MetaEpisode {
            inner,
            val,
            meta_train_tags: split
                .meta_train
                .iter()
                .map(|&i| sources[i].domain_tag().to_string())
                .collect(),
            meta_test_tag: sources[mte].domain_tag().to_string(),
        })
    }

    fn eval_set(&self) -> &DomainDataset {
        &self.p.target_test
    }
}

struct SsdaSampler<'a> {
    p: &'a SsdaProblem,
    da_src: BatchStream,
    da_lab: BatchStream,
    da_tgt: BatchStream,
    meta_src: BatchStream,
    meta_tgt: BatchStream,
    meta_lab: BatchStream,
}

impl<'a> SsdaSampler<'a> {
    fn new(p: &'a SsdaProblem, batch: usize, seed: u64) -> Result<Self> {
        p.validate()?;
        ensure!(
            !p.unlabeled_target.is_empty(),
            "unlabelled target set is empty"
        );
        Ok(SsdaSampler {
            p,
            da_src: stream(p.source.len(), batch, seed, STREAM_DA_SOURCE)?,
            da_lab: stream(
                p.labeled_target.len(),
                batch,
                seed,
                STREAM_DA_TARGET_LABELED,
            )?,
            da_tgt: stream(p.unlabeled_target.len(), batch, seed, STREAM_DA_TARGET)?,
            meta_src: stream(p.source.len(), batch, seed, STREAM_META_SOURCE)?,
            meta_tgt: stream(p.unlabeled_target.len(), batch, seed, STREAM_META_TARGET)?,
            meta_lab: stream(
                p.labeled_target.len(),
                batch,
                seed,
                STREAM_META_TARGET_LABELED,
            )?,
        })
    }
}

impl Sampler for SsdaSampler<'_> {
    fn da_step(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamSet,
        opt: &mut SgdState,
    ) -> Result<StepLosses> {
        let src = self.p.source.batch(&self.da_src.next_batch());
        let lab = self.p.labeled_target.batch(&self.da_lab.next_batch());
        let tgt = self.p.unlabeled_target.batch(&self.da_tgt.next_batch());
        crate::da::ssda_step(&cfg.method, params, &cfg.arch, &src, &lab, &tgt, opt)
    }

    fn source_only_step(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamSet,
        opt: &mut SgdState,
    ) -> Result<StepLosses> {
        let src = self.p.source.batch(&self.da_src.next_batch());
        supervised_step(&cfg.method, params, &cfg.arch, &src, None, opt)
    }

    fn episode(&mut self, j: usize) -> Result<MetaEpisode> {
        let inner = (0..j)
            .map(|_| InnerBatch {
                src: self.p.source.batch(&self.meta_src.next_batch()),
                tgt: self.p.unlabeled_target.batch(&self.meta_tgt.next_batch()),
            })
            .collect();
        Ok(MetaEpisode {
            inner,
            val: self.p.labeled_target.batch(&self.meta_lab.next_batch()),
            meta_train_tags: vec![self.p.source.domain_tag().to_string()],
            meta_test_tag: self.p.labeled_target.domain_tag().to_string(),
        })
    }

    fn eval_set(&self) -> &DomainDataset {
        &self.p.target_test
    }
}

struct Recorder {
    interval: usize,
    total: usize,
    steps: usize,
    pending: Vec<StepLosses>,
    curve: Vec<(usize, f64)>,
    losses: LossTraces,
}

impl Recorder {
    fn record(&mut self, l: StepLosses, eval: impl FnOnce() -> Result<f64>) -> Result<()> {
        self.steps += 1;
        self.pending.push(l);
        if self.steps.is_multiple_of(self.interval) || self.steps == self.total {
            let n = self.pending.len() as f64;
            self.losses
                .sup
                .push(self.pending.iter().map(|l| l.sup).sum::<f64>() / n);
            self.losses
                .adapt
                .push(self.pending.iter().map(|l| l.adapt).sum::<f64>() / n);
            self.pending.clear();
            self.curve.push((self.steps, eval()?));
        }
        Ok(())
    }
}

fn run_trainer(
    sampler: &mut dyn Sampler,
    cfg: &TrainConfig,
    mode: MetaMode,
    seed: u64,
) -> Result<Trained> {
    cfg.validate()?;
    let arch = &cfg.arch;
    let meta = &cfg.meta;
    let initial = init_params(arch, &cfg.init, seed)?;
    let mut params = initial.clone();
    let mut opt = SgdState::new(meta.alpha, cfg.momentum, params.len())?;
    let mut budget = Budget::default();
    let mut busy = Duration::ZERO;
    let mut rec = Recorder {
        interval: cfg.eval_interval,
        total: meta.i * meta.s,
        steps: 0,
        pending: Vec::new(),
        curve: Vec::new(),
        losses: LossTraces::default(),
    };

    let meta_update =
        |params: &mut ParamSet, sampler: &mut dyn Sampler, budget: &mut Budget| -> Result<()> {
            let ep = sampler.episode(meta.j)?;
            *params = update_ic_spg(params, arch, &ep, &cfg.method, meta)?;
            budget.update_ic_calls += 1;
            budget.inner_steps += ep.inner.len();
            Ok(())
        };

    if mode == MetaMode::Sequential {
        let t = Instant::now();
        for _ in 0..meta.i {
            meta_update(&mut params, sampler, &mut budget)?;
        }
        busy += t.elapsed();
    }

    for _ in 0..meta.i {
        let mut t = Instant::now();
        if mode == MetaMode::Online {
            meta_update(&mut params, sampler, &mut budget)?;
        }
        for _ in 0..meta.s {
            let losses = if mode == MetaMode::SourceOnly {
                sampler.source_only_step(cfg, &mut params, &mut opt)?
            } else {
                sampler.da_step(cfg, &mut params, &mut opt)?
            };
            budget.da_steps += 1;
            busy += t.elapsed();
            rec.record(losses, || accuracy(&params, arch, sampler.eval_set(), 0))?;
            t = Instant::now();
        }
    }
    debug_assert!(!mode.uses_meta() || budget.update_ic_calls == meta.i);

    let final_acc = match rec.curve.last() {
        Some(&(_, acc)) => acc,
        None => accuracy(&params, arch, sampler.eval_set(), 0)?,
    };
    let mut config = serde_json::to_value(cfg)?;
    config["meta_mode"] = serde_json::Value::from(mode.as_str());
    Ok(Trained {
        report: RunReport {
            config,
            seed,
            curve: rec.curve,
            losses: rec.losses,
            timing_s_per_outer_iter: busy.as_secs_f64() / meta.i as f64,
            final_acc,
            budget,
        },
        initial_params: initial,
        params,
    })
}

/// Runs one trainer of the given mode.
pub fn train(
    problem: Problem<'_>,
    cfg: &TrainConfig,
    mode: MetaMode,
    seed: u64,
) -> Result<Trained> {
    match problem {
        Problem::Msda(p) => run_trainer(
            &mut MsdaSampler::new(p, cfg.batch_size, seed)?,
            cfg,
            mode,
            seed,
        ),
        Problem::Ssda(p) => run_trainer(
            &mut SsdaSampler::new(p, cfg.batch_size, seed)?,
            cfg,
            mode,
            seed,
        ),
    }
}

/// Online meta-learning for multi-source adaptation: each outer iteration
/// holds out one source as meta-test, meta-updates, then adapts all sources
/// to the target for `S` steps.
pub fn train_online_msda(problem: &MsdaProblem, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    train(Problem::Msda(problem), cfg, MetaMode::Online, seed)
}

/// Online meta-learning for semi-supervised adaptation: the few labelled
/// target rows validate each meta-update.
pub fn train_online_ssda(problem: &SsdaProblem, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    train(Problem::Ssda(problem), cfg, MetaMode::Online, seed)
}

/// All `I` meta-updates first, then all `I * S` adaptation steps.
pub fn train_sequential(problem: Problem<'_>, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    train(problem, cfg, MetaMode::Sequential, seed)
}

pub fn train_vanilla(problem: Problem<'_>, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    train(problem, cfg, MetaMode::Vanilla, seed)
}

pub fn train_source_only(problem: Problem<'_>, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    train(problem, cfg, MetaMode::SourceOnly, seed)
}
