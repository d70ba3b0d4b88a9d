//! Base domain-adaptation objectives and their optimisation steps.
//!
//! Every method has the form `L_sup(src) + lambda * L_a(src, tgt)`:
//!
//! * **DANN**: `L_a` is the binary cross-entropy of the discriminator on
//!   features of source (label 1) and target (label 0) rows. Features reach
//!   the discriminator through a gradient reversal, so one descent step trains
//!   the discriminator to separate the domains and the feature extractor to
//!   confuse it.
//! * **MCD**: two heads; `L_sup` sums both heads' cross-entropy and `L_a` is
//!   the negated L1 discrepancy of the heads on target features. In the
//!   one-step variant target features pass a gradient reversal (heads maximise
//!   the discrepancy, features minimise it). The multi-step variant instead
//!   alternates explicit phases with frozen parameter groups.
//! * **MME**: `L_a` is the negated entropy of target predictions behind a
//!   gradient reversal: the classifier maximises target entropy, the feature
//!   extractor minimises it.
//!
//! The reversal coefficient is 1 and the adaptation weight is applied once,
//! as the outer `lambda`, so the adversary sees `lambda * grad L_a` and the
//! feature extractor `-lambda * grad L_a`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradReverseCoeff, NodeId, Tape};
use crate::domains::LabeledBatch;
use crate::error::{ensure, Error, Result};
use crate::models::{Architecture, ClassifierKind, Module, Net, ParamSet};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DaKind {
    Dann,
    McdOnestep,
    McdMultistep,
    Mme,
}

impl DaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DaKind::Dann => "dann",
            DaKind::McdOnestep => "mcd-onestep",
            DaKind::McdMultistep => "mcd-multistep",
            DaKind::Mme => "mme",
        }
    }

    pub fn num_classifiers(self) -> usize {
        match self {
            DaKind::McdOnestep | DaKind::McdMultistep => 2,
            DaKind::Dann | DaKind::Mme => 1,
        }
    }

    pub fn default_classifier_kind(self) -> ClassifierKind {
        match self {
            DaKind::Mme => ClassifierKind::NormalizedWithTemperature,
            _ => ClassifierKind::PlainLinear,
        }
    }
}

impl fmt::Display for DaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_n_steps() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaMethod {
    pub kind: DaKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Feature-extractor steps per update of `mcd-multistep`.
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
}

impl DaMethod {
    pub fn new(kind: DaKind) -> Self {
        DaMethod {
            kind,
            lambda: default_lambda(),
            n_steps: default_n_steps(),
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda must be finite and >= 0, got {}",
            self.lambda
        );
        ensure!(self.n_steps >= 1, "n_steps must be >= 1");
        Ok(())
    }

    fn check_arch(&self, arch: &Architecture) -> Result<()> {
        self.validate()?;
        if self.kind.num_classifiers() == 2 {
            ensure!(
                arch.num_classifiers == 2,
                "{} needs two classifier heads, architecture has {}",
                self.kind,
                arch.num_classifiers
            );
        }
        Ok(())
    }
}

/// Scalar nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: NodeId,
    pub sup: NodeId,
    pub adapt: Option<NodeId>,
}

/// A fully built objective: the tape, the parameter leaves, and the loss nodes.
pub struct LossGraph {
    pub tape: Tape,
    pub params: Vec<NodeId>,
    pub objective: Objective,
}

impl LossGraph {
    pub fn total(&self) -> f64 {
        self.tape.value(self.objective.total).item()
    }

    pub fn losses(&self) -> StepLosses {
        StepLosses {
            sup: self.tape.value(self.objective.sup).item(),
            adapt: self
                .objective
                .adapt
                .map_or(0.0, |a| self.tape.value(a).item()),
        }
    }

    /// Flat gradient of the total objective with respect to the parameters.
    pub fn gradient(&self, context: &str) -> Result<Vec<f64>> {
        let v = self.total();
        if !v.is_finite() {
            return Err(Error::numeric(context, format!("non-finite loss {v}")));
        }
        let grads = self
            .tape
            .backward(self.objective.total)
            .map_err(|e| Error::numeric(context, e.to_string()))?;
        let g = grads.flat(&self.params);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(context, "non-finite gradient"));
        }
        Ok(g)
    }
}

/// Loss values recorded for traces.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub sup: f64,
    pub adapt: f64,
}

fn unit_reversal() -> GradReverseCoeff {
    GradReverseCoeff::new(1.0).expect("valid")
}

/// Cross-entropy of head 0, or the sum over both heads for MCD.
fn sup_term(
    tape: &mut Tape,
    net: &Net<'_>,
    kind: DaKind,
    feats: NodeId,
    y: &[usize],
) -> Result<NodeId> {
    let z = net.logits(tape, feats, 0)?;
    let mut loss = tape.softmax_cross_entropy(z, y)?;
    if kind.num_classifiers() == 2 {
        let z2 = net.logits(tape, feats, 1)?;
        let l2 = tape.softmax_cross_entropy(z2, y)?;
        loss = tape.add(loss, l2)?;
    }
    Ok(loss)
}

/// Unweighted `L_a`, with the gradient reversals in place.
fn adapt_term(
    tape: &mut Tape,
    net: &Net<'_>,
    kind: DaKind,
    src_feats: NodeId,
    tgt_feats: NodeId,
) -> Result<NodeId> {
    match kind {
        DaKind::Dann => {
            let ns = tape.value(src_feats).rows();
            let nt = tape.value(tgt_feats).rows();
            let rs = tape.grad_reverse(src_feats, unit_reversal());
            let rt = tape.grad_reverse(tgt_feats, unit_reversal());
            let ds = net.discriminate(tape, rs)?;
            let dt = net.discriminate(tape, rt)?;
            let bs = tape.bce_with_logits(ds, &vec![1.0; ns])?;
            let bt = tape.bce_with_logits(dt, &vec![0.0; nt])?;
            let total = (ns + nt) as f64;
            let bs = tape.scale(bs, ns as f64 / total);
            let bt = tape.scale(bt, nt as f64 / total);
            tape.add(bs, bt)
        }
        DaKind::McdOnestep | DaKind::McdMultistep => {
            let rt = tape.grad_reverse(tgt_feats, unit_reversal());
            let z1 = net.logits(tape, rt, 0)?;
            let z2 = net.logits(tape, rt, 1)?;
            let d = tape.l1_discrepancy(z1, z2)?;
            Ok(tape.scale(d, -1.0))
        }
        DaKind::Mme => {
            let rt = tape.grad_reverse(tgt_feats, unit_reversal());
            let z = net.logits(tape, rt, 0)?;
            let h = tape.entropy(z)?;
            Ok(tape.scale(h, -1.0))
        }
    }
}

/// Builds `L_sup(src) [+ L_sup(extra)] [+ lambda * L_a(src, tgt)]` on `tape`.
pub fn build_objective(
    tape: &mut Tape,
    method: &DaMethod,
    net: &Net<'_>,
    src: &LabeledBatch,
    extra_sup: Option<&LabeledBatch>,
    tgt: Option<&Matrix>,
) -> Result<Objective> {
    ensure!(!src.is_empty(), "empty source batch");
    let xs = tape.leaf(src.x.clone());
    let fs = net.features(tape, xs)?;
    let mut sup = sup_term(tape, net, method.kind, fs, &src.y)?;
    if let Some(extra) = extra_sup {
        ensure!(!extra.is_empty(), "empty labelled target batch");
        let xl = tape.leaf(extra.x.clone());
        let fl = net.features(tape, xl)?;
        let l = sup_term(tape, net, method.kind, fl, &extra.y)?;
        sup = tape.add(sup, l)?;
    }
    let Some(tgt) = tgt else {
        return Ok(Objective {
            total: sup,
            sup,
            adapt: None,
        });
    };
    ensure!(tgt.rows() > 0, "empty target batch");
    let xt = tape.leaf(tgt.clone());
    let ft = net.features(tape, xt)?;
    let adapt = adapt_term(tape, net, method.kind, fs, ft)?;
    let weighted = tape.scale(adapt, method.lambda);
    let total = tape.add(sup, weighted)?;
    Ok(Objective {
        total,
        sup,
        adapt: Some(adapt),
    })
}

fn graph(
    method: &DaMethod,
    params: &ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    extra_sup: Option<&LabeledBatch>,
    tgt: Option<&Matrix>,
) -> Result<LossGraph> {
    method.check_arch(arch)?;
    ensure!(
        params.matches(arch),
        "parameters do not match the architecture"
    );
    let mut tape = Tape::new();
    let nodes = params.to_tape(&mut tape);
    let net = Net::new(arch, &nodes)?;
    let objective = build_objective(&mut tape, method, &net, src, extra_sup, tgt)?;
    Ok(LossGraph {
        tape,
        params: nodes,
        objective,
    })
}

/// `L_uda = L_sup(src) + lambda * L_a(src, tgt)` on a fresh tape.
pub fn uda_loss(
    method: &DaMethod,
    params: &ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    tgt: &Matrix,
) -> Result<LossGraph> {
    graph(method, params, arch, src, None, Some(tgt))
}

/// `L_sup(src)` alone on a fresh tape.
pub fn sup_loss(
    method: &DaMethod,
    params: &ParamSet,
    arch: &Architecture,
    batch: &LabeledBatch,
) -> Result<LossGraph> {
    graph(method, params, arch, batch, None, None)
}

/// `L_sup(src) + L_sup(labeled_tgt) + lambda * L_a(src, unlabeled_tgt)` on a fresh tape.
pub fn ssda_loss(
    method: &DaMethod,
    params: &ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    labeled_tgt: &LabeledBatch,
    unlabeled_tgt: &Matrix,
) -> Result<LossGraph> {
    graph(
        method,
        params,
        arch,
        src,
        Some(labeled_tgt),
        Some(unlabeled_tgt),
    )
}

/// Which tensors an update may touch, one flag per tensor in layout order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask(Vec<bool>);

impl ParamMask {
    pub fn all(arch: &Architecture) -> Self {
        ParamMask(vec![true; arch.layout().len()])
    }

    pub fn modules(arch: &Architecture, keep: impl Fn(Module) -> bool) -> Self {
        ParamMask(arch.layout().iter().map(|t| keep(t.module)).collect())
    }

    pub fn allows(&self, tensor: usize) -> bool {
        self.0[tensor]
    }
}

/// Momentum SGD: `v = mu * v + g; theta = theta - alpha * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, param_count: usize) -> Result<Self> {
        ensure!(
            learning_rate >= 0.0 && learning_rate.is_finite(),
            "learning rate must be finite and >= 0, got {learning_rate}"
        );
        ensure!(
            (0.0..1.0).contains(&momentum),
            "momentum must be in [0, 1), got {momentum}"
        );
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: vec![0.0; param_count],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Updates the tensors allowed by `mask`; frozen tensors keep both their
    /// values and their velocity.
    pub fn step(&mut self, params: &mut ParamSet, grad: &[f64], mask: &ParamMask) -> Result<()> {
        ensure!(
            grad.len() == params.len() && self.velocity.len() == params.len(),
            "gradient, velocity and parameters differ in length"
        );
        let mut off = 0;
        for (t, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let n = tensor.len();
            if mask.allows(t) {
                let v = &mut self.velocity[off..off + n];
                for ((p, vi), g) in tensor
                    .as_mut_slice()
                    .iter_mut()
                    .zip(v)
                    .zip(&grad[off..off + n])
                {
                    *vi = self.momentum * *vi + g;
                    *p -= self.learning_rate * *vi;
                }
            }
            off += n;
        }
        Ok(())
    }
}

/// Plain gradient step `theta = theta - alpha * g` on the tensors allowed by `mask`.
pub fn plain_step(params: &mut ParamSet, grad: &[f64], alpha: f64, mask: &ParamMask) -> Result<()> {
    ensure!(
        grad.len() == params.len(),
        "gradient and parameters differ in length"
    );
    let mut off = 0;
    for (t, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let n = tensor.len();
        if mask.allows(t) {
            for (p, g) in tensor.as_mut_slice().iter_mut().zip(&grad[off..off + n]) {
                *p -= alpha * g;
            }
        }
        off += n;
    }
    Ok(())
}

/// How a step applies its gradient.
pub enum Stepper<'a> {
    Momentum(&'a mut SgdState),
    Plain(f64),
}

impl Stepper<'_> {
    fn apply(&mut self, params: &mut ParamSet, grad: &[f64], mask: &ParamMask) -> Result<()> {
        match self {
            Stepper::Momentum(opt) => opt.step(params, grad, mask),
            Stepper::Plain(alpha) => plain_step(params, grad, *alpha, mask),
        }
    }
}

/// One update of `method` on a batch pair. Single-loss methods take one step
/// on the whole objective; `mcd-multistep` runs its three phases on the same
/// batches:
///
/// * A: minimise `L_sup` over the feature extractor and both heads;
/// * B: minimise `L_sup - lambda * disc` over the heads only;
/// * C: `n_steps` times, minimise `lambda * disc` over the feature extractor only.
pub fn adapt_step(
    method: &DaMethod,
    params: &mut ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    extra_sup: Option<&LabeledBatch>,
    tgt: &Matrix,
    stepper: &mut Stepper<'_>,
) -> Result<StepLosses> {
    let context = format!("{} step", method.kind);
    if method.kind != DaKind::McdMultistep {
        let g = graph(method, params, arch, src, extra_sup, Some(tgt))?;
        let grad = g.gradient(&context)?;
        stepper.apply(params, &grad, &ParamMask::all(arch))?;
        return Ok(g.losses());
    }

    method.check_arch(arch)?;
    let heads_only = ParamMask::modules(arch, |m| matches!(m, Module::Head(_)));
    let features_only = ParamMask::modules(arch, |m| m == Module::Features);
    let features_and_heads = ParamMask::modules(arch, |m| m != Module::Discriminator);

    // A
    let g = graph(method, params, arch, src, extra_sup, None)?;
    let grad = g.gradient(&format!("{context} (phase A)"))?;
    stepper.apply(params, &grad, &features_and_heads)?;
    let sup = g.losses().sup;

    // B
    let mut tape = Tape::new();
    let nodes = params.to_tape(&mut tape);
    let net = Net::new(arch, &nodes)?;
    let obj = build_objective(&mut tape, method, &net, src, extra_sup, None)?;
    let disc = discrepancy_node(&mut tape, &net, tgt)?;
    let neg = tape.scale(disc, -method.lambda);
    let total = tape.add(obj.sup, neg)?;
    let b = LossGraph {
        tape,
        params: nodes,
        objective: Objective {
            total,
            sup: obj.sup,
            adapt: Some(disc),
        },
    };
    let grad = b.gradient(&format!("{context} (phase B)"))?;
    stepper.apply(params, &grad, &heads_only)?;
    let adapt = -b.losses().adapt;

    // C
    for _ in 0..method.n_steps {
        let mut tape = Tape::new();
        let nodes = params.to_tape(&mut tape);
        let net = Net::new(arch, &nodes)?;
        let disc = discrepancy_node(&mut tape, &net, tgt)?;
        let total = tape.scale(disc, method.lambda);
        let c = LossGraph {
            tape,
            params: nodes,
            objective: Objective {
                total,
                sup: total,
                adapt: None,
            },
        };
        let grad = c.gradient(&format!("{context} (phase C)"))?;
        stepper.apply(params, &grad, &features_only)?;
    }
    Ok(StepLosses { sup, adapt })
}

fn discrepancy_node(tape: &mut Tape, net: &Net<'_>, tgt: &Matrix) -> Result<NodeId> {
    ensure!(tgt.rows() > 0, "empty target batch");
    let xt = tape.leaf(tgt.clone());
    let ft = net.features(tape, xt)?;
    let z1 = net.logits(tape, ft, 0)?;
    let z2 = net.logits(tape, ft, 1)?;
    tape.l1_discrepancy(z1, z2)
}

/// Domain-adaptation training step with momentum SGD.
pub fn da_step(
    method: &DaMethod,
    params: &mut ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    tgt: &Matrix,
    opt: &mut SgdState,
) -> Result<StepLosses> {
    adapt_step(
        method,
        params,
        arch,
        src,
        None,
        tgt,
        &mut Stepper::Momentum(opt),
    )
}

/// Semi-supervised step: source and few-shot target labels plus adaptation
/// against the unlabelled target.
pub fn ssda_step(
    method: &DaMethod,
    params: &mut ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    labeled_tgt: &LabeledBatch,
    unlabeled_tgt: &Matrix,
    opt: &mut SgdState,
) -> Result<StepLosses> {
    adapt_step(
        method,
        params,
        arch,
        src,
        Some(labeled_tgt),
        unlabeled_tgt,
        &mut Stepper::Momentum(opt),
    )
}

/// Supervised-only step (the source-only baseline), optionally with extra labelled rows.
pub fn supervised_step(
    method: &DaMethod,
    params: &mut ParamSet,
    arch: &Architecture,
    src: &LabeledBatch,
    extra_sup: Option<&LabeledBatch>,
    opt: &mut SgdState,
) -> Result<StepLosses> {
    let g = graph(method, params, arch, src, extra_sup, None)?;
    let grad = g.gradient(&format!("{} supervised step", method.kind))?;
    opt.step(params, &grad, &ParamMask::all(arch))?;
    Ok(g.losses())
}
