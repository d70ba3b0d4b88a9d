//! MLP feature extractor, classifier heads and domain discriminator.
//!
//! Parameters live in a [`ParamSet`]: a list of matrices in a fixed order
//! that is also the flatten order:
//!
//! 1. feature layers, each `W (in x out)` then `b (1 x out)`;
//! 2. classifier heads in index order, each `W (feat x K)` then `b (1 x K)`
//!    (normalised heads have no bias);
//! 3. discriminator layers, each `W` then `b`, ending in a single logit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::domains::DomainDataset;
use crate::error::{ensure, Error, Result};
use crate::seeding::{stream_rng, STREAM_INIT};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    PlainLinear,
    /// Cosine-similarity head: `(1/T) * normalize(f) . normalize(w_k)`.
    NormalizedWithTemperature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub feature_dims: Vec<usize>,
    pub num_classes: usize,
    pub num_classifiers: usize,
    pub discriminator_dims: Vec<usize>,
    pub classifier_kind: ClassifierKind,
    pub temperature: f64,
}

impl Architecture {
    /// Default widths: features `[64, 32]`, discriminator `[16]`.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            feature_dims: vec![64, 32],
            num_classes,
            num_classifiers: 1,
            discriminator_dims: vec![16],
            classifier_kind: ClassifierKind::PlainLinear,
            temperature: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, "input_dim must be >= 1");
        ensure!(
            !self.feature_dims.is_empty(),
            "need at least one feature layer"
        );
        ensure!(
            self.feature_dims
                .iter()
                .chain(&self.discriminator_dims)
                .all(|&w| w >= 1),
            "all layer widths must be >= 1"
        );
        ensure!(self.num_classes >= 2, "num_classes must be >= 2");
        ensure!(
            self.num_classifiers == 1 || self.num_classifiers == 2,
            "num_classifiers must be 1 or 2, got {}",
            self.num_classifiers
        );
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature must be > 0"
        );
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_dims.last().expect("validated")
    }

    fn head_has_bias(&self) -> bool {
        self.classifier_kind == ClassifierKind::PlainLinear
    }

    /// Shapes of every tensor in flatten order, tagged with the module they belong to.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        let mut prev = self.input_dim;
        for &w in &self.feature_dims {
            out.push(TensorSpec::weight(Module::Features, prev, w));
            out.push(TensorSpec::bias(Module::Features, w));
            prev = w;
        }
        let feat = prev;
        for h in 0..self.num_classifiers {
            out.push(TensorSpec::weight(Module::Head(h), feat, self.num_classes));
            if self.head_has_bias() {
                out.push(TensorSpec::bias(Module::Head(h), self.num_classes));
            }
        }
        prev = feat;
        for &w in self.discriminator_dims.iter().chain(std::iter::once(&1)) {
            out.push(TensorSpec::weight(Module::Discriminator, prev, w));
            out.push(TensorSpec::bias(Module::Discriminator, w));
            prev = w;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|t| t.rows * t.cols).sum()
    }

    /// Maps tensor positions to per-module slots.
    fn slots(&self) -> Slots {
        let mut s = Slots::default();
        let layout = self.layout();
        let mut i = 0;
        while i < layout.len() {
            let t = &layout[i];
            match t.module {
                Module::Features => {
                    s.features.push((i, i + 1));
                    i += 2;
                }
                Module::Head(_) => {
                    if self.head_has_bias() {
                        s.heads.push((i, Some(i + 1)));
                        i += 2;
                    } else {
                        s.heads.push((i, None));
                        i += 1;
                    }
                }
                Module::Discriminator => {
                    s.discriminator.push((i, i + 1));
                    i += 2;
                }
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    Features,
    Head(usize),
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub module: Module,
    pub rows: usize,
    pub cols: usize,
    pub is_weight: bool,
}

impl TensorSpec {
    fn weight(module: Module, rows: usize, cols: usize) -> Self {
        TensorSpec {
            module,
            rows,
            cols,
            is_weight: true,
        }
    }

    fn bias(module: Module, cols: usize) -> Self {
        TensorSpec {
            module,
            rows: 1,
            cols,
            is_weight: false,
        }
    }
}

#[derive(Default)]
struct Slots {
    features: Vec<(usize, usize)>,
    heads: Vec<(usize, Option<usize>)>,
    discriminator: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    KaimingUniform,
    KaimingNormal,
    XavierUniform,
    XavierNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitScheme {
    pub kind: InitKind,
    #[serde(default)]
    pub perturb_sigma: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme {
            kind: InitKind::KaimingUniform,
            perturb_sigma: 0.0,
        }
    }
}

/// Model parameters as matrices in [`Architecture::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn zeros(arch: &Architecture) -> Self {
        ParamSet {
            tensors: arch
                .layout()
                .iter()
                .map(|t| Matrix::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn unflatten(flat: &[f64], arch: &Architecture) -> Result<Self> {
        let layout = arch.layout();
        let total: usize = layout.iter().map(|t| t.rows * t.cols).sum();
        ensure!(
            flat.len() == total,
            "flat parameter vector has length {}, architecture needs {total}",
            flat.len()
        );
        let mut off = 0;
        let tensors = layout
            .iter()
            .map(|t| {
                let n = t.rows * t.cols;
                let m = Matrix::from_vec(t.rows, t.cols, flat[off..off + n].to_vec());
                off += n;
                m
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet { tensors })
    }

    /// Overwrites every value from `flat` without reallocating the tensor list.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.len(),
            "flat parameter vector has length {}, expected {}",
            flat.len(),
            self.len()
        );
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        let layout = arch.layout();
        layout.len() == self.tensors.len()
            && layout
                .iter()
                .zip(&self.tensors)
                .all(|(s, t)| t.shape() == (s.rows, s.cols))
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Binary format: magic, format version, architecture JSON, parameter
    /// count, then little-endian `f64` values in flatten order.
    pub fn save(&self, arch: &Architecture, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(arch, &mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, arch: &Architecture, w: &mut impl Write) -> Result<()> {
        ensure!(
            self.matches(arch),
            "parameters do not match the architecture"
        );
        let arch_json = serde_json::to_vec(arch)?;
        let io = |e| Error::io("<param stream>", e);
        w.write_all(PARAM_MAGIC).map_err(io)?;
        w.write_all(&PARAM_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(arch_json.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&arch_json).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes())
            .map_err(io)?;
        for v in self.flatten() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Architecture, ParamSet)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<(Architecture, ParamSet)> {
        let bad = |detail: &str| Error::Format {
            path: "<param stream>".into(),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != PARAM_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(u32buf) != PARAM_VERSION {
            return Err(bad("unsupported format version"));
        }
        r.read_exact(&mut u32buf)
            .map_err(|_| bad("truncated header"))?;
        let mut arch_json = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut arch_json)
            .map_err(|_| bad("truncated architecture"))?;
        let arch: Architecture = serde_json::from_slice(&arch_json)?;
        arch.validate()?;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)
            .map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != arch.param_count() {
            return Err(bad("parameter count does not match architecture"));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u64buf)
                .map_err(|_| bad("truncated parameter data"))?;
            flat.push(f64::from_le_bytes(u64buf));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("read failure"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let params = ParamSet::unflatten(&flat, &arch)?;
        Ok((arch, params))
    }
}

const PARAM_MAGIC: &[u8; 8] = b"MDAPARAM";
const PARAM_VERSION: u32 = 1;

/// Weights drawn per `scheme` from fan-in/fan-out of each `W (in x out)`,
/// biases zero, then `N(0, perturb_sigma^2)` added to every weight.
pub fn init_params(arch: &Architecture, scheme: &InitScheme, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    ensure!(
        scheme.perturb_sigma >= 0.0 && scheme.perturb_sigma.is_finite(),
        "perturb_sigma must be >= 0"
    );
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut params = ParamSet::zeros(arch);
    for (spec, t) in arch.layout().iter().zip(params.tensors.iter_mut()) {
        if !spec.is_weight {
            continue;
        }
        let (fan_in, fan_out) = (spec.rows as f64, spec.cols as f64);
        let values = t.as_mut_slice();
        match scheme.kind {
            InitKind::KaimingUniform => fill_uniform(values, (6.0 / fan_in).sqrt(), &mut rng),
            InitKind::XavierUniform => {
                fill_uniform(values, (6.0 / (fan_in + fan_out)).sqrt(), &mut rng)
            }
            InitKind::KaimingNormal => fill_normal(values, (2.0 / fan_in).sqrt(), &mut rng),
            InitKind::XavierNormal => {
                fill_normal(values, (2.0 / (fan_in + fan_out)).sqrt(), &mut rng)
            }
        }
        if scheme.perturb_sigma > 0.0 {
            let noise = Normal::new(0.0, scheme.perturb_sigma).expect("finite sigma");
            for v in values.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

fn fill_uniform(values: &mut [f64], bound: f64, rng: &mut impl Rng) {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    for v in values {
        *v = dist.sample(rng);
    }
}

fn fill_normal(values: &mut [f64], std: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in values {
        *v = dist.sample(rng);
    }
}

/// Tape-level forward pieces of the model. `nodes` are the leaves returned
/// by [`ParamSet::to_tape`].
pub struct Net<'a> {
    arch: &'a Architecture,
    nodes: &'a [NodeId],
    slots: Slots,
}

impl<'a> Net<'a> {
    pub fn new(arch: &'a Architecture, nodes: &'a [NodeId]) -> Result<Self> {
        ensure!(
            nodes.len() == arch.layout().len(),
            "got {} parameter nodes, architecture has {} tensors",
            nodes.len(),
            arch.layout().len()
        );
        Ok(Net {
            arch,
            nodes,
            slots: arch.slots(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        self.arch
    }

    /// `F(x)`: relu after every feature layer.
    pub fn features(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        ensure!(
            tape.value(x).cols() == self.arch.input_dim,
            "input has {} columns, model expects {}",
            tape.value(x).cols(),
            self.arch.input_dim
        );
        let mut h = x;
        for &(w, b) in &self.slots.features {
            let z = tape.matmul(h, self.nodes[w])?;
            let z = tape.add_bias(z, self.nodes[b])?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// `C_head(features)`.
    pub fn logits(&self, tape: &mut Tape, features: NodeId, head: usize) -> Result<NodeId> {
        ensure!(
            head < self.arch.num_classifiers,
            "classifier head {head} out of range ({} heads)",
            self.arch.num_classifiers
        );
        let (w, b) = self.slots.heads[head];
        match self.arch.classifier_kind {
            ClassifierKind::PlainLinear => {
                let z = tape.matmul(features, self.nodes[w])?;
                tape.add_bias(z, self.nodes[b.expect("plain head has bias")])
            }
            ClassifierKind::NormalizedWithTemperature => {
                let f = tape.l2_normalize_rows(features);
                let wt = tape.transpose(self.nodes[w]);
                let wt = tape.l2_normalize_rows(wt);
                let wn = tape.transpose(wt);
                let z = tape.matmul(f, wn)?;
                Ok(tape.scale(z, 1.0 / self.arch.temperature))
            }
        }
    }

    /// Single discriminator logit per row.
    pub fn discriminate(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let mut h = features;
        let last = self.slots.discriminator.len() - 1;
        for (i, &(w, b)) in self.slots.discriminator.iter().enumerate() {
            let z = tape.matmul(h, self.nodes[w])?;
            let z = tape.add_bias(z, self.nodes[b])?;
            h = if i == last { z } else { tape.relu(z) };
        }
        Ok(h)
    }
}

/// `C_head(F(x))` as a plain matrix.
pub fn predict(params: &ParamSet, arch: &Architecture, x: &Matrix, head: usize) -> Result<Matrix> {
    ensure!(
        params.matches(arch),
        "parameters do not match the architecture"
    );
    ensure!(
        head < arch.num_classifiers,
        "classifier head {head} out of range ({} heads)",
        arch.num_classifiers
    );
    ensure!(
        x.cols() == arch.input_dim,
        "input has {} columns, model expects {}",
        x.cols(),
        arch.input_dim
    );
    if x.rows() == 0 {
        return Ok(Matrix::zeros(0, arch.num_classes));
    }
    let mut tape = Tape::new();
    let nodes = params.to_tape(&mut tape);
    let net = Net::new(arch, &nodes)?;
    let xn = tape.leaf(x.clone());
    let f = net.features(&mut tape, xn)?;
    let z = net.logits(&mut tape, f, head)?;
    Ok(tape.value(z).clone())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_of_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    hits as f64 / labels.len() as f64
}

pub fn accuracy(
    params: &ParamSet,
    arch: &Architecture,
    data: &DomainDataset,
    head: usize,
) -> Result<f64> {
    ensure!(!data.is_empty(), "accuracy on an empty dataset");
    let logits = predict(params, arch, data.x(), head)?;
    Ok(accuracy_of_logits(&logits, data.y()))
}
