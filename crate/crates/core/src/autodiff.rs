//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value, so node ids are
//! a topological order by construction. [`Tape::backward`] walks the nodes
//! once in reverse and accumulates adjoints.
//!
//! The primitive set is deliberately small: matmul, bias add, relu,
//! elementwise add/mul, sum, mean, scalar scale, transpose, row L2
//! normalisation, gradient reversal, and four fused losses
//! (softmax cross-entropy, entropy, L1 classifier discrepancy, binary
//! cross-entropy with logits). The fused losses work in log-softmax form
//! after subtracting the row maximum, so saturated logits never produce
//! `log(0)`.

use crate::error::{ensure, Error, Result};
use crate::tensor::Matrix;

/// Lower bound applied to norms and log arguments.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward scale of a gradient reversal node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReverseCoeff(f64);

impl GradReverseCoeff {
    pub fn new(lambda: f64) -> Result<Self> {
        ensure!(
            lambda >= 0.0 && lambda.is_finite(),
            "gradient reversal coefficient must be finite and >= 0, got {lambda}"
        );
        Ok(GradReverseCoeff(lambda))
    }

    pub fn lambda(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    GradReverse(NodeId, f64),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix,
    },
    Entropy {
        logits: NodeId,
        probs: Matrix,
        log_probs: Matrix,
        row_entropy: Vec<f64>,
    },
    L1Discrepancy {
        a: NodeId,
        b: NodeId,
        pa: Matrix,
        pb: Matrix,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::GradReverse(..) => "grad_reverse",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Entropy { .. } => "entropy",
            Op::L1Discrepancy { .. } => "l1_discrepancy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Single-owner record of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`]. Nodes the loss does not depend on
/// have a zero adjoint.
#[derive(Clone, Debug)]
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, materialising zeros for unreachable nodes.
    pub fn get(&self, id: NodeId) -> Matrix {
        match &self.adjoints[id.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints[id.0].as_ref()
    }

    /// Concatenates the adjoints of `ids` into one vector.
    pub fn flat(&self, ids: &[NodeId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            match &self.adjoints[id.0] {
                Some(m) => out.extend_from_slice(m.as_slice()),
                None => {
                    let (r, c) = self.shapes[id.0];
                    out.extend(std::iter::repeat_n(0.0, r * c));
                }
            }
        }
        out
    }
}

/// Numerically stable softmax and log-softmax of each row.
pub fn log_softmax_rows(logits: &Matrix) -> (Matrix, Matrix) {
    let (n, k) = logits.shape();
    let mut probs = Matrix::zeros(n, k);
    let mut logp = Matrix::zeros(n, k);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.max(LOG_EPS).ln();
        for c in 0..k {
            let lp = row[c] - lse;
            logp[(r, c)] = lp;
            probs[(r, c)] = lp.exp();
        }
    }
    (probs, logp)
}

/// Softmax of each row.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    log_softmax_rows(logits).0
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa.1 == sb.0, "matmul shape mismatch {sa:?} x {sb:?}");
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// Adds a `1 x c` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        ensure!(
            sb.0 == 1 && sb.1 == sx.1,
            "add_bias expects a 1x{} bias, got {sb:?}",
            sx.1
        );
        let mut v = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..sx.0 {
            for (o, bv) in v.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ensure!(
            self.shape(a) == self.shape(b),
            "add shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ensure!(
            self.shape(a) == self.shape(b),
            "mul shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|z| z.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().sum();
        self.push(Op::Sum(x), Matrix::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.value(x);
        ensure!(!m.is_empty(), "mean of an empty matrix");
        let s = m.as_slice().iter().sum::<f64>() / m.len() as f64;
        Ok(self.push(Op::Mean(x), Matrix::scalar(s)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|z| z * factor);
        self.push(Op::Scale(x, factor), v)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(Op::Transpose(x), v)
    }

    /// Divides each row by `sqrt(|row|^2 + LOG_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let mut v = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let n = (src.row(r).iter().map(|z| z * z).sum::<f64>() + LOG_EPS).sqrt();
            for z in v.row_mut(r) {
                *z /= n;
            }
            norms.push(n);
        }
        self.push(Op::L2NormalizeRows { x, norms }, v)
    }

    /// Identity forward; scales the incoming adjoint by `-lambda` on the way back.
    pub fn grad_reverse(&mut self, x: NodeId, coeff: GradReverseCoeff) -> NodeId {
        let v = self.value(x).clone();
        self.push(Op::GradReverse(x, coeff.lambda()), v)
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.shape(logits);
        ensure!(
            labels.len() == n,
            "cross-entropy got {} labels for {} rows",
            labels.len(),
            n
        );
        ensure!(n > 0, "cross-entropy on an empty batch");
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let (probs, logp) = log_softmax_rows(self.value(logits));
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &y)| logp[(r, y)])
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Matrix::scalar(loss.max(0.0)),
        ))
    }

    /// Mean over rows of the Shannon entropy of `softmax(row)`.
    pub fn entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(logits);
        ensure!(k >= 2, "entropy needs at least 2 classes, got {k}");
        ensure!(n > 0, "entropy on an empty batch");
        let (probs, log_probs) = log_softmax_rows(self.value(logits));
        let row_entropy: Vec<f64> = (0..n)
            .map(|r| {
                -probs
                    .row(r)
                    .iter()
                    .zip(log_probs.row(r))
                    .map(|(p, lp)| p * lp)
                    .sum::<f64>()
            })
            .collect();
        let h = row_entropy.iter().sum::<f64>() / n as f64;
        Ok(self.push(
            Op::Entropy {
                logits,
                probs,
                log_probs,
                row_entropy,
            },
            Matrix::scalar(h),
        ))
    }

    /// Mean over rows of `(1/K) * sum_k |softmax(a)_k - softmax(b)_k|`.
    pub fn l1_discrepancy(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa == sb, "l1_discrepancy shape mismatch {sa:?} vs {sb:?}");
        ensure!(sa.0 > 0, "l1_discrepancy on an empty batch");
        let pa = softmax_rows(self.value(a));
        let pb = softmax_rows(self.value(b));
        let total: f64 = pa
            .as_slice()
            .iter()
            .zip(pb.as_slice())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let d = total / (sa.0 * sa.1) as f64;
        Ok(self.push(Op::L1Discrepancy { a, b, pa, pb }, Matrix::scalar(d)))
    }

    /// Mean binary cross-entropy of an `n x 1` logit column against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let (n, k) = self.shape(logits);
        ensure!(k == 1, "bce_with_logits expects one logit column, got {k}");
        ensure!(n > 0, "bce_with_logits on an empty batch");
        ensure!(
            targets.len() == n,
            "bce_with_logits got {} targets for {} rows",
            targets.len(),
            n
        );
        let z = self.value(logits).as_slice();
        let s: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            Matrix::scalar(s / n as f64),
        ))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        ensure!(
            loss.0 < self.nodes.len(),
            "loss node {} not on this tape",
            loss.0
        );
        let shape = self.shape(loss);
        ensure!(shape == (1, 1), "backward needs a 1x1 loss, got {shape:?}");

        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !g.is_finite() {
                return Err(Error::numeric(
                    format!("backward at node {i} ({})", node.op.name()),
                    "non-finite adjoint",
                ));
            }
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            shapes,
            adjoints: adj,
        })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        fn acc(adj: &mut [Option<Matrix>], id: NodeId, contrib: Matrix) {
            match &mut adj[id.0] {
                Some(m) => m.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        }

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(adj, *a, g.matmul_nt(vb));
                acc(adj, *b, va.matmul_tn(g));
            }
            Op::AddBias(x, bias) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(adj, *x, g.clone());
                acc(adj, *bias, gb);
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(adj, *a, g.zip_map(vb, |x, y| x * y));
                acc(adj, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::Relu(x) => {
                acc(
                    adj,
                    *x,
                    g.zip_map(out, |gv, o| if o > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                acc(adj, *x, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                acc(adj, *x, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Scale(x, f) => acc(adj, *x, g.map(|v| v * f)),
            Op::Transpose(x) => acc(adj, *x, g.transpose()),
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for (r, n) in norms.iter().enumerate() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                acc(adj, *x, gx);
            }
            Op::GradReverse(x, lambda) => acc(adj, *x, g.map(|v| -lambda * v)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len() as f64;
                let scale = g.item() / n;
                let mut gz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    gz[(r, y)] -= 1.0;
                }
                acc(adj, *logits, gz.map(|v| v * scale));
            }
            Op::Entropy {
                logits,
                probs,
                log_probs,
                row_entropy,
            } => {
                let scale = g.item() / probs.rows() as f64;
                let mut gz = Matrix::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    let h = row_entropy[r];
                    for c in 0..probs.cols() {
                        gz[(r, c)] = -probs[(r, c)] * (log_probs[(r, c)] + h) * scale;
                    }
                }
                acc(adj, *logits, gz);
            }
            Op::L1Discrepancy { a, b, pa, pb } => {
                let (n, k) = pa.shape();
                let scale = g.item() / (n * k) as f64;
                let sign = pa.zip_map(pb, |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        0.0
                    }
                });
                acc(adj, *a, softmax_vjp(pa, &sign));
                acc(adj, *b, softmax_vjp(pb, &sign.map(|v| -v)));
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let scale = g.item() / targets.len() as f64;
                let data = z
                    .as_slice()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                acc(
                    adj,
                    *logits,
                    Matrix::from_vec(z.rows(), 1, data).expect("n x 1"),
                );
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Vector-Jacobian product of row softmax: `p * (g - <p, g>)` per row.
fn softmax_vjp(p: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let dot: f64 = p.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
        for c in 0..p.cols() {
            out[(r, c)] = p[(r, c)] * (g[(r, c)] - dot);
        }
    }
    out
}

/// Compares tape adjoints with central finite differences.
///
/// `build` receives a fresh tape and one leaf per entry of `inputs` and
/// returns the scalar loss node. The result is the largest per-coordinate
/// `|fd - ad| / max(1e-8, |fd| + |ad|)`.
///
/// Gradient reversal nodes make the tape adjoint differ from the derivative
/// of the forward function, so `build` must not contain them.
pub fn check_gradients_fd<F>(build: F, inputs: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    ensure!(
        eps > 0.0,
        "finite-difference step must be positive, got {eps}"
    );
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<_> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::numeric("finite-difference check", "non-finite loss"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::numeric("finite-difference check", "non-finite loss"));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let ad = grads.get(*id);
        for i in 0..work[t].len() {
            let orig = work[t].as_slice()[i];
            work[t].as_mut_slice()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].as_mut_slice()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].as_mut_slice()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let a = ad.as_slice()[i];
            let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_adjoint_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).as_slice(), &[1.0; 4]);
    }

    #[test]
    fn square_adjoint_is_twice_x() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_nodes_get_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let y = t.leaf(Matrix::row_vector(vec![3.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get_ref(y).is_none());
        assert_eq!(g.get(y).as_slice(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_reports_nan_node() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let s = t.scale(x, f64::NAN);
        let l = t.sum(s);
        // The sum's own adjoint is finite; the NaN appears at the leaf.
        match t.backward(l) {
            Err(Error::Numeric { context, .. }) => assert!(context.contains("node 0")),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn grad_reverse_contract() {
        for lambda in [0.0, 0.5, 1.0, 2.0] {
            let mut t = Tape::new();
            let x = t.leaf(Matrix::row_vector(vec![0.3, -1.7, 2.5]));
            let r = t.grad_reverse(x, GradReverseCoeff::new(lambda).unwrap());
            assert_eq!(t.value(r), t.value(x));
            let s = t.sum(r);
            let g = t.backward(s).unwrap();
            assert!(g.get(x).as_slice().iter().all(|&v| v == -lambda));
        }
        assert!(GradReverseCoeff::new(-0.1).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::new();
        let z = t.leaf(m(&[vec![10.0, -10.0]]));
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        let v = t.value(l).item();
        assert!((v - 2.061153622438558e-9).abs() < 1e-15, "{v}");

        let z = t.leaf(m(&[vec![0.0, 0.0, 0.0]]));
        let l = t.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let z = t.leaf(m(&[vec![1.0, 0.0], vec![0.0, 2.0]]));
        let a = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let b = -(1.0 / (1.0 + 2f64.exp())).ln();
        let l = t.softmax_cross_entropy(z, &[0, 0]).unwrap();
        assert!((t.value(l).item() - (a + b) / 2.0).abs() < 1e-12);

        assert!(t.softmax_cross_entropy(z, &[0, 2]).is_err());
    }

    #[test]
    fn entropy_values() {
        let mut t = Tape::new();
        let z = t.leaf(m(&[vec![0.0; 4]]));
        let h = t.entropy(z).unwrap();
        assert!((t.value(h).item() - 4f64.ln()).abs() < 1e-12);

        let z = t.leaf(m(&[vec![50.0, -50.0, -50.0]]));
        let h = t.entropy(z).unwrap();
        assert!(t.value(h).item().abs() < 1e-20);

        // Direct evaluation: p = softmax([1, 2]).
        let p1 = 1.0 / (1.0 + 1f64.exp());
        let p2 = 1.0 - p1;
        let expected = -(p1 * p1.ln() + p2 * p2.ln());
        let z = t.leaf(m(&[vec![1.0, 2.0]]));
        let h = t.entropy(z).unwrap();
        assert!((t.value(h).item() - expected).abs() < 1e-12);
        assert!((expected - 0.5822).abs() < 1e-4);
    }

    #[test]
    fn discrepancy_values() {
        let mut t = Tape::new();
        let a = t.leaf(m(&[vec![0.3, -0.2], vec![1.0, 4.0]]));
        let d = t.l1_discrepancy(a, a).unwrap();
        assert_eq!(t.value(d).item(), 0.0);

        let a = t.leaf(m(&[vec![60.0, -60.0]]));
        let b = t.leaf(m(&[vec![-60.0, 60.0]]));
        let d = t.l1_discrepancy(a, b).unwrap();
        assert!((t.value(d).item() - 1.0).abs() < 1e-12);

        // softmax([ln 0.6, ln 0.4]) = [0.6, 0.4]
        let a = t.leaf(m(&[vec![0.6f64.ln(), 0.4f64.ln()]]));
        let b = t.leaf(m(&[vec![0.0, 0.0]]));
        let d = t.l1_discrepancy(a, b).unwrap();
        assert!((t.value(d).item() - 0.1).abs() < 1e-12);

        let c = t.leaf(m(&[vec![0.0, 0.0, 0.0]]));
        assert!(t.l1_discrepancy(a, c).is_err());
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(3, 1));
        let l = t.bce_with_logits(z, &[1.0, 0.0, 1.0]).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quadratic_fd_check_is_tight() {
        let x = Matrix::row_vector(vec![0.4, -1.3, 2.2]);
        let err = check_gradients_fd(
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fd_check_detects_reversal() {
        let x = Matrix::row_vector(vec![0.4, -1.3]);
        let err = check_gradients_fd(
            |t, ids| {
                let r = t.grad_reverse(ids[0], GradReverseCoeff::new(1.0)?);
                let sq = t.mul(r, r)?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.9, "{err}");
    }

    #[test]
    fn identical_construction_is_bitwise_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(m(&[vec![0.1, 0.7, -0.3], vec![1.1, -0.4, 0.2]]));
            let w = t.leaf(m(&[vec![0.5, -0.5], vec![0.25, 1.0], vec![-1.0, 0.3]]));
            let z = t.matmul(x, w).unwrap();
            let h = t.entropy(z).unwrap();
            let c = t.softmax_cross_entropy(z, &[1, 0]).unwrap();
            let l = t.add(h, c).unwrap();
            t.backward(l).unwrap().flat(&[x, w])
        };
        assert_eq!(run(), run());
    }
}
