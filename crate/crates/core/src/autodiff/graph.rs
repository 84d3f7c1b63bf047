//! Tape of executed operations and the reverse sweep over it.
//!
//! Every operation appends one node whose inputs are strictly earlier nodes,
//! so the tape is already in topological order and [`Graph::backward`] only
//! has to walk it in reverse. A graph is meant to live for one forward and
//! backward pass; parameters are copied in with [`Graph::param`] and their
//! gradients copied back out with [`Graph::accumulate_param_grads`].

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBroadcast(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    SliceLast { x: Var, start: usize },
    Row { x: Var, index: usize },
    StackRows(Vec<Var>),
    Reshape(Var),
    GradReverse { x: Var, lambda: f64 },
    Sum(Var),
    Scale(Var, f64),
    /// Mean cross-entropy over the rows that carry a target. `probs` holds
    /// the row softmax for every row so the backward pass is a subtraction.
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Lower bound applied to probabilities before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn derived(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.needs_grad(inputs);
        let t = Tensor::new(shape, values)
            .expect("operation produced inconsistent shape")
            .with_requires_grad(rg);
        self.push(t, op)
    }

    /// Records a leaf. Its gradient is accumulated on backward when the
    /// tensor has `requires_grad` set.
    pub fn input(&mut self, mut tensor: Tensor) -> Var {
        tensor.zero_grad();
        self.push(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.input(tensor.with_requires_grad(false))
    }

    /// Copies a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let t = Tensor::new(src.shape().to_vec(), src.values().to_vec())
            .expect("parameter tensor is consistent")
            .with_requires_grad(true);
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.values(a), self.values(b), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector `[n]` to every row of `[m,n]`.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sb[0];
        let b = self.values(bias);
        let out = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        Ok(self.derived(shape, out, Op::AddRowBroadcast(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.values(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Sigmoid(x), &[x])
    }

    /// Joins two vectors, or two matrices with equal row counts along the
    /// feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Dimension {
            op: "concat",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (rows, shape) = match (sa.len(), sb.len()) {
            (1, 1) => (1, vec![sa[0] + sb[0]]),
            (2, 2) if sa[0] == sb[0] => (sa[0], vec![sa[0], sa[1] + sb[1]]),
            _ => return Err(err()),
        };
        let (wa, wb) = (last_dim(&sa), last_dim(&sb));
        let (va, vb) = (self.values(a), self.values(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            out.extend_from_slice(&va[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&vb[r * wb..(r + 1) * wb]);
        }
        Ok(self.derived(shape, out, Op::Concat(a, b), &[a, b]))
    }

    /// Columns `start..start+len` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let w = last_dim(&sx);
        if sx.is_empty() || start + len > w {
            return Err(Error::Dimension {
                op: "slice_last",
                lhs: sx,
                rhs: vec![start, len],
            });
        }
        let rows = self.values(x).len() / w.max(1);
        let vx = self.values(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&vx[r * w + start..r * w + start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        Ok(self.derived(shape, out, Op::SliceLast { x, start }, &[x]))
    }

    /// Row `index` of a matrix as a `[1,n]` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || index >= sx[0] {
            return Err(Error::Dimension {
                op: "row",
                lhs: sx,
                rhs: vec![index],
            });
        }
        let n = sx[1];
        let out = self.values(x)[index * n..(index + 1) * n].to_vec();
        Ok(self.derived(vec![1, n], out, Op::Row { x, index }, &[x]))
    }

    /// Stacks equally sized vectors (or `[1,n]` rows) into `[m,n]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Usage("stack_rows of zero rows".into()))?;
        let n = self.values(*first).len();
        let mut out = Vec::with_capacity(n * rows.len());
        for r in rows {
            let s = self.shape(*r);
            let ok = match s {
                [w] => *w == n,
                [1, w] => *w == n,
                _ => false,
            };
            if !ok {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    lhs: vec![n],
                    rhs: s.to_vec(),
                });
            }
            out.extend_from_slice(self.values(*r));
        }
        Ok(self.derived(
            vec![rows.len(), n],
            out,
            Op::StackRows(rows.to_vec()),
            rows,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values(x).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.values(x).to_vec();
        Ok(self.derived(shape, out, Op::Reshape(x), &[x]))
    }

    /// Identity on values; multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "gradient reversal scale must be finite and >= 0, got {lambda}"
            )));
        }
        let out = self.values(x).to_vec();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::GradReverse { x, lambda }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().sum();
        self.derived(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.values(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, out, Op::Scale(x, factor), &[x])
    }

    /// `-log softmax(logits)[label]` for a single logit vector `[c]` (or `[1,c]`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let c = last_dim(self.shape(logits));
        if self.values(logits).len() != c {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![c],
            });
        }
        self.masked_softmax_cross_entropy(logits, &[Some(label)])
    }

    /// Mean cross-entropy over the rows of `logits [n,c]` whose target is
    /// `Some`. Rows with `None` receive no gradient.
    pub fn masked_softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let c = last_dim(&shape);
        let rows = if shape.is_empty() { 1 } else { self.values(logits).len() / c.max(1) };
        if rows != targets.len() {
            return Err(Error::Dimension {
                op: "masked_softmax_cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if c < 2 {
            return Err(Error::Parameter(format!(
                "cross entropy needs at least 2 classes, got {c}"
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Usage("cross entropy over an empty mask".into()));
        }
        let z = self.values(logits);
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit {bad}")));
        }
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            probs.extend(row.iter().map(|v| (v - max).exp() / sum));
            if let Some(label) = *target {
                if label >= c {
                    return Err(Error::Parameter(format!(
                        "label {label} out of range for {c} classes"
                    )));
                }
                let log_p = (row[label] - max) - sum.ln();
                total -= log_p.max(LOG_CLAMP.ln());
            }
        }
        let loss = total / count as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.derived(vec![], vec![loss], op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`. Adds dL/dT into the gradient of
    /// every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let slot = self.nodes[i].value.grad_mut();
            for (s, d) in slot.iter_mut().zip(&g) {
                *s += d;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].value.requires_grad() {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.values(*a), self.values(*b));
                acc(*a, &mut |da| {
                    // da[m,k] += g[m,n] . b^T
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &vb[c * n..(c + 1) * n];
                            da[r * k + c] += dot(grow, brow);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    // db[k,n] += a^T . g
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let s = va[r * k + c];
                            if s == 0.0 {
                                continue;
                            }
                            let drow = &mut db[c * n..(c + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += s * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddRowBroadcast(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let n = d.len();
                    for (j, gv) in g.iter().enumerate() {
                        d[j % n] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values(*a), self.values(*b));
                acc(*a, &mut |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(vb) {
                        *dv += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(va) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.values();
                acc(*x, &mut |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.values();
                acc(*x, &mut |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Concat(a, b) => {
                let (wa, wb) = (last_dim(self.shape(*a)), last_dim(self.shape(*b)));
                let w = wa + wb;
                let rows = g.len() / w.max(1);
                acc(*a, &mut |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * wa..(r + 1) * wa], &g[r * w..r * w + wa]);
                    }
                });
                acc(*b, &mut |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * wb..(r + 1) * wb], &g[r * w + wa..(r + 1) * w]);
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let w = last_dim(self.shape(*x));
                let len = last_dim(node.value.shape());
                let rows = g.len() / len.max(1);
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * w + start..r * w + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Row { x, index } => {
                let n = g.len();
                acc(*x, &mut |d| add_into(&mut d[index * n..(index + 1) * n], g));
            }
            Op::StackRows(rows) => {
                let n = last_dim(node.value.shape());
                for (r, v) in rows.iter().enumerate() {
                    acc(*v, &mut |d| add_into(d, &g[r * n..(r + 1) * n]));
                }
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::GradReverse { x, lambda } => {
                let s = -lambda;
                acc(*x, &mut |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += s * gv;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(*x, &mut |d| d.iter_mut().for_each(|dv| *dv += gv));
            }
            Op::Scale(x, f) => acc(*x, &mut |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += f * gv;
                }
            }),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(label) = *target else { continue };
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let Some(id) = node.param {
                add_into(store.get_mut(id).grad_mut(), node.value.grad());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let s = a[r * k + c];
            if s == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += s * bv;
            }
        }
    }
    out
}
