use std::borrow::Cow;

use super::{shape_err, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Row(Var, usize),
    Dot(Var, Var),
    Stack(Vec<Var>),
    Pick(Var, usize),
    ScaleBy(Var, Var),
    Softmax(Var),
    Sum(Var),
    Mse(Var, Vec<f64>),
    CrossEntropy(Var, usize),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape. Nodes are appended in evaluation order, so
/// the reverse of creation order is a valid backward schedule.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<(), TensorError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn computed(&mut self, name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, parents: &[Var]) -> Result<Var, TensorError> {
        check_finite(name, &value)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Cow::Owned(value), shape, op, rg))
    }

    /// A borrowed parameter. Gradients are recorded when `requires_grad`.
    pub fn param(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, requires_grad)
    }

    /// An owned leaf (inputs, or parameters under finite-difference perturbation).
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(Cow::Owned(data), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(Cow::Owned(data), vec![n], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn vec_len(&self, v: Var, op: &'static str) -> Result<usize, TensorError> {
        let s = &self.nodes[v.0].shape;
        if s.len() == 1 {
            Ok(s[0])
        } else {
            Err(shape_err(op, format!("expected a vector, got shape {s:?}")))
        }
    }

    fn same_len(&self, a: Var, b: Var, op: &'static str) -> Result<usize, TensorError> {
        let (la, lb) = (self.vec_len(a, op)?, self.vec_len(b, op)?);
        if la != lb {
            return Err(shape_err(op, format!("lengths {la} and {lb}")));
        }
        Ok(la)
    }

    /// `w · x` for a `[rows, cols]` matrix and a `[cols]` vector.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, TensorError> {
        let ws = self.shape(w).to_vec();
        let xl = self.vec_len(x, "matvec")?;
        if ws.len() != 2 || ws[1] != xl {
            return Err(shape_err("matvec", format!("matrix {ws:?} times vector of {xl}")));
        }
        let (r, c) = (ws[0], ws[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<f64> = (0..r)
            .map(|i| wv[i * c..(i + 1) * c].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.computed("matvec", out, vec![r], Op::MatVec(w, x), &[w, x])
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let n = self.same_len(a, b, name)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        self.computed(name, out, vec![n], op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var, TensorError> {
        let n = self.vec_len(a, "mul_const")?;
        if k.len() != n {
            return Err(shape_err("mul_const", format!("lengths {n} and {}", k.len())));
        }
        let out: Vec<f64> = self.value(a).iter().zip(&k).map(|(x, y)| x * y).collect();
        self.computed("mul_const", out, vec![n], Op::MulConst(a, k), &[a])
    }

    fn map_op(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        self.computed(name, out, shape, op, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map_op(a, "sigmoid", sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map_op(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map_op(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut out = Vec::new();
        for p in parts {
            self.vec_len(*p, "concat")?;
            out.extend_from_slice(self.value(*p));
        }
        let n = out.len();
        self.computed("concat", out, vec![n], Op::Concat(parts.to_vec()), parts)
    }

    /// Row `idx` of a `[rows, cols]` table (embedding lookup).
    pub fn row(&mut self, table: Var, idx: usize) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("row", format!("expected a matrix, got {s:?}")));
        }
        if idx >= s[0] {
            return Err(TensorError::OutOfBounds { index: idx, len: s[0] });
        }
        let c = s[1];
        let out = self.value(table)[idx * c..(idx + 1) * c].to_vec();
        self.computed("row", out, vec![c], Op::Row(table, idx), &[table])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_len(a, b, "dot")?;
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.computed("dot", vec![s], vec![1], Op::Dot(a, b), &[a, b])
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var, TensorError> {
        let mut out = Vec::with_capacity(scalars.len());
        for s in scalars {
            if self.vec_len(*s, "stack")? != 1 {
                return Err(shape_err("stack", "elements must be scalars"));
            }
            out.push(self.scalar(*s));
        }
        let n = out.len();
        self.computed("stack", out, vec![n], Op::Stack(scalars.to_vec()), scalars)
    }

    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var, TensorError> {
        let n = self.vec_len(a, "pick")?;
        if idx >= n {
            return Err(TensorError::OutOfBounds { index: idx, len: n });
        }
        let v = self.value(a)[idx];
        self.computed("pick", vec![v], vec![1], Op::Pick(a, idx), &[a])
    }

    /// Vector `v` times scalar node `s`.
    pub fn scale_by(&mut self, v: Var, s: Var) -> Result<Var, TensorError> {
        let n = self.vec_len(v, "scale_by")?;
        if self.vec_len(s, "scale_by")? != 1 {
            return Err(shape_err("scale_by", "scale must be a scalar"));
        }
        let k = self.scalar(s);
        let out: Vec<f64> = self.value(v).iter().map(|x| x * k).collect();
        self.computed("scale_by", out, vec![n], Op::ScaleBy(v, s), &[v, s])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.vec_len(a, "softmax")?;
        if n == 0 {
            return Err(shape_err("softmax", "empty input"));
        }
        let out = super::softmax(self.value(a));
        self.computed("softmax", out, vec![n], Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).iter().sum();
        self.computed("sum", vec![s], vec![1], Op::Sum(a), &[a])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var, TensorError> {
        let n = self.vec_len(pred, "mse")?;
        if n != target.len() || n == 0 {
            return Err(shape_err("mse", format!("prediction {n} vs target {}", target.len())));
        }
        let s: f64 = self.value(pred).iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64;
        self.computed("mse", vec![s], vec![1], Op::Mse(pred, target.to_vec()), &[pred])
    }

    /// Negative log-softmax of `logits` at `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let n = self.vec_len(logits, "cross_entropy")?;
        if target >= n {
            return Err(TensorError::OutOfBounds { index: target, len: n });
        }
        let z = self.value(logits);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        self.computed("cross_entropy", vec![loss], vec![1], Op::CrossEntropy(logits, target), &[logits])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            } else if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TensorError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let c = self.nodes[w.0].shape[1];
                let (wv, xv) = (self.value(*w), self.value(*x));
                if self.wants(*w) {
                    let gw = accumulate(&mut grads[w.0], wv.len());
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            for (dst, xj) in gw[r * c..(r + 1) * c].iter_mut().zip(xv) {
                                *dst += gr * xj;
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], xv.len());
                    for (r, gr) in g.iter().enumerate() {
                        if *gr != 0.0 {
                            for (dst, wrj) in gx.iter_mut().zip(&wv[r * c..(r + 1) * c]) {
                                *dst += gr * wrj;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    for (d, gi) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.wants(*b) {
                    for (d, gi) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g) {
                        *d += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    for ((d, gi), y) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if self.wants(*b) {
                    for ((d, gi), x) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::MulConst(a, k) => {
                if self.wants(*a) {
                    for ((d, gi), kv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(k) {
                        *d += gi * kv;
                    }
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Relu(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let x = self.value(*a);
                    let d = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        let local = match node.op {
                            Op::Sigmoid(_) => y[i] * (1.0 - y[i]),
                            Op::Tanh(_) => 1.0 - y[i] * y[i],
                            _ => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        d[i] += g[i] * local;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if self.wants(*p) {
                        for (d, gi) in accumulate(&mut grads[p.0], n).iter_mut().zip(&g[off..off + n]) {
                            *d += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::Row(table, idx) => {
                if self.wants(*table) {
                    let c = g.len();
                    let d = accumulate(&mut grads[table.0], len(*table));
                    for (dst, gi) in d[idx * c..(idx + 1) * c].iter_mut().zip(g) {
                        *dst += gi;
                    }
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    for (d, y) in accumulate(&mut grads[a.0], av.len()).iter_mut().zip(bv) {
                        *d += g[0] * y;
                    }
                }
                if self.wants(*b) {
                    for (d, x) in accumulate(&mut grads[b.0], bv.len()).iter_mut().zip(av) {
                        *d += g[0] * x;
                    }
                }
            }
            Op::Stack(items) => {
                for (s, gi) in items.iter().zip(g) {
                    if self.wants(*s) {
                        accumulate(&mut grads[s.0], 1)[0] += gi;
                    }
                }
            }
            Op::Pick(a, idx) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], len(*a))[*idx] += g[0];
                }
            }
            Op::ScaleBy(v, s) => {
                let (vv, k) = (self.value(*v), self.scalar(*s));
                if self.wants(*v) {
                    for (d, gi) in accumulate(&mut grads[v.0], vv.len()).iter_mut().zip(g) {
                        *d += gi * k;
                    }
                }
                if self.wants(*s) {
                    let gs: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads[s.0], 1)[0] += gs;
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let p = &node.value;
                    let inner: f64 = g.iter().zip(p.iter()).map(|(gi, pi)| gi * pi).sum();
                    for ((d, gi), pi) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(p.iter()) {
                        *d += pi * (gi - inner);
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    for d in accumulate(&mut grads[a.0], len(*a)).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mse(pred, target) => {
                if self.wants(*pred) {
                    let pv = self.value(*pred);
                    let n = pv.len() as f64;
                    for ((d, p), t) in accumulate(&mut grads[pred.0], pv.len()).iter_mut().zip(pv).zip(target) {
                        *d += g[0] * 2.0 * (p - t) / n;
                    }
                }
            }
            Op::CrossEntropy(logits, target) => {
                if self.wants(*logits) {
                    let p = super::softmax(self.value(*logits));
                    for (i, (d, pi)) in accumulate(&mut grads[logits.0], p.len()).iter_mut().zip(&p).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (pi - onehot);
                    }
                }
            }
        }
    }
}
