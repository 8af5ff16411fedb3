//! Recorded computation graph with a single reverse pass.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and the reverse pass is one backwards sweep. A graph is
//! built for one forward pass; [`Graph::backward`] does not consume or mutate
//! it, so the same record can be differentiated again from another scalar.
//!
//! Broadcasting follows trailing-dimension alignment only: two operands are
//! compatible when one shape is a suffix of the other (e.g. `[L, d]` with
//! `[d]`). Size-1 expansion is not supported.

use super::{ParameterSet, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Gelu,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// The computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Row-major `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `f(a[i % la], b[i % lb])` for `i < n`, without the divisions.
fn broadcast(va: &[f64], vb: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let (mut ia, mut ib) = (0, 0);
    for _ in 0..n {
        out.push(f(va[ia], vb[ib]));
        ia += 1;
        if ia == va.len() {
            ia = 0;
        }
        ib += 1;
        if ib == vb.len() {
            ib = 0;
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// A leaf copied from `t`; it participates in the reverse pass when
    /// `t.grad_enabled()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.grad_enabled(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Binds a named parameter. Its gradient can later be written back with
    /// [`Gradients::accumulate_into`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t);
        if t.grad_enabled() {
            self.bindings.push((name.to_string(), v));
        }
        v
    }

    /// Binds a parameter as a constant regardless of its own flag. Gradients
    /// still flow through the ops that consume it.
    pub fn frozen_param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Binds every tensor of a set, returning handles by name.
    pub fn bind_set(&mut self, set: &ParameterSet, trainable: bool) -> BoundSet {
        let vars = set
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(name, t)
                } else {
                    self.frozen_param(t)
                };
                (name.to_string(), v)
            })
            .collect();
        BoundSet { vars }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn broadcast_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok(sa.to_vec())
        } else if is_suffix(sa, sb) {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dimension(format!(
                "{what}: shapes {sa:?} and {sb:?} are not trailing-aligned"
            )))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "add")?;
        let n: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast(va, vb, n, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "mul")?;
        let n: usize = shape.iter().product();
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast(va, vb, n, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Gelu(x), rg)
    }

    /// Dispatches an elementwise op by kind. Binary kinds take two inputs,
    /// unary kinds one.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        Ok(match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1])?,
            Elementwise::Mul => self.mul(inputs[0], inputs[1])?,
            Elementwise::Relu => self.relu(inputs[0]),
            Elementwise::Gelu => self.gelu(inputs[0]),
            Elementwise::Scale(c) => self.scale(inputs[0], c),
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension(
                "layer_norm over an empty last axis".into(),
            ));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias {:?}/{:?} do not match last axis {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let (gs, bs) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gs[j] + bs[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` is masked out.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &v[i * c..i * c + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..i * c + width];
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::Softmax(x), rg))
    }

    /// Gathers rows of `table` (`[V, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Dimension("embedding lookup with no ids".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "token id {id} >= vocabulary size {v}"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + width
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, width], out, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if count == 0 || start + count > r {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + count
            )));
        }
        let out = self.value(x)[start * c..(start + count) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![count, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {r} vs {pr}"
                )));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, c], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, max-stabilised.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} rows of logits",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            probs[i * v..(i + 1) * v].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + max - row[t];
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Adds a list of scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::Contract("add_all of an empty list".into()))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar. Gradients accumulate by summation over
    /// every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(id);
            let Some(g) = hi[0].as_deref() else { continue };
            self.propagate(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let len_of = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    add_into(&mut lo[a.0], m * k, |da| matmul_into(g, &bt, m, n, k, da));
                }
                if self.rg(*b) {
                    add_into(&mut lo[b.0], k * n, |db| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = av[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += a_ip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.rg(*x) {
                        let l = len_of(*x);
                        add_into(&mut lo[x.0], l, |dx| {
                            for chunk in g.chunks(l) {
                                dx.iter_mut().zip(chunk).for_each(|(d, gv)| *d += gv);
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (la, lb) = (va.len(), vb.len());
                // Product of g with the other operand, folded onto x.
                let fold = |dx: &mut [f64], other: &[f64]| {
                    let prod = broadcast(g, other, g.len(), |x, y| x * y);
                    for chunk in prod.chunks(dx.len()) {
                        dx.iter_mut().zip(chunk).for_each(|(d, p)| *d += p);
                    }
                };
                if self.rg(*a) {
                    add_into(&mut lo[a.0], la, |da| fold(da, vb));
                }
                if self.rg(*b) {
                    add_into(&mut lo[b.0], lb, |db| fold(db, va));
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut lo[x.0], g.len(), |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c);
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                add_into(&mut lo[x.0], g.len(), |dx| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                add_into(&mut lo[x.0], g.len(), |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                add_into(&mut lo[x.0], r * c, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                let rows = g.len() / d;
                if self.rg(*gain) {
                    add_into(&mut lo[gain.0], d, |dg| {
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    add_into(&mut lo[bias.0], d, |db| {
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] += g[r * d + j];
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    add_into(&mut lo[x.0], g.len(), |dx| {
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                dxhat[j] = g[r * d + j] * gv[j];
                                mean_dh += dxhat[j];
                                mean_dh_h += dxhat[j] * xhat[r * d + j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                dx[r * d + j] +=
                                    rstd[r] * (dxhat[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = node.shape[1];
                let r = node.shape[0];
                add_into(&mut lo[x.0], r * c, |dx| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                let l = len_of(*table);
                add_into(&mut lo[table.0], l, |dt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let (r, w) = (node.shape[0], node.shape[1]);
                add_into(&mut lo[x.0], len_of(*x), |dx| {
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = nodes[x.0].shape[1];
                add_into(&mut lo[x.0], len_of(*x), |dx| {
                    for (d, gv) in dx[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let c = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if self.rg(*p) {
                        add_into(&mut lo[p.0], r * w, |dp| {
                            for i in 0..r {
                                for j in 0..w {
                                    dp[i * w + j] += g[i * c + off + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n;
                let scale = g[0] / n as f64;
                add_into(&mut lo[logits.0], n * v, |dl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                add_into(&mut lo[x.0], len_of(*x), |dx| {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                });
            }
        }
    }
}

/// Named handles for a bound [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct BoundSet {
    vars: Vec<(String, Var)>,
}

impl BoundSet {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Lookup(format!("parameter {name} is not bound")))
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every grad-enabled parameter of `set` that was
    /// bound in `graph`. A bound parameter the loss does not depend on
    /// receives zeros; tensors with `grad_enabled == false` are untouched.
    pub fn accumulate_into(&self, graph: &Graph, set: &mut ParameterSet) -> Result<()> {
        for (name, var) in &graph.bindings {
            let Ok(t) = set.get_mut(name) else { continue };
            if !t.grad_enabled() {
                continue;
            }
            match self.get(*var) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; t.len()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }
}
