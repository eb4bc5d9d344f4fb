use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Result, SemfError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sin(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order for [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
    probe: Option<Vec<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            probe: None,
        }
    }

    /// Training-mode graph whose dropout masks come from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Records every attention probability matrix produced from now on.
    pub fn enable_attention_probe(&mut self) {
        self.probe = Some(Vec::new());
    }

    pub fn attention_probe(&self) -> Option<&[Tensor]> {
        self.probe.as_deref()
    }

    pub(crate) fn record_attention(&mut self, probs: Var) {
        if self.probe.is_some() {
            let t = self.nodes[probs.0].value.clone();
            if let Some(p) = self.probe.as_mut() {
                p.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(SemfError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Differentiable leaf; its gradient is readable through [`Graph::grad`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "input")
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let lead = sb.iter().take_while(|&&d| d == 1).count().min(sb.len().saturating_sub(1));
        let core = &sb[lead..];
        if core.len() > sa.len() || sa[sa.len() - core.len()..] != *core {
            return Err(SemfError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = self.nodes[b.0].value.data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg, name)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    /// `[m,k] x [k,n]`, or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(SemfError::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    (k as isize, 1),
                    &bd[i * k * n..],
                    (n as isize, 1),
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(SemfError::shape("transpose", &s, &[2]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = xd[base + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| SemfError::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(SemfError::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(SemfError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let xv = &self.nodes[x.0].value;
                let chunk = xv.shape()[axis] * inner;
                out.extend_from_slice(&xv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), rg, "concat")
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(SemfError::shape("narrow", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xd[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::Narrow { x, axis, start },
            rg,
            "narrow",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(SemfError::shape("mean_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis(x, axis), rg, "mean_axis")
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// Standardizes each row over the last axis (no affine; compose with `mul`/`add`).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, rstd }, rg, "layer_norm")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg, "gelu")
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v.sin()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Sin(x), rg, "sin")
    }

    /// Inverted dropout. Identity unless the graph is in training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(SemfError::contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(SemfError::shape("embedding_lookup", &s, &[2]));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(SemfError::shape("embedding_lookup", &s, &[bad]));
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "embedding_lookup",
        )
    }

    /// Reverse pass from a scalar node. Gradients accumulate additively over fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(SemfError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every parameter node into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_with(*a, grads, |ga| add_into(ga, g));
                self.acc_with(*b, grads, |gb| reduce_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, grads, |ga| add_into(ga, g));
                self.acc_with(*b, grads, |gb| reduce_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let nb = bv.len();
                self.acc_with(*a, grads, |ga| {
                    for (k, gk) in ga.iter_mut().enumerate() {
                        *gk += g[k] * bv[k % nb];
                    }
                });
                self.acc_with(*b, grads, |gb| {
                    for (k, (gv, x)) in g.iter().zip(av).enumerate() {
                        gb[k % nb] += gv * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc_with(*x, grads, |gx| {
                    for (gk, gv) in gx.iter_mut().zip(g) {
                        *gk += c * gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (batch, m, k) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2])
                } else {
                    (1, sa[0], sa[1])
                };
                let n = sb[sb.len() - 1];
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                self.acc_with(*a, grads, |ga| {
                    // dA = dC B^T
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            (n as isize, 1),
                            &bd[t * k * n..],
                            (1, n as isize),
                            &mut ga[t * m * k..],
                            1.0,
                        );
                    }
                });
                self.acc_with(*b, grads, |gb| {
                    // dB = A^T dC
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ad[t * m * k..],
                            (1, k as isize),
                            &g[t * m * n..],
                            (n as isize, 1),
                            &mut gb[t * k * n..],
                            1.0,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c).max(1);
                self.acc_with(*x, grads, |gx| {
                    for t in 0..batch {
                        let base = t * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[base + j * r + i] += g[base + i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_with(*x, grads, |gx| add_into(gx, g)),
            Op::Concat(xs, axis) => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.shape()[*axis];
                    self.acc_with(x, grads, |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gx[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.nodes[x.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let full = s[*axis];
                let len = out.shape()[*axis];
                self.acc_with(*x, grads, |gx| {
                    for o in 0..outer {
                        let off = (o * full + start) * inner;
                        add_into(
                            &mut gx[off..off + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Sum(x) => self.acc_with(*x, grads, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                self.acc_with(*x, grads, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MeanAxis(x, axis) => {
                let s = self.nodes[x.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                self.acc_with(*x, grads, |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                gx[(o * n + k) * inner + j] += g[o * inner + j] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let y = out.data();
                self.acc_with(*x, grads, |gx| {
                    for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let c = out.last_dim();
                let xhat = out.data();
                self.acc_with(*x, grads, |gx| {
                    for (r, ((gr, hr), gxr)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgh = gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((o, gv), h) in gxr.iter_mut().zip(gr).zip(hr) {
                            *o += rstd[r] * (gv - mg - h * mgh);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                self.acc_with(*x, grads, |gx| {
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_tanh_grad(v);
                    }
                });
            }
            Op::Sin(x) => {
                let xv = self.nodes[x.0].value.data();
                self.acc_with(*x, grads, |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * v.cos();
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc_with(*x, grads, |gx| {
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = out.last_dim();
                self.acc_with(*table, grads, |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
        }
    }

    fn acc_with(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums `src` into a (possibly shorter, broadcast) `dst`.
fn reduce_into(dst: &mut [f64], src: &[f64], sign: f64) {
    let n = dst.len();
    for (k, s) in src.iter().enumerate() {
        dst[k % n] += sign * s;
    }
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `C = A B + beta C` with explicit (row, col) strides for A and B; C is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Bounds the raw-pointer reads below.
    let a_extent = (m - 1) as isize * rsa + (k - 1) as isize * csa;
    let b_extent = (k - 1) as isize * rsb + (n - 1) as isize * csb;
    assert!(a_extent >= 0 && (a_extent as usize) < a.len());
    assert!(b_extent >= 0 && (b_extent as usize) < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
