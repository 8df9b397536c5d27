//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! Operations are recorded in execution order, so parents always precede
//! children and a single reverse pass visits every node once. Only nodes
//! downstream of a registered parameter carry gradients; frozen weights
//! enter as constants and cost nothing in the backward pass.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, product, product_acc, Tensor2D, View, ViewMut};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2D,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor2D,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor2D,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor2D>;

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<Var> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let var = self.push(value, Op::Leaf, true);
        self.by_name.insert(name.clone(), var);
        self.params.push((name, var));
        Ok(var)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, value: Tensor2D, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let inner = if b_transposed { bc } else { br };
        if ac != inner {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: (ar, ac),
                right: (br, bc),
            });
        }
        let value = product(self.value(a), false, self.value(b), b_transposed);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, b_transposed }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, d) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: (n, d),
                    right: self.shape(p),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor2D::zeros(n, d);
        let mut out = Tensor2D::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..d {
                xh[j] = (row[j] - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
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

    /// Multi-head causal self-attention core: `softmax(QKᵀ/√d_h + mask)·V`
    /// applied independently to each length-`seq_len` block of rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (n, d) = self.shape(q);
        if self.shape(k) != (n, d) || self.shape(v) != (n, d) {
            return Err(Error::ShapeMismatch {
                op: "causal_attention",
                left: (n, d),
                right: self.shape(k),
            });
        }
        if heads == 0 || d % heads != 0 || seq_len == 0 || n % seq_len != 0 {
            return Err(Error::invalid(format!(
                "attention over {n}x{d} with {heads} heads and sequence length {seq_len}"
            )));
        }
        let dh = d / heads;
        let batch = n / seq_len;
        let t = seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = Tensor2D::zeros(n, d);
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            for b in 0..batch {
                for h in 0..heads {
                    let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                    let qb = View::of(qv).block(b * t, h * dh, t, dh);
                    let kb = View::of(kv).block(b * t, h * dh, t, dh);
                    gemm(scale, qb, kb.t(), 0.0, ViewMut::raw(p, t, t));
                    for i in 0..t {
                        let row = &mut p[i * t..(i + 1) * t];
                        let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                        let mut z = 0.0;
                        for x in row[..=i].iter_mut() {
                            *x = (*x - max).exp();
                            z += *x;
                        }
                        let inv = 1.0 / z;
                        for x in row[..=i].iter_mut() {
                            *x *= inv;
                        }
                        row[i + 1..].fill(0.0);
                    }
                    let vb = View::of(vv).block(b * t, h * dh, t, dh);
                    let ob = ViewMut::of(&mut out).block(b * t, h * dh, t, dh);
                    gemm(
                        1.0,
                        View {
                            data: p,
                            offset: 0,
                            rows: t,
                            cols: t,
                            row_stride: t,
                            col_stride: 1,
                        },
                        vb,
                        0.0,
                        ob,
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("index {bad} out of range for {rows} rows")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor2D::from_vec(ids.len(), cols, data);
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.shape(logits);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: (n, vocab),
                right: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let (loss, probs) = softmax_nll(self.value(logits), targets);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor2D::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor2D::from_vec(1, 1, vec![s]), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor2D::from_vec(1, 1, vec![s]), Op::SumSquares(a), rg)
    }

    /// Gradients of scalar `loss` for every registered parameter; parameters
    /// not reachable from `loss` get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2D::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // leaves keep their gradient for collection below
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let mut out = Gradients::new();
        for (name, var) in &self.params {
            let g = grads.get_mut(var.0).and_then(Option::take).unwrap_or_else(|| {
                let (r, c) = self.shape(*var);
                Tensor2D::zeros(r, c)
            });
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.rg(*a) {
                    // dA = dC · op(B)ᵀ
                    accumulate_with(grads, *a, av.shape(), |acc| {
                        product_acc(acc, g, false, bv, !b_transposed)
                    });
                }
                if self.rg(*b) {
                    if *b_transposed {
                        // C = A·Bᵀ  →  dB = dCᵀ·A
                        accumulate_with(grads, *b, bv.shape(), |acc| product_acc(acc, g, true, av, false));
                    } else {
                        accumulate_with(grads, *b, bv.shape(), |acc| product_acc(acc, av, true, g, false));
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.rg(p) {
                        accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let d: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, Tensor2D::from_vec(x.rows(), x.cols(), d));
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let d: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(grads, *a, Tensor2D::from_vec(x.rows(), x.cols(), d));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(grads, *gain, Tensor2D::from_vec(1, d, dg));
                    }
                    if self.rg(*bias) {
                        accumulate(grads, *bias, Tensor2D::from_vec(1, d, db));
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor2D::zeros(n, d);
                    let mut dxh = vec![0.0; d];
                    for i in 0..n {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxh[j] = gr[j] * gv[j];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * xr[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let out = dx.row_mut(i);
                        for j in 0..d {
                            out[j] = rstd[i] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, *heads, *seq_len, probs, grads);
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let shape = self.shape(*table);
                    accumulate_with(grads, *table, shape, |acc| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (a, b) in acc.row_mut(id).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let n = targets.len() as f64;
                    let up = g.get(0, 0);
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[t] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= up / n;
                        }
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let (r, c) = self.shape(*a);
                    accumulate(grads, *a, Tensor2D::filled(r, c, g.get(0, 0)));
                }
            }
            Op::SumSquares(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.value(*a).scale(2.0 * g.get(0, 0)));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor2D,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        t: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor2D>],
    ) {
        let (n, d) = g.shape();
        let dh = d / heads;
        let batch = n / t;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut dq = Tensor2D::zeros(n, d);
        let mut dk = Tensor2D::zeros(n, d);
        let mut dv = Tensor2D::zeros(n, d);
        let mut dp = vec![0.0; t * t];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                let pview = View {
                    data: p,
                    offset: 0,
                    rows: t,
                    cols: t,
                    row_stride: t,
                    col_stride: 1,
                };
                let gb = View::of(g).block(b * t, h * dh, t, dh);
                // dV = Pᵀ dO
                gemm(
                    1.0,
                    pview.t(),
                    gb,
                    0.0,
                    ViewMut::of(&mut dv).block(b * t, h * dh, t, dh),
                );
                // dP = dO Vᵀ
                let vb = View::of(vv).block(b * t, h * dh, t, dh);
                gemm(1.0, gb, vb.t(), 0.0, ViewMut::raw(&mut dp, t, t));
                // dS = P ∘ (dP − rowsum(P ∘ dP))
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                let ds = View {
                    data: &dp,
                    offset: 0,
                    rows: t,
                    cols: t,
                    row_stride: t,
                    col_stride: 1,
                };
                let qb = View::of(qv).block(b * t, h * dh, t, dh);
                let kb = View::of(kv).block(b * t, h * dh, t, dh);
                gemm(scale, ds, kb, 0.0, ViewMut::of(&mut dq).block(b * t, h * dh, t, dh));
                gemm(scale, ds.t(), qb, 0.0, ViewMut::of(&mut dk).block(b * t, h * dh, t, dh));
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                accumulate(grads, var, grad);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with(grads: &mut [Option<Tensor2D>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Tensor2D)) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor2D::zeros(shape.0, shape.1));
    }
    f(slot.as_mut().expect("just filled"));
}

/// Mean NLL and the row-wise softmax of `logits`.
pub(crate) fn softmax_nll(logits: &Tensor2D, targets: &[usize]) -> (f64, Tensor2D) {
    let (n, vocab) = logits.shape();
    let mut probs = Tensor2D::zeros(n, vocab);
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let out = probs.row_mut(r);
        let mut z = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
        total += max + z.ln() - row[t];
    }
    (total / n as f64, probs)
}
