//! Reverse-mode automatic differentiation over coarse tensor operations.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] consumes the graph and returns the
//! gradients of a scalar with respect to every leaf that requires them
//! (parameters of the borrowed [`ParamStore`] and inputs created with
//! `requires_grad`).
//!
//! Parameters are borrowed, not copied, so building a graph for a single
//! decoding step is cheap.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(usize),
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Attention(Box<AttentionCache>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectPosition {
        x: Var,
        t: usize,
    },
    ReplaceFirst {
        x: Var,
        first: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    MeanRows(Var),
    Entropy(Var),
    Sum(Var),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// `[batch, heads, len_q, len_k]`; masked entries are exactly zero.
    probs: Vec<f64>,
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Arguments of a multi-head attention call.
pub struct AttentionArgs<'a> {
    pub heads: usize,
    pub causal: bool,
    /// `[batch × len_k]`, `true` for real (attendable) keys.
    pub key_mask: Option<&'a [bool]>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    grad_enabled: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradient information.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        // Cached intermediates are useless without a backward pass.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(i) => self.params.get(ParamId(*i)).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph nodes hold consistent shapes")
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// A leaf holding a copy of `t`; differentiable when `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Owned(t.data().to_vec()),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "constant",
                left: shape,
                right: vec![data.len()],
            });
        }
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Treats the value of `v` as a constant from here on.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let data = self.value(v).to_vec();
        self.constant(shape, data).expect("same shape")
    }

    /// The variable bound to parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id.0),
            op: Op::Param(id.0),
            needs_grad: self.grad_enabled && t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id.0, v);
        v
    }

    /// `a [.., k] · b [k × n] → [.., n]`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(sa) / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        Ok(self.push(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose expects a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must equal the
    /// trailing dimensions of `a` (bias vectors, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add_broadcast",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let block = numel(sb);
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(block)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(sa.to_vec(), out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` = keep).
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "dropout",
                left: self.shape(a).to_vec(),
                right: vec![keep.len()],
            });
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout(a, mask), &[a]))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        let n = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: sx.to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = numel(sx) / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::contract(format!("softmax axis {axis} for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| xv[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xv[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let shape = s.to_vec();
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Scaled dot-product multi-head attention over `[batch, len, d]` inputs.
    ///
    /// With `causal`, query `i` sees keys `j ≤ i + (len_k - len_q)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, args: AttentionArgs<'_>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::Shape {
                op: "attention",
                left: sq.to_vec(),
                right: sk.to_vec(),
            });
        }
        let (b, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        let heads = args.heads;
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("width {d} not divisible into {heads} heads")));
        }
        if let Some(m) = args.key_mask {
            if m.len() != b * lk {
                return Err(Error::Shape {
                    op: "attention mask",
                    left: vec![b, lk],
                    right: vec![m.len()],
                });
            }
        }
        if args.causal && lq > lk {
            return Err(Error::contract("causal attention needs len_q <= len_k"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offset = if args.causal { lk - lq } else { 0 };
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        let mut scores = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..lq {
                    let qrow = &qv[(bi * lq + i) * d + col..][..dh];
                    let limit = if args.causal { i + offset + 1 } else { lk };
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..limit {
                        if args.key_mask.is_some_and(|m| !m[bi * lk + j]) {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kv[(bi * lk + j) * d + col..][..dh];
                        let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let mut sum = 0.0;
                    for j in 0..limit {
                        if scores[j] > f64::NEG_INFINITY {
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            sum += e;
                        }
                    }
                    let orow = &mut out[(bi * lq + i) * d + col..][..dh];
                    for j in 0..limit {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        prow[j] /= sum;
                        let p = prow[j];
                        let vrow = &vv[(bi * lk + j) * d + col..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            probs,
        };
        Ok(self.push(vec![b, lq, d], out, Op::Attention(Box::new(cache)), &[q, k, v]))
    }

    /// Row lookup: `table [V × d]` indexed by `ids` shaped `id_shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || numel(id_shape) != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                left: st.to_vec(),
                right: id_shape.to_vec(),
            });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                size: vocab,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            shape,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `x [B × L × d]` → `x[:, t, :]` of shape `[B × d]`.
    pub fn select_position(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || t >= s[1] {
            return Err(Error::contract(format!("select position {t} of {s:?}")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&xv[(bi * l + t) * d..][..d]);
        }
        Ok(self.push(vec![b, d], out, Op::SelectPosition { x, t }, &[x]))
    }

    /// Replaces position 0 of `x [B × L × d]` with `first [B × d]`.
    pub fn replace_first(&mut self, x: Var, first: Var) -> Result<Var> {
        let (sx, sf) = (self.shape(x), self.shape(first));
        if sx.len() != 3 || sf != [sx[0], sx[2]] {
            return Err(Error::Shape {
                op: "replace_first",
                left: sx.to_vec(),
                right: sf.to_vec(),
            });
        }
        let (b, l, d) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).to_vec();
        let fv = self.value(first);
        for bi in 0..b {
            out[bi * l * d..][..d].copy_from_slice(&fv[bi * d..][..d]);
        }
        let shape = sx.to_vec();
        Ok(self.push(shape, out, Op::ReplaceFirst { x, first }, &[x, first]))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    ///
    /// `logits` is `[.., V]`; `targets` and `mask` have one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits);
        let vocab = *s.last().unwrap_or(&0);
        let rows = numel(s) / vocab.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: s.to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy over an empty mask"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, row) in lv.chunks(vocab).enumerate() {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index {
                    what: "target id",
                    index: t,
                    size: vocab,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[r * vocab..][..vocab];
            let mut sum = 0.0;
            for (p, x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            total += sum.ln() + max - row[t];
        }
        let loss = total / count as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// `[B × N]` → column means `[N]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract(format!("mean_rows expects a matrix, got {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        for row in self.value(a).chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= b as f64;
        }
        Ok(self.push(vec![n], out, Op::MeanRows(a), &[a]))
    }

    /// Shannon entropy `-Σ pᵢ ln pᵢ` of a probability vector, with `0 ln 0 = 0`.
    pub fn entropy(&mut self, p: Var) -> Var {
        let h = entropy_of(self.value(p));
        self.push(vec![1], vec![h], Op::Entropy(p), &[p])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Consumes the graph and back-propagates from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(p) => {
                    params[*p] = Some(g);
                }
                op => self.backward_op(op, &node.shape, self.value(Var(i)), &g, &mut grads),
            }
        }
        Ok(Gradients {
            leaves: grads,
            params,
        })
    }

    fn backward_op(
        &self,
        op: &Op,
        shape: &[usize],
        out: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, 1.0, g, false, self.value(*b), true, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, 1.0, self.value(*a), true, g, false, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (shape[0], shape[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let block = gb.len();
                    for chunk in g.chunks(block) {
                        axpy(1.0, chunk, gb);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *shape.last().unwrap();
                let gv = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        axpy(1.0, grow, gb);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hrow[j];
                        }
                        let scale = rstd[r] / n as f64;
                        let out = &mut gx[r * n..][..n];
                        for j in 0..n {
                            out[j] += scale * (n as f64 * dxhat[j] - sum_d - hrow[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (len, inner) = (*len, *inner);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|j| g[base + j * inner] * out[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                gx[at] += out[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::Attention(c) => self.backward_attention(c, shape, g, grads),
            Op::Embedding { table, ids } => {
                let d = *shape.last().unwrap();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..][..d], &mut gt[id * d..][..d]);
                    }
                }
            }
            Op::SelectPosition { x, t } => {
                let sx = self.shape(*x);
                let (b, l, d) = (sx[0], sx[1], sx[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        axpy(1.0, &g[bi * d..][..d], &mut gx[(bi * l + t) * d..][..d]);
                    }
                }
            }
            Op::ReplaceFirst { x, first } => {
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        let base = bi * l * d;
                        axpy(1.0, &g[base + d..base + l * d], &mut gx[base + d..base + l * d]);
                    }
                }
                if let Some(gf) = self.slot(grads, *first) {
                    for bi in 0..b {
                        axpy(1.0, &g[bi * l * d..][..d], &mut gf[bi * d..][..d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = *self.shape(*logits).last().unwrap();
                let scale = g[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * vocab..][..vocab];
                        let prow = &probs[r * vocab..][..vocab];
                        for (o, p) in row.iter_mut().zip(prow) {
                            *o += scale * p;
                        }
                        row[targets[r]] -= scale;
                    }
                }
            }
            Op::MeanRows(a) => {
                let n = shape[0];
                let b = self.shape(*a)[0];
                if let Some(ga) = self.slot(grads, *a) {
                    for row in ga.chunks_mut(n) {
                        axpy(1.0 / b as f64, g, row);
                    }
                }
            }
            Op::Entropy(p) => {
                let pv = self.value(*p);
                if let Some(gp) = self.slot(grads, *p) {
                    for (o, &x) in gp.iter_mut().zip(pv) {
                        // d(-x ln x)/dx is unbounded at 0; zero-probability
                        // entries contribute no gradient.
                        if x > 0.0 {
                            *o -= g[0] * (x.ln() + 1.0);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not take part in differentiation.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = numel(&self.nodes[v.0].shape);
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backward_attention(
        &self,
        c: &AttentionCache,
        shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (b, lq, d) = (shape[0], shape[1], shape[2]);
        let lk = self.shape(c.k)[1];
        let heads = c.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for bi in 0..b {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..lq {
                    let prow = &c.probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let grow = &g[(bi * lq + i) * d + col..][..dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        if prow[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv[(bi * lk + j) * d + col..][..dh];
                        dp[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += prow[j] * dp[j];
                        let dvrow = &mut dv[(bi * lk + j) * d + col..][..dh];
                        for (o, x) in dvrow.iter_mut().zip(grow) {
                            *o += prow[j] * x;
                        }
                    }
                    let qrow = &qv[(bi * lq + i) * d + col..][..dh];
                    for j in 0..lk {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let krow = &kv[(bi * lk + j) * d + col..][..dh];
                        let dqrow = &mut dq[(bi * lq + i) * d + col..][..dh];
                        for (o, x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk[(bi * lk + j) * d + col..][..dh];
                        for (o, x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        for (var, delta) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if let Some(slot) = self.slot(grads, var) {
                axpy(1.0, &delta, slot);
            }
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `-Σ pᵢ ln pᵢ` with `0 ln 0 = 0`.
pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Numerically stable `ln softmax(x)`.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Result of a backward pass.
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter, or `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0)?.as_deref()
    }

    /// Gradient of an input leaf created with `requires_grad`.
    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0)?.as_deref()
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }

    /// Writes the gradients into the `grad` field of every parameter that
    /// requires one; unreached parameters get `None`.
    pub fn store_into(&self, params: &mut ParamStore) {
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            if t.requires_grad {
                t.grad = self.params[id.0].clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = numel(shape);
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .with_grad()
    }

    /// Central finite differences (h = 1e-5) against the analytic gradient of
    /// `f` for every input; returns the worst relative error.
    fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::no_grad(&store);
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t)).collect();
            let out = f(&mut g, &vars);
            g.scalar(out)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.input(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]);
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    /// Contracts an arbitrary-shaped output to a scalar with fixed weights so
    /// every output element gets a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let n = g.value(x).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let w = g.constant(g.shape(x).to_vec(), w).unwrap();
        let y = g.mul(x, w).unwrap();
        g.sum(y)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = g.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p), &[3.0, 4.0, 5.0, 6.0]);
        let zero = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let z = g.matmul(zero, m).unwrap();
        assert_eq!(g.value(z), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let mut expected = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                expected[i * 3 + j] = s;
            }
        }
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(&a), g.input(&b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[5, 3]);
        for (x, y) in g.value(c).iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_shift_and_direct_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for p in g.value(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = g.constant(vec![2], vec![0.3, -1.2]).unwrap();
        let b = g.constant(vec![2], vec![100.3, 98.8]).unwrap();
        let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
            assert!((x - y).abs() < 1e-12);
        }
        // Direct double-precision evaluation of exp(x_i) / Σ exp(x_j).
        let raw = [0.5f64, 1.5, -0.5];
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        let x = g.constant(vec![3], raw.to_vec()).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for (p, v) in g.value(s).iter().zip(raw) {
            assert!((p - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random(&[2, 3, 4], &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(&t);
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for o in 0..2 {
            for i in 0..4 {
                let total: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
        assert!(g.softmax(x, 3).is_err());
    }

    #[test]
    fn cross_entropy_limits_and_oracle() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let uniform = g.constant(vec![1, 2, 5], vec![0.7; 10]).unwrap();
        let l = g.cross_entropy(uniform, &[1, 4], &[true, true]).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);

        let mut peaked = vec![-50.0; 5];
        peaked[2] = 50.0;
        let p = g.constant(vec![1, 1, 5], peaked).unwrap();
        let l = g.cross_entropy(p, &[2], &[true]).unwrap();
        assert!(g.scalar(l) < 1e-30);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(&[2, 3, 5], &mut rng);
        let targets = [0, 4, 2, 1, 3, 0];
        let mask = [true, true, false, true, false, true];
        // Scalar-by-scalar oracle: -x_t + ln Σ exp(x_j), averaged over kept rows.
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..6 {
            if !mask[r] {
                continue;
            }
            let row = &logits.data()[r * 5..r * 5 + 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
            count += 1.0;
        }
        let x = g.input(&logits);
        let l = g.cross_entropy(x, &targets, &mask).unwrap();
        assert!((g.scalar(l) - total / count).abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy(x, &[0, 9, 0, 0, 0, 0], &[true; 6]),
            Err(Error::Index { index: 9, .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(&Tensor::zeros(&[3]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradient_and_linear_map_gives_weights() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let c = g.constant(vec![1], vec![4.0]).unwrap();
        let grads = g.backward(c).unwrap();
        assert!(grads.input(x).is_none());

        let mut g = Graph::new(&store);
        let x = g.input(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let w = g.constant(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let y = g.mul(w, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.input(x).unwrap(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let bias = random(&[4], &mut rng);
        let err = gradcheck(&[a, b, bias], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let m = g.mul(d, v[1]).unwrap();
            let r = g.relu(m);
            let k = g.scale(r, -1.7);
            let z = g.add_broadcast(k, v[2]).unwrap();
            let t = g.transpose(z).unwrap();
            weighted_sum(g, t)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradients_of_matmul_layer_norm_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4], &mut rng);
        let w = random(&[4, 5], &mut rng);
        let gamma = random(&[5], &mut rng);
        let beta = random(&[5], &mut rng);
        let err = gradcheck(&[x, w, gamma, beta], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            let n = g.layer_norm(y, v[2], v[3]).unwrap();
            let s = g.softmax(n, 1).unwrap();
            weighted_sum(g, s)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradients_of_attention_with_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&[2, 3, 4], &mut rng);
        let k = random(&[2, 4, 4], &mut rng);
        let v = random(&[2, 4, 4], &mut rng);
        let mask = [true, true, false, true, true, true, true, false];
        for causal in [false, true] {
            let err = gradcheck(&[q.clone(), k.clone(), v.clone()], |g, x| {
                let args = AttentionArgs {
                    heads: 2,
                    causal,
                    key_mask: Some(&mask),
                };
                let o = g.attention(x[0], x[1], x[2], args).unwrap();
                weighted_sum(g, o)
            });
            assert!(err < 1e-4, "causal={causal}: {err}");
        }
    }

    #[test]
    fn gradients_of_sequence_plumbing_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = random(&[6, 4], &mut rng);
        let first = random(&[2, 4], &mut rng);
        let proj = random(&[4, 6], &mut rng);
        let err = gradcheck(&[table, first, proj], |g, v| {
            let e = g.embedding(v[0], &[1, 5, 5, 0, 2, 3], &[2, 3]).unwrap();
            let r = g.replace_first(e, v[1]).unwrap();
            let logits = g.matmul(r, v[2]).unwrap();
            let ce = g.cross_entropy(logits, &[0, 1, 2, 3, 4, 5], &[true, true, false, true, true, true]);
            let ce = ce.unwrap();
            let sel = g.select_position(r, 2).unwrap();
            let s = g.softmax(sel, 1).unwrap();
            let m = g.mean_rows(s).unwrap();
            let h = g.entropy(m);
            let h = g.scale(h, 0.3);
            g.sub(ce, h).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dropout_scales_kept_units() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let d = g.dropout(x, &[true, false, true, false], 0.5).unwrap();
        assert_eq!(g.value(d), &[2.0, 0.0, 6.0, 0.0]);
        let s = g.sum(d);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.input(x).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn entropy_handles_zero_mass() {
        assert_eq!(entropy_of(&[1.0, 0.0, 0.0]), 0.0);
        assert!((entropy_of(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::no_grad(&store);
        let w = g.param(id);
        let s = g.sum(w);
        assert!(!g.requires_grad(s));
        let grads = g.backward(s).unwrap();
        assert!(grads.param(id).is_none());
    }
}
