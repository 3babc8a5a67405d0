//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Parameters enter as
//! borrowed leaves, so nothing is copied; the tape only owns intermediate
//! activations and the caches each backward rule needs. [`Tape::backward`]
//! walks the record once in reverse and returns a [`Gradients`] table that
//! outlives the tape, which lets the caller release the borrow before
//! writing gradients back into mutable parameters.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor};

/// Handle to one recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range of one sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Float>,
        rstd: Vec<Float>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<Float>,
    },
    Gather { table: Var, ids: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<Span>,
        heads: usize,
        probs: Vec<Float>,
    },
    Sum(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [Float]>,
    requires_grad: bool,
    op: Op,
}

/// The computation record for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [Float]>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    /// Borrows a tensor as a leaf; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.values()),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Moves a tensor onto the tape as a leaf.
    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        self.push(shape, Cow::Owned(t.into_values()), rg, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<Float>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::dims("constant", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), Cow::Owned(values), false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[Float] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.value.to_vec()).expect("recorded shapes are consistent")
    }

    /// `a · b` for `a: [.., k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [.., k]` and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let k = cols(&sa);
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(Error::dims("matmul", &sa, &sb));
        }
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), trans_b, 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, Cow::Owned(out), rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<Float> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), rg, Op::Add(a, b)))
    }

    /// Adds a length-`n` row vector to every row of `x: [.., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = cols(self.shape(x));
        if self.shape(row) != [n] {
            return Err(Error::dims("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out: Vec<Float> = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(row);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), rg, Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<Float> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: Float) -> Var {
        let out: Vec<Float> = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), rg, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<Float> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), rg, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: Float) -> Result<Var> {
        let d = cols(self.shape(x));
        if self.shape(gain) != [d] {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [d] {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(bias)));
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Float>() / d as Float;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = cols(self.shape(x));
        if n == 0 {
            return Err(Error::Input("softmax over an empty axis".into()));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let rg = self.requires_grad(x);
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), rg, Op::Softmax(x)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = cols(self.shape(logits));
        let rows = self.value(logits).len() / v;
        if targets.len() != rows {
            return Err(Error::dims("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: v,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let loss = total / rows as Float;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::dims("gather_rows", st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "embedding table",
                index: bad,
                bound: rows,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, d]` with `d` divisible by `heads`; `spans` must
    /// tile `0..rows` in order. Position `i` of a span attends to positions
    /// `0..=i` of the same span only: later scores are set to `-inf` before the
    /// softmax, so their weights are exactly zero.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, spans: &[Span], heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dims("causal_attention", &shape, self.shape(k)));
        }
        let (rows, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by heads={heads}")));
        }
        let mut cursor = 0;
        for s in spans {
            if s.start != cursor || s.len == 0 {
                return Err(Error::Contract("attention spans must tile the rows in order".into()));
            }
            cursor += s.len;
        }
        if cursor != rows {
            return Err(Error::Contract(format!("attention spans cover {cursor} of {rows} rows")));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as Float).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(spans.iter().map(|s| s.len * s.len * heads).sum());
        let mut scores = Vec::new();
        for s in spans {
            let t = s.len;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    scores.clear();
                    let qi = &qs[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for j in 0..t {
                        if j > i {
                            scores.push(Float::NEG_INFINITY);
                        } else {
                            let kj = &ks[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                            scores.push(dot(qi, kj) * inv);
                        }
                    }
                    softmax_in_place(&mut scores);
                    let oi = &mut out[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for (j, &p) in scores.iter().enumerate().take(i + 1) {
                        let vj = &vs[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o += p * x);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![1], Cow::Owned(vec![s]), rg, Op::Sum(a))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Float>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(a);
                let k = cols(sa);
                let m = self.value(a).len() / k;
                let n = cols(&node.shape);
                if self.wants(a) {
                    let ga = slot(grads, a, m * k);
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, 1.0, g, false, self.value(b), !trans_b, 1.0, ga);
                }
                if self.wants(b) {
                    let gb = slot(grads, b, k * n);
                    if trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, 1.0, g, true, self.value(a), false, 1.0, gb);
                    } else {
                        gemm(k, m, n, 1.0, self.value(a), true, g, false, 1.0, gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if self.wants(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if self.wants(row) {
                    let n = cols(&node.shape);
                    let gr = slot(grads, row, n);
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b);
                    let ga = slot(grads, a, g.len());
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(s, (gi, bi))| *s += gi * bi);
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let gb = slot(grads, b, g.len());
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(s, (gi, ai))| *s += gi * ai);
                }
            }
            &Op::Scale(a, s) => {
                if self.wants(a) {
                    let ga = slot(grads, a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a) {
                    let av = self.value(a);
                    let ga = slot(grads, a, g.len());
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *d += gi * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = cols(&node.shape);
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        gg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(s, (a, b))| *s += a * b);
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if self.wants(*x) {
                    let gain_v = self.value(*gain);
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gain_v[j];
                        }
                        let m1 = dxhat.iter().sum::<Float>() / d as Float;
                        let m2 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<Float>() / d as Float;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.wants(x) {
                    let n = cols(&node.shape);
                    let y = &node.value;
                    let gx = slot(grads, x, g.len());
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dotp = dot(gr, yr);
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let v = cols(self.shape(*logits));
                    let scale = g[0] / targets.len() as Float;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = &probs[r * v..(r + 1) * v];
                        let out = &mut gl[r * v..(r + 1) * v];
                        for j in 0..v {
                            out[j] += scale * pr[j];
                        }
                        out[t] -= scale;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let st = self.shape(*table);
                    let d = st[1];
                    let gt = slot(grads, *table, st[0] * d);
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => self.backprop_attention(g, *q, *k, *v, spans, *heads, probs, grads),
            &Op::Sum(a) => {
                if self.wants(a) {
                    let ga = slot(grads, a, self.value(a).len());
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &[Float],
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        heads: usize,
        probs: &[Float],
        grads: &mut [Option<Vec<Float>>],
    ) {
        let d = cols(self.shape(q));
        let rows = self.value(q).len() / d;
        let dh = d / heads;
        let inv = 1.0 / (dh as Float).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = Vec::new();
        let mut off_p = 0;
        for s in spans {
            let t = s.len;
            for h in 0..heads {
                let off = h * dh;
                let at = |r: usize| (s.start + r) * d + off..(s.start + r) * d + off + dh;
                for i in 0..t {
                    let p = &probs[off_p + i * t..off_p + (i + 1) * t];
                    let gi = &g[at(i)];
                    dp.clear();
                    for j in 0..=i {
                        dp.push(dot(gi, &vs[at(j)]));
                        let dvj = &mut dv[at(j)];
                        dvj.iter_mut().zip(gi).for_each(|(o, &x)| *o += p[j] * x);
                    }
                    let wsum: Float = (0..=i).map(|j| p[j] * dp[j]).sum();
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - wsum) * inv;
                        if ds == 0.0 {
                            continue;
                        }
                        let r_i = at(i);
                        let r_j = at(j);
                        for c in 0..dh {
                            dq[r_i.start + c] += ds * ks[r_j.start + c];
                            dk[r_j.start + c] += ds * qs[r_i.start + c];
                        }
                    }
                }
                off_p += t * t;
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                add_into(slot(grads, var, rows * d), &buf);
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Float]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s grad slot when `t` requires one.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if !t.requires_grad() {
            return;
        }
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

fn slot(grads: &mut [Option<Vec<Float>>], v: Var, len: usize) -> &mut [Float] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [Float], src: &[Float]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn dot(a: &[Float], b: &[Float]) -> Float {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[Float]) -> Float {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    if max == Float::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<Float>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    row.iter_mut().for_each(|z| *z /= total);
}

const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: Float) -> Float {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: Float) -> Float {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[Float]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let (va, vb, vi) = (tape.leaf(&a), tape.leaf(&b), tape.leaf(&id));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
        let c = tape.matmul(va, vi).unwrap();
        assert_eq!(tape.value(c), a.values());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let err = tape.matmul(va, vb).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let x = t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.softmax_rows(v).unwrap();
        let out = tape.value(s);
        for &p in &out[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(out[3], 1.0);
        assert_eq!(out[4], 0.0);
        assert!(out.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn layer_norm_edge_rows() {
        let x = t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]);
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        let mut tape = Tape::new();
        let (vx, vg, vb) = (tape.leaf(&x), tape.leaf(&g), tape.leaf(&b));
        let y = tape.layer_norm(vx, vg, vb, 1e-12).unwrap();
        let out = tape.value(y);
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] - 1.0).abs() < 1e-9 && (out[3] + 1.0).abs() < 1e-9);
        assert!(tape.layer_norm(vx, vg, vb, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(&[3, 8]);
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = tape.cross_entropy(l, &[0, 5, 7]).unwrap();
        assert!((tape.value(loss)[0] - (8.0 as Float).ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(l, &[0, 8, 1]),
            Err(Error::Index { index: 8, bound: 8, .. })
        ));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut last = Float::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut v = vec![0.0; 4];
            v[2] = margin;
            let logits = t(&[1, 4], &v);
            let mut tape = Tape::new();
            let l = tape.leaf(&logits);
            let ce = tape.cross_entropy(l, &[2]).unwrap();
            let loss = tape.value(ce)[0];
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::ones(&[2, 2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_and_half_square_grads() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(v).unwrap(), x.values());
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let w = Tensor::ones(&[2, 2]);
        let x = Tensor::ones(&[1, 2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let (vw, vx) = (tape.leaf(&w), tape.leaf(&x));
        let y = tape.matmul(vx, vw).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(vw).is_none());
        assert_eq!(g.get(vx).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn attention_masks_future() {
        let x = t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let mut y = x.clone();
        y.values_mut()[4] = 9.0;
        let run = |src: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(src);
            let spans = [Span { start: 0, len: 3 }];
            let a = tape.causal_attention(v, v, v, &spans, 1).unwrap();
            tape.value(a).to_vec()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(&a[..4], &b[..4]);
        // first position only sees itself
        assert_eq!(&a[..2], &x.values()[..2]);
    }

    #[test]
    fn attention_rejects_bad_spans() {
        let x = Tensor::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(tape.causal_attention(v, v, v, &[Span { start: 0, len: 2 }], 1).is_err());
        assert!(tape.causal_attention(v, v, v, &[Span { start: 0, len: 3 }], 3).is_err());
    }
}
