//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every primitive as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! for every node that depends on a leaf created with `requires_grad`.

use crate::error::{shape_err, Error, Result};
use crate::nn::tensor::{gemm_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Gelu,
    Tanh,
    Elu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let x2 = x * x;
                let u = GELU_C * (x + 0.044715 * x2 * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x2)
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Segment structure for a batched self-attention call: `segments` blocks of
/// `seg_len` consecutive rows attend only within their own block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub segments: usize,
    pub seg_len: usize,
    pub heads: usize,
    /// Per row: whether the row may be attended to as a key.
    pub key_mask: Vec<bool>,
    pub scale: f64,
}

/// Size of the score matrices materialized by one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionRecord {
    pub segments: usize,
    pub seg_len: usize,
    pub heads: usize,
}

impl AttentionRecord {
    /// Attended-field entries summed over segments, counted once per head.
    pub fn entries_per_head(&self) -> usize {
        self.segments * self.seg_len * self.seg_len
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Gather(Var, Vec<usize>),
    ReplaceRows { base: Var, src: Var, rows: Vec<usize> },
    BlendRows { a: Var, b: Var, take_a: Vec<bool> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SegmentCombine { weights: Var, x: Var },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64> },
    Sum(Var),
    LogClamped(Var, f64),
    MulConst(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    attention_log: Vec<AttentionRecord>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), attention_log: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn attention_log(&self) -> &[AttentionRecord] {
        &self.attention_log
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `bias` (one value per column) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).numel() != n {
            return shape_err(format!("bias of {} values for {n} columns", self.value(bias).numel()));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * c).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| act.apply(v)).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Act(x, act), ng)
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return shape_err("layer_norm parameter size");
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Row-wise softmax. Masked entries (mask value `false`) get weight 0.
    /// A row with no unmasked entry is an error unless `allow_empty`, in
    /// which case it becomes all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>, allow_empty: bool) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return shape_err(format!("softmax mask of {} for {m}x{n}", mask.len()));
            }
        }
        let vx = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let keep = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
            softmax_into(row, keep, &mut out[r * n..(r + 1) * n]).or_else(|e| if allow_empty { Ok(()) } else { Err(e) })?;
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), ng))
    }

    /// Selects rows of `src` by index (embedding lookup and row picking).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::OutOfRange(format!("row {bad} of {m}")));
        }
        let vs = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&vs[i * n..(i + 1) * n]);
        }
        let ng = self.ng(src);
        Ok(self.push(Tensor::matrix(idx.len(), n, out)?, Op::Gather(src, idx.to_vec()), ng))
    }

    /// Copy of `base` with rows `rows[i]` overwritten by row `i` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(base);
        let (s, n2) = self.dims(src);
        if n != n2 || s != rows.len() {
            return shape_err("replace_rows");
        }
        let mut seen = vec![false; m];
        for &r in rows {
            if r >= m || std::mem::replace(&mut seen[r], true) {
                return Err(Error::OutOfRange(format!("replace row {r} of {m}")));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let vs = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&vs[i * n..(i + 1) * n]);
        }
        let shape = self.value(base).shape().to_vec();
        let ng = self.ng(base) || self.ng(src);
        Ok(self.push(Tensor::new(shape, out)?, Op::ReplaceRows { base, src, rows: rows.to_vec() }, ng))
    }

    /// Row `r` of the output is row `r` of `a` when `take_a[r]`, else of `b`.
    pub fn blend_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        self.same_shape(a, b, "blend_rows")?;
        let (m, n) = self.dims(a);
        if take_a.len() != m {
            return shape_err("blend_rows selector length");
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for (r, &t) in take_a.iter().enumerate() {
            let src = if t { va } else { vb };
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::BlendRows { a, b, take_a: take_a.to_vec() }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return shape_err("concat_cols row counts differ");
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return shape_err("concat_rows column counts differ");
        }
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            m += self.dims(p).0;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `out[s] = sum_l weights[s, l] * x[s * L + l]` for `weights` of shape
    /// `S x L` and `x` of shape `(S * L) x d`.
    pub fn segment_combine(&mut self, weights: Var, x: Var) -> Result<Var> {
        let (s, l) = self.dims(weights);
        let (sl, d) = self.dims(x);
        if s * l != sl {
            return shape_err(format!("segment_combine {s}x{l} weights over {sl} rows"));
        }
        let w = self.value(weights).data();
        let vx = self.value(x).data();
        let mut out = vec![0.0; s * d];
        for seg in 0..s {
            let o = &mut out[seg * d..(seg + 1) * d];
            for j in 0..l {
                let wj = w[seg * l + j];
                if wj == 0.0 {
                    continue;
                }
                let row = &vx[(seg * l + j) * d..(seg * l + j + 1) * d];
                for (oo, xx) in o.iter_mut().zip(row) {
                    *oo += wj * xx;
                }
            }
        }
        let ng = self.ng(weights) || self.ng(x);
        Ok(self.push(Tensor::matrix(s, d, out)?, Op::SegmentCombine { weights, x }, ng))
    }

    /// Multi-head scaled dot-product attention within segments.
    ///
    /// `q`, `k`, `v` are `(segments * seg_len) x d`; head `h` uses columns
    /// `h * d / heads .. (h + 1) * d / heads`. Keys whose `key_mask` entry is
    /// `false` receive zero weight from every query row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return shape_err("attention q/k/v shapes differ");
        }
        let AttentionLayout { segments, seg_len: len, heads, .. } = layout;
        if segments * len != rows || layout.key_mask.len() != rows {
            return shape_err(format!("attention layout {segments}x{len} for {rows} rows"));
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("{heads} heads do not divide width {d}"));
        }
        let dk = d / heads;
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; segments * heads * len * len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; len];
        for s in 0..segments {
            let base = s * len;
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..len {
                    let qi = &vq[(base + i) * d + c0..(base + i) * d + c0 + dk];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &vk[(base + j) * d + c0..(base + j) * d + c0 + dk];
                        *sc = dot(qi, kj) * layout.scale;
                    }
                    let p = &mut probs[((s * heads + h) * len + i) * len..][..len];
                    softmax_into(&scores, |j| layout.key_mask[base + j], p)?;
                    let o = &mut out[(base + i) * d + c0..(base + i) * d + c0 + dk];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vj = &vv[(base + j) * d + c0..(base + j) * d + c0 + dk];
                        for (oo, x) in o.iter_mut().zip(vj) {
                            *oo += pj * x;
                        }
                    }
                }
            }
        }
        self.attention_log.push(AttentionRecord { segments, seg_len: len, heads });
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Tensor::matrix(rows, d, out)?, Op::Attention { q, k, v, layout, probs }, ng))
    }

    /// Attention weights recorded by an attention node, indexed
    /// `[segment][head][query row][key row]` and flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v.max(eps).ln()).collect()).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::LogClamped(x, eps), ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).numel() != c.numel() {
            return shape_err("mul_const size");
        }
        let vx = self.value(x);
        let t = Tensor::new(vx.shape().to_vec(), vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MulConst(x, c.data().to_vec()), ng))
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates d(output)/d(node) for every node `output` depends on.
    /// `output` must be a single-element tensor.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return shape_err("backward needs a scalar output");
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                if needs(*a) {
                    let bv = val(*b);
                    acc(*a, &mut |ga| gemm_acc(m, n, k, g, false, bv, true, ga));
                }
                if needs(*b) {
                    let av = val(*a);
                    acc(*b, &mut |gb| gemm_acc(k, m, n, av, true, g, false, gb));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(va) {
                        *o += x * y;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = nodes[bias.0].value.numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += c * v;
                }
            }),
            Op::Act(x, act) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for (((o, gg), xx), yy) in gx.iter_mut().zip(g).zip(vx).zip(out) {
                        *o += gg * act.derivative(*xx, *yy);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dh[c] = grow[c] * gm[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let o = &mut gx[r * n..(r + 1) * n];
                        for c in 0..n {
                            o[c] += inv_std[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |gx| {
                    for ((orow, grow), prow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dotp: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            orow[c] += prow[c] * (grow[c] - dotp);
                        }
                    }
                });
            }
            Op::Gather(src, idx) => {
                let n = nodes[src.0].value.cols();
                acc(*src, &mut |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ReplaceRows { base, src, rows } => {
                let n = nodes[base.0].value.cols();
                let m = nodes[base.0].value.rows();
                let mut replaced = vec![false; m];
                for &r in rows {
                    replaced[r] = true;
                }
                acc(*base, &mut |gb| {
                    for (r, _) in replaced.iter().enumerate().filter(|(_, &x)| !x) {
                        add_into(&mut gb[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
                acc(*src, &mut |gs| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gs[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::BlendRows { a, b, take_a } => {
                let n = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, &t) in take_a.iter().enumerate() {
                        if t {
                            add_into(&mut ga[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, &t) in take_a.iter().enumerate() {
                        if !t {
                            add_into(&mut gb[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::SegmentCombine { weights, x } => {
                let (s, l) = (nodes[weights.0].value.rows(), nodes[weights.0].value.cols());
                let d = nodes[x.0].value.cols();
                let (w, vx) = (val(*weights), val(*x));
                acc(*weights, &mut |gw| {
                    for seg in 0..s {
                        let go = &g[seg * d..(seg + 1) * d];
                        for j in 0..l {
                            gw[seg * l + j] += dot(go, &vx[(seg * l + j) * d..(seg * l + j + 1) * d]);
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for seg in 0..s {
                        let go = &g[seg * d..(seg + 1) * d];
                        for j in 0..l {
                            let wj = w[seg * l + j];
                            if wj == 0.0 {
                                continue;
                            }
                            for (o, gg) in gx[(seg * l + j) * d..(seg * l + j + 1) * d].iter_mut().zip(go) {
                                *o += wj * gg;
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (rows, d) = (nodes[q.0].value.rows(), nodes[q.0].value.cols());
                let (len, heads) = (layout.seg_len, layout.heads);
                let dk = d / heads;
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let mut dp = vec![0.0; len];
                for s in 0..layout.segments {
                    let base = s * len;
                    for h in 0..heads {
                        let c0 = h * dk;
                        for i in 0..len {
                            let p = &probs[((s * heads + h) * len + i) * len..][..len];
                            let go = &g[(base + i) * d + c0..(base + i) * d + c0 + dk];
                            for j in 0..len {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let r = (base + j) * d + c0;
                                dp[j] = dot(go, &vv[r..r + dk]);
                                for (o, gg) in gv[r..r + dk].iter_mut().zip(go) {
                                    *o += p[j] * gg;
                                }
                            }
                            let pd: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = (base + i) * d + c0;
                            for j in 0..len {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - pd) * layout.scale;
                                let r = (base + j) * d + c0;
                                for c in 0..dk {
                                    gq[qi + c] += ds * vk[r + c];
                                    gk[r + c] += ds * vq[qi + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |o| add_into(o, &gq));
                acc(*k, &mut |o| add_into(o, &gk));
                acc(*v, &mut |o| add_into(o, &gv));
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::LogClamped(x, eps) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((o, gg), xx) in gx.iter_mut().zip(g).zip(vx) {
                        if *xx > *eps {
                            *o += gg / xx;
                        }
                    }
                });
            }
            Op::MulConst(x, c) => acc(*x, &mut |gx| {
                for ((o, gg), cc) in gx.iter_mut().zip(g).zip(c) {
                    *o += gg * cc;
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax of `x` restricted to positions where `keep` holds.
pub(crate) fn softmax_into(x: &[f64], keep: impl Fn(usize) -> bool, out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return Err(Error::AllMasked);
    }
    let mut total = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if keep(j) && v > f64::NEG_INFINITY { (v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}
