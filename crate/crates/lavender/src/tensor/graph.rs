//! Operation-recording graph for reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Each op appends a node holding its output and a record of its inputs;
//! [`Graph::backward`] walks the nodes in reverse creation order (which is a
//! topological order by construction) and accumulates vector-Jacobian
//! products. Every node is visited exactly once.
//!
//! Masked softmax uses an additive mask of large negative values rather than
//! -inf so the backward pass stays finite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
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
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Transpose { a: Var },
    Softmax { a: Var },
    Log { a: Var },
    Exp { a: Var },
    Silu { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    GatherCols { a: Var, idx: Vec<usize> },
    Stack { parts: Vec<Var> },
    ConcatRows { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    BilinearResize { a: Var },
    SqError { a: Var, b: Var },
    NllRows { logits: Var, labels: Vec<usize> },
    InstanceNorm { a: Var, eps: f64 },
    BatchNorm { a: Var, eps: f64 },
    MaxPair { a: Var, b: Var },
    NormalizeRows { a: Var },
    ScaleRows { a: Var, factors: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires: bool,
}

/// Records ops applied to tensors and replays them in reverse for gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const MASK_NEG: f64 = -1e9;

/// Additive attention mask value for blocked positions (finite on purpose).
pub fn mask_blocked() -> f64 {
    MASK_NEG
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, as a tensor of the node's shape.
    /// `None` if backward has not reached it (or was never run).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::from_vec(node.value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Gradient of a parameter node, zeros if no gradient flowed to it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant leaf: participates in values but receives no gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), false)
    }

    /// Trainable leaf: gradient is accumulated during backward.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), true)
    }

    /// Copy a node's value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(&t)
    }

    fn push_leaf(&mut self, value: Tensor, requires: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name, node: self.nodes.len() });
        }
        self.nodes.push(Node { value, grad: None, op, requires });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::ShapeMismatch { op, lhs: self.shape_of(a), rhs: self.shape_of(b) });
        }
        Ok(())
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Matrix product of 2-D tensors: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out = matmul_raw(av, bv, m, k, n);
        let req = self.requires(a) || self.requires(b);
        self.push("matmul", Tensor::from_vec(vec![m, n], out)?, Op::Matmul { a, b }, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape_of(a);
        let req = self.requires(a) || self.requires(b);
        self.push("add", Tensor::from_vec(shape, out)?, Op::Add { a, b }, req)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape_of(a);
        let req = self.requires(a) || self.requires(b);
        self.push("sub", Tensor::from_vec(shape, out)?, Op::Sub { a, b }, req)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape_of(a);
        let req = self.requires(a) || self.requires(b);
        self.push("mul", Tensor::from_vec(shape, out)?, Op::Mul { a, b }, req)
    }

    /// Add a bias row vector [n] to every row of a [m,n] matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(bias));
        if sb.len() != 1 || sa.last() != sb.last() {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb });
        }
        let n = sb[0];
        let bv = self.nodes[bias.0].value.data().to_vec();
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let req = self.requires(a) || self.requires(bias);
        self.push("add_bias", Tensor::from_vec(sa, out)?, Op::AddBias { a, bias }, req)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let shape = self.shape_of(a);
        let req = self.requires(a);
        self.push("scale", Tensor::from_vec(shape, out)?, Op::Scale { a, c }, req)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 {
            return Err(Error::Invalid { op: "transpose", detail: format!("expected rank 2, got {:?}", sa) });
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let req = self.requires(a);
        self.push("transpose", Tensor::from_vec(vec![n, m], out)?, Op::Transpose { a }, req)
    }

    /// Softmax over the last axis, with an optional additive mask of the
    /// same shape (blocked positions should carry [`mask_blocked`]).
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let sa = self.shape_of(a);
        if let Some(m) = mask {
            if m.shape() != sa.as_slice() {
                return Err(Error::ShapeMismatch { op: "softmax", lhs: sa, rhs: m.shape().to_vec() });
            }
        }
        let cols = *sa.last().ok_or(Error::Invalid { op: "softmax", detail: "rank 0".into() })?;
        let av = self.nodes[a.0].value.data();
        let mut logits: Vec<f64> = av.to_vec();
        if let Some(m) = mask {
            for (l, mv) in logits.iter_mut().zip(m.data()) {
                *l += mv;
            }
        }
        let mut out = vec![0.0; logits.len()];
        for (orow, lrow) in out.chunks_mut(cols).zip(logits.chunks(cols)) {
            let mx = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, l) in orow.iter_mut().zip(lrow) {
                *o = (l - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let req = self.requires(a);
        self.push("softmax", Tensor::from_vec(sa, out)?, Op::Softmax { a }, req)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x.ln()).collect();
        let shape = self.shape_of(a);
        let req = self.requires(a);
        self.push("log", Tensor::from_vec(shape, out)?, Op::Log { a }, req)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x.exp()).collect();
        let shape = self.shape_of(a);
        let req = self.requires(a);
        self.push("exp", Tensor::from_vec(shape, out)?, Op::Exp { a }, req)
    }

    /// x * sigmoid(x), the smooth gated activation used by the aligner and MLPs.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[a.0].value.data().iter().map(|x| x * sigmoid(*x)).collect();
        let shape = self.shape_of(a);
        let req = self.requires(a);
        self.push("silu", Tensor::from_vec(shape, out)?, Op::Silu { a }, req)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let req = self.requires(a);
        self.push("sum", Tensor::scalar(s), Op::SumAll { a }, req)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel() as f64;
        let s: f64 = self.nodes[a.0].value.data().iter().sum::<f64>() / n;
        let req = self.requires(a);
        self.push("mean", Tensor::scalar(s), Op::MeanAll { a }, req)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape_of(a), rhs: shape });
        }
        let data = self.nodes[a.0].value.data().to_vec();
        let req = self.requires(a);
        self.push("reshape", Tensor::from_vec(shape, data)?, Op::Reshape { a }, req)
    }

    /// Contiguous row range [start, end) of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 || start > end || end > sa[0] {
            return Err(Error::Invalid {
                op: "slice_rows",
                detail: format!("range {start}..{end} of shape {:?}", sa),
            });
        }
        let n = sa[1];
        let data = self.nodes[a.0].value.data()[start * n..end * n].to_vec();
        let req = self.requires(a);
        self.push("slice_rows", Tensor::from_vec(vec![end - start, n], data)?, Op::SliceRows { a, start }, req)
    }

    /// Select rows of a 2-D tensor by index list (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 {
            return Err(Error::Invalid { op: "gather_rows", detail: format!("expected rank 2, got {:?}", sa) });
        }
        let n = sa[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa[0]) {
            return Err(Error::Invalid { op: "gather_rows", detail: format!("row {bad} out of {}", sa[0]) });
        }
        let av = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let req = self.requires(a);
        self.push(
            "gather_rows",
            Tensor::from_vec(vec![idx.len(), n], data)?,
            Op::GatherRows { a, idx: idx.to_vec() },
            req,
        )
    }

    /// Select columns of a 2-D tensor by index list.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 {
            return Err(Error::Invalid { op: "gather_cols", detail: format!("expected rank 2, got {:?}", sa) });
        }
        let (m, n) = (sa[0], sa[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Invalid { op: "gather_cols", detail: format!("col {bad} out of {n}") });
        }
        let av = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(m * idx.len());
        for r in 0..m {
            for &j in idx {
                data.push(av[r * n + j]);
            }
        }
        let req = self.requires(a);
        self.push(
            "gather_cols",
            Tensor::from_vec(vec![m, idx.len()], data)?,
            Op::GatherCols { a, idx: idx.to_vec() },
            req,
        )
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid { op: "stack", detail: "no parts".into() });
        }
        let s0 = self.shape_of(parts[0]);
        for &p in parts {
            if self.shape_of(p) != s0 {
                return Err(Error::ShapeMismatch { op: "stack", lhs: s0, rhs: self.shape_of(p) });
            }
        }
        let mut data = Vec::with_capacity(parts.len() * self.nodes[parts[0].0].value.numel());
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        let req = parts.iter().any(|&p| self.requires(p));
        self.push("stack", Tensor::from_vec(shape, data)?, Op::Stack { parts: parts.to_vec() }, req)
    }

    /// Concatenate two 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: sa, rhs: sb });
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        let shape = vec![sa[0] + sb[0], sa[1]];
        let req = self.requires(a) || self.requires(b);
        self.push("concat_rows", Tensor::from_vec(shape, data)?, Op::ConcatRows { a, b }, req)
    }

    /// 2-D convolution, stride 1, same padding.
    /// x: [N,C,H,W], w: [O,C,kh,kw], b: [O] -> [N,O,H,W].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape_of(x), self.shape_of(w), self.shape_of(b));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * o * h * wd];
        for ni in 0..n {
            for oi in 0..o {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = bv[oi];
                        for ci in 0..c {
                            for di in 0..kh {
                                let y = i + di;
                                if y < ph || y - ph >= h {
                                    continue;
                                }
                                let y = y - ph;
                                for dj in 0..kw {
                                    let xw = j + dj;
                                    if xw < pw || xw - pw >= wd {
                                        continue;
                                    }
                                    let xw = xw - pw;
                                    acc += xv[((ni * c + ci) * h + y) * wd + xw]
                                        * wv[((oi * c + ci) * kh + di) * kw + dj];
                                }
                            }
                        }
                        out[((ni * o + oi) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push("conv2d", Tensor::from_vec(vec![n, o, h, wd], out)?, Op::Conv2d { x, w, b }, req)
    }

    /// Bilinear resize of a 2-D map to [out_h, out_w]. Differentiable in the
    /// input values; the output size is a fixed constant of the node.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 || sa[0] == 0 || sa[1] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::Invalid { op: "bilinear_resize", detail: format!("shape {:?} -> {out_h}x{out_w}", sa) });
        }
        let (h, w) = (sa[0], sa[1]);
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; out_h * out_w];
        for i in 0..out_h {
            for j in 0..out_w {
                for (src, wt) in bilinear_taps(i, j, h, w, out_h, out_w) {
                    out[i * out_w + j] += wt * av[src];
                }
            }
        }
        let req = self.requires(a);
        self.push("bilinear_resize", Tensor::from_vec(vec![out_h, out_w], out)?, Op::BilinearResize { a }, req)
    }

    /// Sum of squared element-wise differences, as a scalar node.
    pub fn sq_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_error", a, b)?;
        let s: f64 = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let req = self.requires(a) || self.requires(b);
        self.push("sq_error", Tensor::scalar(s), Op::SqError { a, b }, req)
    }

    /// Negative log-likelihood over the categorical last axis, summed over
    /// rows: sum_r (logsumexp(row_r) - row_r[label_r]).
    pub fn nll_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sa = self.shape_of(logits);
        if sa.len() != 2 || sa[0] != labels.len() {
            return Err(Error::Invalid {
                op: "nll_rows",
                detail: format!("logits {:?} vs {} labels", sa, labels.len()),
            });
        }
        let vocab = sa[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let av = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &av[r * vocab..(r + 1) * vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let req = self.requires(logits);
        self.push("nll_rows", Tensor::scalar(total), Op::NllRows { logits, labels: labels.to_vec() }, req)
    }

    /// Standardize each (sample, channel) plane of a [N,C,H,W] tensor to
    /// zero mean, unit variance.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 4 {
            return Err(Error::Invalid { op: "instance_norm", detail: format!("expected rank 4, got {:?}", sa) });
        }
        let plane = sa[2] * sa[3];
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; av.len()];
        for p in 0..sa[0] * sa[1] {
            standardize(&av[p * plane..(p + 1) * plane], &mut out[p * plane..(p + 1) * plane], eps);
        }
        let req = self.requires(a);
        self.push("instance_norm", Tensor::from_vec(sa, out)?, Op::InstanceNorm { a, eps }, req)
    }

    /// Standardize each channel of a [N,C,H,W] tensor over (N,H,W).
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 4 {
            return Err(Error::Invalid { op: "batch_norm", detail: format!("expected rank 4, got {:?}", sa) });
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let plane = h * w;
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; av.len()];
        for ci in 0..c {
            // Gather the channel across samples, standardize, scatter back.
            let mut vals = Vec::with_capacity(n * plane);
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                vals.extend_from_slice(&av[base..base + plane]);
            }
            let mut std_out = vec![0.0; vals.len()];
            standardize(&vals, &mut std_out, eps);
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                out[base..base + plane].copy_from_slice(&std_out[ni * plane..(ni + 1) * plane]);
            }
        }
        let req = self.requires(a);
        self.push("batch_norm", Tensor::from_vec(sa, out)?, Op::BatchNorm { a, eps }, req)
    }

    /// Element-wise maximum. Gradient routes to the larger input (ties to `a`).
    pub fn max_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("max_pair", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let shape = self.shape_of(a);
        let req = self.requires(a) || self.requires(b);
        self.push("max_pair", Tensor::from_vec(shape, out)?, Op::MaxPair { a, b }, req)
    }

    /// Rescale each row of the last axis to sum to 1. Rows summing to ~0
    /// become uniform and pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape_of(a);
        let cols = *sa.last().ok_or(Error::Invalid { op: "normalize_rows", detail: "rank 0".into() })?;
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; av.len()];
        for (orow, arow) in out.chunks_mut(cols).zip(av.chunks(cols)) {
            let s: f64 = arow.iter().sum();
            if s.abs() < ZERO_ROW_EPS {
                let u = 1.0 / cols as f64;
                orow.iter_mut().for_each(|v| *v = u);
            } else {
                for (o, x) in orow.iter_mut().zip(arow) {
                    *o = x / s;
                }
            }
        }
        let req = self.requires(a);
        self.push("normalize_rows", Tensor::from_vec(sa, out)?, Op::NormalizeRows { a }, req)
    }

    /// Multiply row t of a 2-D tensor by factors[t].
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let sa = self.shape_of(a);
        if sa.len() != 2 || sa[0] != factors.len() {
            return Err(Error::Invalid {
                op: "scale_rows",
                detail: format!("shape {:?} vs {} factors", sa, factors.len()),
            });
        }
        let n = sa[1];
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * factors[i / n])
            .collect();
        let req = self.requires(a);
        self.push("scale_rows", Tensor::from_vec(sa, out)?, Op::ScaleRows { a, factors: factors.to_vec() }, req)
    }

    /// Mean of several equally-shaped nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid { op: "mean_of", detail: "no parts".into() });
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Element-wise maximum of several equally-shaped nodes.
    pub fn max_of(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid { op: "max_of", detail: "no parts".into() });
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.max_pair(acc, p)?;
        }
        Ok(acc)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients accumulate on every node
    /// on a path from the root to a trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Invalid {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.shape_of(root)),
            });
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let Some(d_out) = self.nodes[id].grad.clone() else { continue };
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &d_out);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, grad: &[f64]) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => self.nodes[v.0].grad = Some(grad.to_vec()),
        }
    }

    fn backward_op(&mut self, id: usize, op: &Op, d_out: &[f64]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let sa = self.shape_of(*a);
                let sb = self.shape_of(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires(*a) {
                    // dA = dOut . B^T
                    let bv = self.nodes[b.0].value.data();
                    let b_t = transpose_raw(bv, k, n);
                    let d_a = matmul_raw(d_out, &b_t, m, n, k);
                    self.accumulate(*a, &d_a);
                }
                if self.requires(*b) {
                    // dB = A^T . dOut
                    let av = self.nodes[a.0].value.data();
                    let a_t = transpose_raw(av, m, k);
                    let d_b = matmul_raw(&a_t, d_out, k, m, n);
                    self.accumulate(*b, &d_b);
                }
            }

            Op::Add { a, b } => {
                self.accumulate(*a, d_out);
                self.accumulate(*b, d_out);
            }

            Op::Sub { a, b } => {
                self.accumulate(*a, d_out);
                let neg: Vec<f64> = d_out.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }

            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let d_a: Vec<f64> = d_out.iter().zip(&bv).map(|(d, y)| d * y).collect();
                let d_b: Vec<f64> = d_out.iter().zip(&av).map(|(d, x)| d * x).collect();
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }

            Op::AddBias { a, bias } => {
                self.accumulate(*a, d_out);
                let n = self.nodes[bias.0].value.numel();
                let mut d_bias = vec![0.0; n];
                for (i, d) in d_out.iter().enumerate() {
                    d_bias[i % n] += d;
                }
                self.accumulate(*bias, &d_bias);
            }

            Op::Scale { a, c } => {
                let d_a: Vec<f64> = d_out.iter().map(|d| d * c).collect();
                self.accumulate(*a, &d_a);
            }

            Op::Transpose { a } => {
                let sa = self.shape_of(*a);
                let (m, n) = (sa[0], sa[1]);
                let mut d_a = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        d_a[i * n + j] = d_out[j * m + i];
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::Softmax { a } => {
                let cols = self.nodes[id].value.last_dim();
                let out = self.nodes[id].value.data().to_vec();
                let mut d_a = vec![0.0; out.len()];
                for r in 0..out.len() / cols {
                    let base = r * cols;
                    let dot: f64 = (0..cols).map(|c| d_out[base + c] * out[base + c]).sum();
                    for c in 0..cols {
                        d_a[base + c] = out[base + c] * (d_out[base + c] - dot);
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::Log { a } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let d_a: Vec<f64> = d_out.iter().zip(&av).map(|(d, x)| d / x).collect();
                self.accumulate(*a, &d_a);
            }

            Op::Exp { a } => {
                let out = self.nodes[id].value.data().to_vec();
                let d_a: Vec<f64> = d_out.iter().zip(&out).map(|(d, y)| d * y).collect();
                self.accumulate(*a, &d_a);
            }

            Op::Silu { a } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let d_a: Vec<f64> = d_out
                    .iter()
                    .zip(&av)
                    .map(|(d, x)| {
                        let s = sigmoid(*x);
                        d * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &d_a);
            }

            Op::SumAll { a } => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(*a, &vec![d_out[0]; n]);
            }

            Op::MeanAll { a } => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(*a, &vec![d_out[0] / n as f64; n]);
            }

            Op::Reshape { a } => {
                self.accumulate(*a, d_out);
            }

            Op::SliceRows { a, start } => {
                let sa = self.shape_of(*a);
                let n = sa[1];
                let mut d_a = vec![0.0; sa[0] * n];
                d_a[start * n..start * n + d_out.len()].copy_from_slice(d_out);
                self.accumulate(*a, &d_a);
            }

            Op::GatherRows { a, idx } => {
                let sa = self.shape_of(*a);
                let n = sa[1];
                let mut d_a = vec![0.0; sa[0] * n];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        d_a[i * n + c] += d_out[r * n + c];
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::GatherCols { a, idx } => {
                let sa = self.shape_of(*a);
                let (m, n) = (sa[0], sa[1]);
                let k = idx.len();
                let mut d_a = vec![0.0; m * n];
                for r in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        d_a[r * n + j] += d_out[r * k + c];
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::Stack { parts } => {
                let each = self.nodes[parts[0].0].value.numel();
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(p, &d_out[i * each..(i + 1) * each]);
                }
            }

            Op::ConcatRows { a, b } => {
                let na = self.nodes[a.0].value.numel();
                self.accumulate(*a, &d_out[..na]);
                self.accumulate(*b, &d_out[na..]);
            }

            Op::Conv2d { x, w, b } => {
                let sx = self.shape_of(*x);
                let sw = self.shape_of(*w);
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let xv = self.nodes[x.0].value.data().to_vec();
                let wv = self.nodes[w.0].value.data().to_vec();
                let mut d_x = vec![0.0; xv.len()];
                let mut d_w = vec![0.0; wv.len()];
                let mut d_b = vec![0.0; o];
                for ni in 0..n {
                    for oi in 0..o {
                        for i in 0..h {
                            for j in 0..wd {
                                let d = d_out[((ni * o + oi) * h + i) * wd + j];
                                if d == 0.0 {
                                    continue;
                                }
                                d_b[oi] += d;
                                for ci in 0..c {
                                    for di in 0..kh {
                                        let y = i + di;
                                        if y < ph || y - ph >= h {
                                            continue;
                                        }
                                        let y = y - ph;
                                        for dj in 0..kw {
                                            let xw = j + dj;
                                            if xw < pw || xw - pw >= wd {
                                                continue;
                                            }
                                            let xw = xw - pw;
                                            let xi = ((ni * c + ci) * h + y) * wd + xw;
                                            let wi = ((oi * c + ci) * kh + di) * kw + dj;
                                            d_x[xi] += d * wv[wi];
                                            d_w[wi] += d * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, &d_x);
                self.accumulate(*w, &d_w);
                self.accumulate(*b, &d_b);
            }

            Op::BilinearResize { a } => {
                let sa = self.shape_of(*a);
                let (h, w) = (sa[0], sa[1]);
                let so = self.nodes[id].value.shape().to_vec();
                let (oh, ow) = (so[0], so[1]);
                let mut d_a = vec![0.0; h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let d = d_out[i * ow + j];
                        if d == 0.0 {
                            continue;
                        }
                        for (src, wt) in bilinear_taps(i, j, h, w, oh, ow) {
                            d_a[src] += d * wt;
                        }
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::SqError { a, b } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let d = d_out[0];
                let d_a: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| 2.0 * d * (x - y)).collect();
                let d_b: Vec<f64> = d_a.iter().map(|v| -v).collect();
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }

            Op::NllRows { logits, labels } => {
                let sa = self.shape_of(*logits);
                let vocab = sa[1];
                let av = self.nodes[logits.0].value.data().to_vec();
                let d = d_out[0];
                let mut d_l = vec![0.0; av.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &av[r * vocab..(r + 1) * vocab];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for e in exps.iter_mut() {
                        *e /= sum;
                    }
                    for c in 0..vocab {
                        d_l[r * vocab + c] = d * (exps[c] - if c == label { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(*logits, &d_l);
            }

            Op::InstanceNorm { a, eps } => {
                let sa = self.shape_of(*a);
                let plane = sa[2] * sa[3];
                let av = self.nodes[a.0].value.data().to_vec();
                let out = self.nodes[id].value.data().to_vec();
                let mut d_a = vec![0.0; av.len()];
                for p in 0..sa[0] * sa[1] {
                    let r = p * plane..(p + 1) * plane;
                    standardize_vjp(&av[r.clone()], &out[r.clone()], &d_out[r.clone()], &mut d_a[r], *eps);
                }
                self.accumulate(*a, &d_a);
            }

            Op::BatchNorm { a, eps } => {
                let sa = self.shape_of(*a);
                let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let plane = h * w;
                let av = self.nodes[a.0].value.data().to_vec();
                let out = self.nodes[id].value.data().to_vec();
                let mut d_a = vec![0.0; av.len()];
                for ci in 0..c {
                    let mut xs = Vec::with_capacity(n * plane);
                    let mut ys = Vec::with_capacity(n * plane);
                    let mut ds = Vec::with_capacity(n * plane);
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        xs.extend_from_slice(&av[base..base + plane]);
                        ys.extend_from_slice(&out[base..base + plane]);
                        ds.extend_from_slice(&d_out[base..base + plane]);
                    }
                    let mut dx = vec![0.0; xs.len()];
                    standardize_vjp(&xs, &ys, &ds, &mut dx, *eps);
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        d_a[base..base + plane].copy_from_slice(&dx[ni * plane..(ni + 1) * plane]);
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::MaxPair { a, b } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let mut d_a = vec![0.0; av.len()];
                let mut d_b = vec![0.0; bv.len()];
                for i in 0..av.len() {
                    if av[i] >= bv[i] {
                        d_a[i] = d_out[i];
                    } else {
                        d_b[i] = d_out[i];
                    }
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }

            Op::NormalizeRows { a } => {
                let cols = self.nodes[id].value.last_dim();
                let av = self.nodes[a.0].value.data().to_vec();
                let out = self.nodes[id].value.data().to_vec();
                let mut d_a = vec![0.0; av.len()];
                for r in 0..av.len() / cols {
                    let base = r * cols;
                    let s: f64 = av[base..base + cols].iter().sum();
                    if s.abs() < ZERO_ROW_EPS {
                        continue; // uniform fallback passes no gradient
                    }
                    let dot: f64 = (0..cols).map(|c| d_out[base + c] * out[base + c]).sum();
                    for c in 0..cols {
                        d_a[base + c] = (d_out[base + c] - dot) / s;
                    }
                }
                self.accumulate(*a, &d_a);
            }

            Op::ScaleRows { a, factors } => {
                let sa = self.shape_of(*a);
                let n = sa[1];
                let d_a: Vec<f64> = d_out.iter().enumerate().map(|(i, d)| d * factors[i / n]).collect();
                self.accumulate(*a, &d_a);
            }
        }
    }
}

const ZERO_ROW_EPS: f64 = 1e-300;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bb) in orow.iter_mut().zip(brow) {
                *o += x * bb;
            }
        }
    }
    out
}

/// Up to four (source index, weight) taps for one output pixel of a
/// bilinear resize with half-pixel centers.
fn bilinear_taps(i: usize, j: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<(usize, f64)> {
    let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    vec![
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// y = (x - mean) / sqrt(var + eps), population variance.
fn standardize(x: &[f64], out: &mut [f64], eps: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

/// VJP of [`standardize`]: dx = (dy - mean(dy) - y * mean(dy ∘ y)) / sqrt(var + eps).
fn standardize_vjp(x: &[f64], y: &[f64], dy: &[f64], dx: &mut [f64], eps: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dy_y = dy.iter().zip(y).map(|(d, yy)| d * yy).sum::<f64>() / n;
    for i in 0..x.len() {
        dx[i] = (dy[i] - mean_dy - y[i] * mean_dy_y) * inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64, msg: &str) {
        assert_eq!(actual.len(), expected.len(), "{msg}: length mismatch");
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() < tol, "{msg}[{i}]: actual={a} expected={e}");
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x, None).unwrap();
        assert_close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-12, "softmax zeros");
    }

    #[test]
    fn softmax_hand_evaluated() {
        // exp(x_i) / sum(exp(x_j)) for [1, 2, 3] at 64-bit.
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x, None).unwrap();
        assert_close(
            g.value(y).data(),
            &[0.09003057317038046, 0.24472847105479767, 0.6652409557748219],
            1e-9,
            "softmax [1,2,3]",
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::stream(3, crate::rng::Stream::Other(1));
        let mut g = Graph::new();
        let x = g.input(&Tensor::randn(vec![5, 7], 3.0, &mut rng));
        let y = g.softmax(x, None).unwrap();
        for row in g.value(y).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i3 = g.input(&Tensor::eye(3));
        let x = g.input(&Tensor::from_vec(vec![3, 2], (0..6).map(|v| v as f64).collect()).unwrap());
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::zeros(vec![2, 3]));
        let b = g.input(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn reshape_is_bijective() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap());
        let y = g.reshape(x, vec![3, 4]).unwrap();
        let z = g.reshape(y, vec![2, 6]).unwrap();
        assert_eq!(g.value(z).data(), g.value(x).data());
    }

    #[test]
    fn backward_chain_mul_add() {
        // out = a*b + a  =>  d_a = b + 1, d_b = a.
        let mut g = Graph::new();
        let a = g.param(&Tensor::scalar(3.0));
        let b = g.param(&Tensor::scalar(5.0));
        let c = g.mul(a, b).unwrap();
        let out = g.add(c, a).unwrap();
        g.backward(out).unwrap();
        assert_close(g.grad(a).unwrap().data(), &[6.0], 1e-12, "d_a");
        assert_close(g.grad(b).unwrap().data(), &[3.0], 1e-12, "d_b");
    }

    #[test]
    fn backward_masked_softmax_is_finite() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![2, 3], vec![0.5, -0.2, 1.0, 0.0, 0.1, 0.2]).unwrap());
        let mut mask = Tensor::zeros(vec![2, 3]);
        mask.data_mut()[2] = mask_blocked();
        mask.data_mut()[5] = mask_blocked();
        let y = g.softmax(x, Some(&mask)).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert!(grad.is_finite());
        // Masked entries carry (numerically) zero probability.
        assert!(g.value(y).data()[2] < 1e-12);
    }

    #[test]
    fn nll_uniform_is_log_vocab() {
        let mut g = Graph::new();
        let logits = g.input(&Tensor::zeros(vec![2, 8]));
        let loss = g.nll_rows(logits, &[3, 5]).unwrap();
        assert_close(g.value(loss).data(), &[2.0 * (8f64).ln()], 1e-12, "nll uniform");
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.input(&Tensor::zeros(vec![1, 4]));
        assert!(g.nll_rows(logits, &[4]).is_err());
    }

    #[test]
    fn normalize_rows_handles_zero_row() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::from_vec(vec![2, 4], vec![1.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.normalize_rows(x).unwrap();
        let v = g.value(y);
        assert_close(&v.data()[..4], &[0.25, 0.25, 0.5, 0.0], 1e-12, "row 0");
        assert_close(&v.data()[4..], &[0.25; 4], 1e-12, "zero row uniform");
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_close(&grad.data()[4..], &[0.0; 4], 1e-12, "zero row passes no grad");
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let mut rng = crate::rng::stream(11, crate::rng::Stream::Other(2));
        let t = Tensor::rand_uniform(vec![32, 32], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(&t);
        let y = g.bilinear_resize(x, 32, 32).unwrap();
        for (a, b) in g.value(y).data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::filled(vec![3, 5], 0.7));
        let y = g.bilinear_resize(x, 32, 32).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![1, 2], vec![-1.0, 2.0]).unwrap());
        let err = g.log(x).unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn max_pair_routes_gradient_to_larger() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::from_vec(vec![1, 2], vec![1.0, 5.0]).unwrap());
        let b = g.param(&Tensor::from_vec(vec![1, 2], vec![3.0, 2.0]).unwrap());
        let m = g.max_pair(a, b).unwrap();
        let loss = g.sum_all(m).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(a).unwrap().data(), &[0.0, 1.0], 1e-12, "d_a");
        assert_close(g.grad(b).unwrap().data(), &[1.0, 0.0], 1e-12, "d_b");
    }

    #[test]
    fn stack_and_gather_roundtrip_gradients() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = g.gather_rows(a, &[1, 0, 1]).unwrap();
        let loss = g.sum_all(r).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(a).unwrap().data(), &[1.0, 1.0, 2.0, 2.0], 1e-12, "gather grad");
    }
}
