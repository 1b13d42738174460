//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node holding its output value. Calling
//! [`Graph::backward`] walks the nodes in reverse creation order, which is a valid
//! topological order because an op can only consume nodes that already exist.
//! Gradients are only propagated into nodes that transitively depend on an input
//! or trainable parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<T> },
    LeakyRelu { x: Var, slope: T },
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Bce { p: Var, target: Vec<T> },
    L1 { p: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Layout of a batched multi-head attention: `batch` independent sequences of
/// `seq_q` queries and `seq_k` keys stacked along rows, `heads` column blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub seq_q: usize,
    pub seq_k: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl AttnGeom {
    fn width(&self) -> usize {
        self.heads * self.d_head
    }

    /// Copies head `h` of sequence `b` out of a `[batch·seq, heads·d_head]` matrix.
    fn gather<T: Real>(&self, src: &[T], b: usize, seq: usize, h: usize) -> Vec<T> {
        let w = self.width();
        let mut out = Vec::with_capacity(seq * self.d_head);
        for r in 0..seq {
            let off = (b * seq + r) * w + h * self.d_head;
            out.extend_from_slice(&src[off..off + self.d_head]);
        }
        out
    }

    fn scatter_add<T: Real>(&self, dst: &mut [T], part: &[T], b: usize, seq: usize, h: usize) {
        let w = self.width();
        for r in 0..seq {
            let off = (b * seq + r) * w + h * self.d_head;
            dst[off..off + self.d_head].iter_mut().zip(&part[r * self.d_head..(r + 1) * self.d_head]).for_each(|(a, &p)| *a += p);
        }
    }
}

/// Lower clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn dims2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0, 0] }),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Graph<T> {
    /// `training` enables dropout and batch statistics; `seed` drives dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self { nodes: Vec::new(), training, rng: ChaCha8Rng::seed_from_u64(seed), buffer_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, grad: None, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    /// A leaf whose gradient is kept after [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.trainable, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad matches value"))
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    // -----------------------------------------------------------------------
    // Elementwise
    // -----------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x + c` for a constant tensor `c` of the same shape (masks, positional codes).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(mismatch("add_const", self.shape(x), c.shape()));
        }
        let data = self.val(x).iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::AddConst(x), &[x]))
    }

    /// Adds the vector `b` to every row along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.val(b).to_vec();
        let mut data = self.val(x).to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(v, &bb)| *v += bb);
        }
        let out = Tensor::new(self.shape(x), data)?;
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(x, Op::LeakyRelu { x, slope }, |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n).map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let data = self.val(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    // -----------------------------------------------------------------------
    // Linear algebra and shape
    // -----------------------------------------------------------------------

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.val(a), self.val(b), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `[m, k] · [n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.shape(a))?;
        let (n, k2) = dims2("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.val(a), self.val(b), &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.shape(x))?;
        let src = self.val(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = dims2("concat_cols", self.shape(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2("slice_cols", self.shape(x))?;
        if start + len > cols {
            return Err(mismatch("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.val(x);
        let out: Vec<T> = (0..rows).flat_map(|r| src[r * cols + start..r * cols + start + len].iter().copied()).collect();
        Ok(self.push(Tensor::new(&[rows, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, cols) = dims2("concat_rows", self.shape(parts[0]))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.val(p));
        }
        Ok(self.push(Tensor::new(&[rows, cols], out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2("slice_rows", self.shape(x))?;
        if start + len > rows {
            return Err(mismatch("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.val(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::new(&[len, cols], out)?, Op::SliceRows { x, start }, &[x]))
    }

    // -----------------------------------------------------------------------
    // Convolutional stack
    // -----------------------------------------------------------------------

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[b, c, h, wd], &[o, c2, kh, kw]) = (xs, ws) else {
            return Err(mismatch("conv2d", xs, ws));
        };
        if c != c2 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", xs, ws));
        }
        Ok((b, o, ConvGeom { c, h, w: wd, kh, kw, stride, pad }))
    }

    /// `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, o, geom) = self.conv_geom(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let plane = ho * wo;
        let patch = geom.patch();
        let in_stride = geom.c * geom.h * geom.w;
        let mut cols = vec![T::zero(); patch * plane];
        let mut out = vec![T::zero(); batch * o * plane];
        let bias = b.map(|b| self.val(b).to_vec());
        for n in 0..batch {
            im2col(&geom, &self.val(x)[n * in_stride..(n + 1) * in_stride], &mut cols);
            let dst = &mut out[n * o * plane..(n + 1) * o * plane];
            if let Some(bias) = &bias {
                for (ch, &bv) in bias.iter().enumerate() {
                    dst[ch * plane..(ch + 1) * plane].fill(bv);
                }
            }
            gemm_nn(o, patch, plane, self.val(w), &cols, dst);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(&[batch, o, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(mismatch("max_pool2", self.shape(x), &[0, 0, 0, 0]));
        };
        let (ho, wo) = (h / 2, w / 2);
        let src = self.val(x);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Tensor::new(&[b, c, ho, wo], out)?, Op::MaxPool2 { x, argmax }, &[x]))
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(mismatch(op, s, self.shape(gamma)));
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(op, s, self.shape(gamma)));
        }
        Ok((b, c, inner))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T, batch_stats: bool) -> Result<Var> {
        let (b, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (src, g, bt) = (self.val(x), self.val(gamma), self.val(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, &[x, gamma, beta]))
    }

    /// Batch normalization over every axis but 1 using batch statistics. Returns the
    /// output plus the batch mean and unbiased variance for running-stat updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let count = b * inner;
        let src = self.val(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for n in 0..b {
                let off = (n * c + ch) * inner;
                s += src[off..off + inner].iter().copied().sum::<T>();
            }
            let m = s / T::of(count as f64);
            let mut ss = T::zero();
            for n in 0..b {
                let off = (n * c + ch) * inner;
                ss += src[off..off + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = ss / T::of(count as f64);
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, T::of(eps), true)?;
        let unbiased = if count > 1 { T::of(count as f64 / (count - 1) as f64) } else { T::one() };
        let var_u = var.iter().map(|&v| v * unbiased).collect();
        Ok((out, mean, var_u))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        self.bn_apply(x, gamma, beta, mean, var, T::of(eps), false)
    }

    /// Normalizes over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::of(eps);
        let (src, g, bt) = (self.val(x), self.val(gamma), self.val(beta));
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / dn;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / dn;
            let is = T::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Numerically stable softmax along `axis`. Entries equal to `-inf` get probability 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = Self::axis_layout(&shape, axis);
        let src = self.val(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[idx(k)] /= s;
                }
            }
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, &[x]))
    }

    /// Scaled dot-product attention, `softmax(Q Kᵀ / √d_head + mask) V`, evaluated
    /// independently per sequence and head. `mask` has shape `[seq_q, seq_k]` and is
    /// shared by all sequences; `-inf` entries receive zero weight and zero gradient.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeom, mask: Option<&Tensor<T>>) -> Result<Var> {
        let w = geom.width();
        if self.shape(q) != [geom.batch * geom.seq_q, w] {
            return Err(mismatch("attention q", self.shape(q), &[geom.batch * geom.seq_q, w]));
        }
        for kv in [k, v] {
            if self.shape(kv) != [geom.batch * geom.seq_k, w] {
                return Err(mismatch("attention kv", self.shape(kv), &[geom.batch * geom.seq_k, w]));
            }
        }
        if let Some(m) = mask {
            if m.shape() != [geom.seq_q, geom.seq_k] {
                return Err(mismatch("attention mask", m.shape(), &[geom.seq_q, geom.seq_k]));
            }
        }
        let (sq, sk, dh) = (geom.seq_q, geom.seq_k, geom.d_head);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = vec![T::zero(); geom.batch * sq * w];
        let mut probs = vec![T::zero(); geom.batch * geom.heads * sq * sk];
        for b in 0..geom.batch {
            for h in 0..geom.heads {
                let qh = geom.gather(self.val(q), b, sq, h);
                let kh = geom.gather(self.val(k), b, sk, h);
                let vh = geom.gather(self.val(v), b, sk, h);
                let p = &mut probs[(b * geom.heads + h) * sq * sk..(b * geom.heads + h + 1) * sq * sk];
                gemm_nt(sq, dh, sk, &qh, &kh, p);
                for i in 0..sq {
                    let row = &mut p[i * sk..(i + 1) * sk];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s *= scale;
                        if let Some(m) = mask {
                            *s += m.data()[i * sk + j];
                        }
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                let mut oh = vec![T::zero(); sq * dh];
                gemm_nn(sq, sk, dh, p, &vh, &mut oh);
                geom.scatter_add(&mut out, &oh, b, sq, h);
            }
        }
        let t = Tensor::new(&[geom.batch * sq, w], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    // -----------------------------------------------------------------------
    // Reductions and losses
    // -----------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.val(x).len() as f64);
        let s = self.val(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy; predictions are clamped to `[ε, 1-ε]`.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Result<Var> {
        if self.val(p).len() != target.len() {
            return Err(mismatch("bce", self.shape(p), &[target.len()]));
        }
        let eps = T::of(BCE_EPS);
        let hi = T::one() - eps;
        let n = T::of(target.len() as f64);
        let total: T = self
            .val(p)
            .iter()
            .zip(target)
            .map(|(&pv, &t)| {
                let pc = pv.max(eps).min(hi);
                -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { p, target: target.to_vec() }, &[p]))
    }

    /// Mean absolute error.
    pub fn l1(&mut self, p: Var, target: &[T]) -> Result<Var> {
        if self.val(p).len() != target.len() {
            return Err(mismatch("l1", self.shape(p), &[target.len()]));
        }
        let n = T::of(target.len() as f64);
        let total: T = self.val(p).iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(self.push(Tensor::scalar(total / n), Op::L1 { p, target: target.to_vec() }, &[p]))
    }

    // -----------------------------------------------------------------------
    // Reverse pass
    // -----------------------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                self.backprop(i);
            }
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize) {
        let Some(g) = self.nodes[i].grad.take() else { return };
        let updates = self.local_grads(i, &g);
        self.nodes[i].grad = Some(g);
        for (v, d) in updates {
            accumulate(&mut self.nodes[v.0].grad, d);
        }
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut up: Vec<(Var, Vec<T>)> = Vec::new();
        let mut push = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.need(v) {
                up.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(*a, &|| g.to_vec());
                push(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                push(*a, &|| g.to_vec());
                push(*b, &|| g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                push(*a, &|| g.iter().zip(self.val(*b)).map(|(&gv, &bv)| gv * bv).collect());
                push(*b, &|| g.iter().zip(self.val(*a)).map(|(&gv, &av)| gv * av).collect());
            }
            Op::AddBias(x, b) => {
                push(*x, &|| g.to_vec());
                push(*b, &|| {
                    let n = self.val(*b).len();
                    let mut acc = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                    }
                    acc
                });
            }
            Op::Scale(x, c) => push(*x, &|| g.iter().map(|&v| v * *c).collect()),
            Op::AddConst(x) | Op::Reshape(x) => push(*x, &|| g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                push(*a, &|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, self.val(*b), &mut d);
                    d
                });
                push(*b, &|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, self.val(*a), g, &mut d);
                    d
                });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                push(*a, &|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nn(m, n, k, g, self.val(*b), &mut d);
                    d
                });
                push(*b, &|| {
                    let mut d = vec![T::zero(); n * k];
                    gemm_tn(n, m, k, g, self.val(*a), &mut d);
                    d
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                push(*x, &|| {
                    let mut d = vec![T::zero(); r * c];
                    for a in 0..c {
                        for b in 0..r {
                            d[b * c + a] = g[a * r + b];
                        }
                    }
                    d
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (batch, o, geom) = self.conv_geom(*x, *w, *stride, *pad).expect("validated in forward");
                let plane = geom.out_h() * geom.out_w();
                let patch = geom.patch();
                let in_stride = geom.c * geom.h * geom.w;
                let (need_x, need_w) = (self.need(*x), self.need(*w));
                let mut dx = if need_x { vec![T::zero(); batch * in_stride] } else { Vec::new() };
                let mut dw = if need_w { vec![T::zero(); o * patch] } else { Vec::new() };
                let mut cols = vec![T::zero(); patch * plane];
                let mut dcols = vec![T::zero(); if need_x { patch * plane } else { 0 }];
                for n in 0..batch {
                    let gn = &g[n * o * plane..(n + 1) * o * plane];
                    if need_w {
                        im2col(&geom, &self.val(*x)[n * in_stride..(n + 1) * in_stride], &mut cols);
                        gemm_nt(o, plane, patch, gn, &cols, &mut dw);
                    }
                    if need_x {
                        dcols.fill(T::zero());
                        gemm_tn(patch, o, plane, self.val(*w), gn, &mut dcols);
                        col2im(&geom, &dcols, &mut dx[n * in_stride..(n + 1) * in_stride]);
                    }
                }
                if need_x {
                    up.push((*x, dx));
                }
                if need_w {
                    up.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.need(*b) {
                        let mut db = vec![T::zero(); o];
                        for n in 0..batch {
                            for ch in 0..o {
                                let off = (n * o + ch) * plane;
                                db[ch] += g[off..off + plane].iter().copied().sum::<T>();
                            }
                        }
                        up.push((*b, db));
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => push(*x, &|| {
                let mut d = vec![T::zero(); self.val(*x).len()];
                for (&j, &gv) in argmax.iter().zip(g) {
                    d[j] += gv;
                }
                d
            }),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let count = T::of((b * inner) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * inner;
                        for k in off..off + inner {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                let gam = self.val(*gamma);
                push(*x, &|| {
                    let mut d = vec![T::zero(); g.len()];
                    for n in 0..b {
                        for ch in 0..c {
                            let off = (n * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + inner {
                                d[k] = if *batch_stats {
                                    scale / count * (count * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch])
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    d
                });
                push(*gamma, &|| sum_gx.clone());
                push(*beta, &|| sum_g.clone());
            }
            Op::Dropout { x, mask } => push(*x, &|| g.iter().zip(mask).map(|(&a, &m)| a * m).collect()),
            Op::LeakyRelu { x, slope } => push(*x, &|| {
                g.iter().zip(self.val(*x)).map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *slope }).collect()
            }),
            Op::Sigmoid(x) => push(*x, &|| {
                g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y * (T::one() - y)).collect()
            }),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.val(*gamma).len();
                let gam = self.val(*gamma);
                let dn = T::of(d as f64);
                push(*x, &|| {
                    let mut out = vec![T::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let rx = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<T> = rg.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(rx).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            out[r * d + j] = is / dn * (dn * dxh[j] - s1 - rx[j] * s2);
                        }
                    }
                    out
                });
                push(*gamma, &|| {
                    let mut acc = vec![T::zero(); d];
                    for (rg, rx) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += rg[j] * rx[j];
                        }
                    }
                    acc
                });
                push(*beta, &|| {
                    let mut acc = vec![T::zero(); d];
                    for rg in g.chunks(d) {
                        acc.iter_mut().zip(rg).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
            }
            Op::Softmax { x, axis } => push(*x, &|| {
                let (outer, len, inner) = Self::axis_layout(self.shape(*x), *axis);
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let s: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            d[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
                d
            }),
            Op::Attention { q, k, v, geom, probs } => {
                let (sq, sk, dh) = (geom.seq_q, geom.seq_k, geom.d_head);
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (nq, nk) = (self.val(*q).len(), self.val(*k).len());
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); nq], vec![T::zero(); nk], vec![T::zero(); nk]);
                for b in 0..geom.batch {
                    for h in 0..geom.heads {
                        let p = &probs[(b * geom.heads + h) * sq * sk..(b * geom.heads + h + 1) * sq * sk];
                        let go = geom.gather(g, b, sq, h);
                        let vh = geom.gather(self.val(*v), b, sk, h);
                        let mut dvh = vec![T::zero(); sk * dh];
                        gemm_tn(sk, sq, dh, p, &go, &mut dvh);
                        geom.scatter_add(&mut dv, &dvh, b, sk, h);
                        let mut dp = vec![T::zero(); sq * sk];
                        gemm_nt(sq, dh, sk, &go, &vh, &mut dp);
                        for i in 0..sq {
                            let (pr, dr) = (&p[i * sk..(i + 1) * sk], &mut dp[i * sk..(i + 1) * sk]);
                            let s: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in dr.iter_mut().zip(pr) {
                                *d = pv * (*d - s) * scale;
                            }
                        }
                        let qh = geom.gather(self.val(*q), b, sq, h);
                        let kh = geom.gather(self.val(*k), b, sk, h);
                        let mut dqh = vec![T::zero(); sq * dh];
                        gemm_nn(sq, sk, dh, &dp, &kh, &mut dqh);
                        geom.scatter_add(&mut dq, &dqh, b, sq, h);
                        let mut dkh = vec![T::zero(); sk * dh];
                        gemm_tn(sk, sq, dh, &dp, &qh, &mut dkh);
                        geom.scatter_add(&mut dk, &dkh, b, sk, h);
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.need(var) {
                        up.push((var, d));
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let off = offset;
                    push(p, &|| (0..rows).flat_map(|r| g[r * total + off..r * total + off + w].iter().copied()).collect());
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => push(*x, &|| {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                d
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    let off = offset;
                    push(p, &|| g[off..off + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => push(*x, &|| {
                let cols = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.val(*x).len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                d
            }),
            Op::Sum(x) => push(*x, &|| vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => push(*x, &|| {
                let n = self.val(*x).len();
                vec![g[0] / T::of(n as f64); n]
            }),
            Op::Bce { p, target } => push(*p, &|| {
                let eps = T::of(BCE_EPS);
                let hi = T::one() - eps;
                let n = T::of(target.len() as f64);
                self.val(*p)
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| if pv > eps && pv < hi { g[0] * (pv - t) / (pv * (T::one() - pv)) / n } else { T::zero() })
                    .collect()
            }),
            Op::L1 { p, target } => push(*p, &|| {
                let n = T::of(target.len() as f64);
                self.val(*p)
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let s = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[0] * s / n
                    })
                    .collect()
            }),
        }
        up
    }

    // -----------------------------------------------------------------------
    // Parameter plumbing
    // -----------------------------------------------------------------------

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for n in &self.nodes {
            if let (Some(id), Some(g)) = (n.param, &n.grad) {
                let p = store.get_mut(id);
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    /// Queues a buffer overwrite (running statistics) to be applied after the step.
    pub fn defer_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore<T>) {
        for (id, v) in self.buffer_updates.drain(..) {
            store.get_mut(id).value = v;
        }
    }
}
