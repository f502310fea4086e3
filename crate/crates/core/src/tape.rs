//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive operation together with handles to its
//! inputs. [`Tape::backward`] replays the record in reverse order and returns
//! the gradient of a scalar loss with respect to every node that requires
//! one. The tape is single-threaded and replay is deterministic: the same
//! program over the same inputs yields bit-identical gradients.
//!
//! Broadcasting is limited to leading dimensions: the right operand of
//! [`Tape::add`], [`Tape::sub`], [`Tape::mul`] and [`Tape::matmul`] may omit
//! leading (batch) axes of the left operand.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64 },
    Relu(Var),
    /// Keeps the inner tanh for the backward pass.
    Gelu { a: Var, inner: Vec<f64> },
    Tanh(Var),
    Sigmoid(Var),
    Softmax { a: Var, axis: usize },
    MaskedSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    SliceLast { a: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    GatherRows { a: Var, index: Vec<usize> },
    InterleaveRows { a: Var, b: Var },
    SumAxis { a: Var, axis: usize, scale: f64 },
    SumAll(Var),
    Reshape(Var),
    PairCrossEntropy { l0: Var, l1: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_last2(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let n = shape.len();
    if n < 2 {
        return None;
    }
    let batch = shape[..n - 2].iter().product();
    Some((batch, shape[n - 2], shape[n - 1]))
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// 4×8 register tiles; leftover rows and columns take the plain loop.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i in (0..full_rows).step_by(MR) {
        for j in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for q in 0..NR {
                        row[q] += av * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cv = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    cv[q] += row[q];
                }
            }
        }
        if full_cols < n {
            for r in i..i + MR {
                gemm_row(&a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n], n, full_cols);
            }
        }
    }
    for r in full_rows..m {
        gemm_row(&a[r * k..(r + 1) * k], b, &mut c[r * n..(r + 1) * n], n, 0);
    }
}

/// One output row, columns `from..n`.
fn gemm_row(arow: &[f64], b: &[f64], crow: &mut [f64], n: usize, from: usize) {
    for (p, &av) in arow.iter().enumerate() {
        let brow = &b[p * n + from..(p + 1) * n];
        for (cv, &bv) in crow[from..].iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `c[m×q] += a[m×p] · b[q×p]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    let mut bt = vec![0.0; p * q];
    for r in 0..q {
        for s in 0..p {
            bt[s * q + r] = b[r * p + s];
        }
    }
    gemm_nn(a, &bt, c, m, p, q);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let full_rows = k - k % MR;
    let full_cols = n - n % NR;
    for p in (0..full_rows).step_by(MR) {
        for j in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for i in 0..m {
                let bv: &[f64; NR] = b[i * n + j..i * n + j + NR].try_into().unwrap();
                let av: &[f64; MR] = a[i * k + p..i * k + p + MR].try_into().unwrap();
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cv = &mut c[(p + r) * n + j..(p + r) * n + j + NR];
                for q in 0..NR {
                    cv[q] += row[q];
                }
            }
        }
    }
    // Leftover output rows (p ≥ full_rows) and columns (j ≥ full_cols).
    if full_rows < k || full_cols < n {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let from = if p < full_rows { full_cols } else { 0 };
                let crow = &mut c[p * n + from..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(&brow[from..]) {
                    *cv += av * bv;
                }
            }
        }
    }
}


const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through one `exp`; saturates cleanly at both ends.
fn tanh_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_inner(x: f64) -> f64 {
    tanh_exp(GELU_C * (x + 0.044_715 * x * x * x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of a contiguous slice, in place.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it requires grad iff the tensor does.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that never requires grad.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone().with_requires_grad(true), Op::Leaf, true)
    }

    /// Matrix product over the last two axes. `b` is either 2-D (shared across
    /// the batch) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (ba, m, k) = split_last2(&sa).ok_or_else(mismatch)?;
        let (bb, k2, n) = split_last2(&sb).ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; ba * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        if sb.len() == 2 {
            gemm_nn(ad, bd, &mut out, ba * m, k, n);
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] || ba != bb {
                return Err(mismatch());
            }
            for i in 0..ba {
                gemm_nn(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, m, n) = split_last2(&s)
            .ok_or_else(|| Error::Shape(format!("transpose needs ≥2 dims, got {s:?}")))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            let off = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(a), rg))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sa, sb) {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(ad.len());
        if !bd.is_empty() {
            for chunk in ad.chunks_exact(bd.len()) {
                out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(sa.to_vec(), out)
    }

    /// Elementwise `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise `a * b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| scale * x + shift).collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Affine { a, scale },
            rg,
        )
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let inner: Vec<f64> = src.data().iter().map(|&x| gelu_inner(x)).collect();
        let data = src.data().iter().zip(&inner).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Gelu { a, inner }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = self.value(a).data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Row-wise softmax over the last axis of a `[.., T, T]` score tensor where
    /// only entries with `allowed(i, j)` participate; the rest are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, allowed: impl Fn(usize, usize) -> bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, t, t2) = split_last2(&s)
            .filter(|&(_, t, t2)| t == t2)
            .ok_or_else(|| Error::Shape(format!("masked softmax needs [.., T, T], got {s:?}")))?;
        let mask: Vec<bool> = (0..t * t2).map(|ij| allowed(ij / t2, ij % t2)).collect();
        if (0..t).any(|i| !mask[i * t2..(i + 1) * t2].iter().any(|&m| m)) {
            return Err(Error::Shape("attention mask has an empty row".into()));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..batch {
            for i in 0..t {
                let off = bi * t * t2 + i * t2;
                let row = &src[off..off + t2];
                let m = &mask[i * t2..(i + 1) * t2];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &ok)| ok)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..t2 {
                    if m[j] {
                        let e = (row[j] - max).exp();
                        out[off + j] = e;
                        total += e;
                    }
                }
                for v in &mut out[off..off + t2] {
                    *v /= total;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::MaskedSoftmax { a }, rg))
    }

    /// Layer normalization over the last axis followed by `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if d < 2 {
            return Err(Error::Shape(format!("layer_norm needs last axis ≥ 2, got {s:?}")));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
            rg,
        ))
    }

    /// `a[.., start..start + len]` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| Error::Shape("slice of scalar".into()))?;
        if start + len > d {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of range for {s:?}",
                start + len
            )));
        }
        let src = self.value(a).data();
        let rows = src.len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { a, start }, rg))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows along the second-to-last axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, t, d) =
            split_last2(&s).ok_or_else(|| Error::Shape(format!("gather_rows on {s:?}")))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= t) {
            return Err(Error::Shape(format!("row {bad} out of range for {s:?}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(batch * index.len() * d);
        for bi in 0..batch {
            for &i in index {
                let off = (bi * t + i) * d;
                out.extend_from_slice(&src[off..off + d]);
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape[l - 2] = index.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Interleaves rows of two `[.., T, d]` tensors into `[.., 2T, d]`:
    /// `a_0, b_0, a_1, b_1, ...`.
    pub fn interleave_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Dimension {
                op: "interleave_rows",
                lhs: sa,
                rhs: sb.to_vec(),
            });
        }
        let (batch, t, d) =
            split_last2(&sa).ok_or_else(|| Error::Shape(format!("interleave on {sa:?}")))?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(2 * ad.len());
        for bi in 0..batch {
            for i in 0..t {
                let off = (bi * t + i) * d;
                out.extend_from_slice(&ad[off..off + d]);
                out.extend_from_slice(&bd[off..off + d]);
            }
        }
        let mut shape = sa;
        let l = shape.len();
        shape[l - 2] = 2 * t;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::InterleaveRows { a, b }, rg))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, scale: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { a, axis, scale }, rg))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, 1.0)
    }

    /// Averages out `axis`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("axis {axis} out of range")))?;
        self.reduce_axis(a, axis, 1.0 / len as f64)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let shape = self.shape(a).to_vec();
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Mean pairwise cross-entropy over `N` queries. `l0` and `l1` are the
    /// `[N]` logits of the first and second segment and `labels[i]` is the
    /// probability mass on the second segment being preferred.
    pub fn pair_cross_entropy(&mut self, l0: Var, l1: Var, labels: &[f64]) -> Result<Var> {
        let s0 = self.shape(l0).to_vec();
        let s1 = self.shape(l1);
        if s0.len() != 1 || s0 != s1 || s0[0] != labels.len() {
            return Err(Error::Dimension {
                op: "pair_cross_entropy",
                lhs: s0,
                rhs: s1.to_vec(),
            });
        }
        for &y in labels {
            check_label(y)?;
        }
        let a = self.value(l0).data();
        let b = self.value(l1).data();
        let n = labels.len();
        let total: f64 = (0..n)
            .map(|i| pair_cross_entropy_value(a[i], b[i], labels[i]))
            .sum();
        let rg = self.rg(&[l0, l1]);
        Ok(self.push(
            Tensor::scalar(total / n.max(1) as f64),
            Op::PairCrossEntropy {
                l0,
                l1,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (ba, m, k) = split_last2(sa).unwrap();
                let n = *sb.last().unwrap();
                let b_shared = sb.len() == 2;
                if wants(*a) {
                    let bd = val(*b);
                    let ga = accumulate(grads, *a, ba * m * k);
                    if b_shared {
                        gemm_nt(g, bd, ga, ba * m, n, k);
                    } else {
                        for i in 0..ba {
                            gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if wants(*b) {
                    let ad = val(*a);
                    let len = numel(*b);
                    let gb = accumulate(grads, *b, len);
                    if b_shared {
                        gemm_tn(ad, g, gb, ba * m, k, n);
                    } else {
                        for i in 0..ba {
                            gemm_tn(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (batch, m, n) = split_last2(self.shape(*a)).unwrap();
                    let ga = accumulate(grads, *a, batch * m * n);
                    for bi in 0..batch {
                        let off = bi * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga[off + i * n + j] += g[off + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if wants(*b) {
                    let len = numel(*b);
                    let gb = accumulate(grads, *b, len);
                    for chunk in g.chunks_exact(len) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x += sign * y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = val(*a);
                let bd = val(*b);
                let blen = bd.len();
                if wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for (gac, gc) in ga.chunks_exact_mut(blen).zip(g.chunks_exact(blen)) {
                        for ((x, &y), &w) in gac.iter_mut().zip(gc).zip(bd) {
                            *x += y * w;
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(grads, *b, blen);
                    for (gc, ac) in g.chunks_exact(blen).zip(ad.chunks_exact(blen)) {
                        for ((x, &y), &v) in gb.iter_mut().zip(gc).zip(ac) {
                            *x += y * v;
                        }
                    }
                }
            }
            Op::Affine { a, scale } => {
                if wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += scale * y;
                    }
                }
            }
            Op::Gelu { a, inner } => {
                if wants(*a) {
                    let x = val(*a);
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(x[i], inner[i]);
                    }
                }
            }
            Op::Relu(a) | Op::Tanh(a) | Op::Sigmoid(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let out = node.value.data();
                    let ga = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        let d = match node.op {
                            Op::Relu(_) => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Op::Tanh(_) => 1.0 - out[i] * out[i],
                            _ => out[i] * (1.0 - out[i]),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if wants(*a) {
                    let s = node.value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let len = s[*axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let y = node.value.data();
                    let ga = accumulate(grads, *a, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 =
                                (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                if wants(*a) {
                    let t = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let ga = accumulate(grads, *a, g.len());
                    for (yr, (gr, gar)) in y
                        .chunks_exact(t)
                        .zip(g.chunks_exact(t).zip(ga.chunks_exact_mut(t)))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..t {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let xd = val(*x);
                let gd = val(*gain);
                let rows = xd.len() / d;
                let mut xhat = vec![0.0; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * rstd[r];
                    }
                }
                if wants(*gain) {
                    let gg = accumulate(grads, *gain, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = accumulate(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = accumulate(grads, *x, xd.len());
                    let nd = d as f64;
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gd[j];
                            gx[r * d + j] += rstd[r] / nd
                                * (nd * dxh - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::SliceLast { a, start } => {
                if wants(*a) {
                    let d = *self.shape(*a).last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let total = numel(*a);
                    let ga = accumulate(grads, *a, total);
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        for (j, &y) in gr.iter().enumerate() {
                            ga[r * d + start + j] += y;
                        }
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if wants(p) {
                        let len = numel(p);
                        let gp = accumulate(grads, p, len);
                        for (r, gr) in g.chunks_exact(total).enumerate() {
                            for j in 0..w {
                                gp[r * w + j] += gr[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, index } => {
                if wants(*a) {
                    let (batch, t, d) = split_last2(self.shape(*a)).unwrap();
                    let ga = accumulate(grads, *a, batch * t * d);
                    let k = index.len();
                    for bi in 0..batch {
                        for (r, &i) in index.iter().enumerate() {
                            let src = (bi * k + r) * d;
                            let dst = (bi * t + i) * d;
                            for j in 0..d {
                                ga[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::InterleaveRows { a, b } => {
                let (batch, t, d) = split_last2(self.shape(*a)).unwrap();
                for (which, v) in [(0usize, *a), (1, *b)] {
                    if !wants(v) {
                        continue;
                    }
                    let gv = accumulate(grads, v, batch * t * d);
                    for bi in 0..batch {
                        for i in 0..t {
                            let src = ((bi * t + i) * 2 + which) * d;
                            let dst = (bi * t + i) * d;
                            for j in 0..d {
                                gv[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::SumAxis { a, axis, scale } => {
                if wants(*a) {
                    let s = self.shape(*a);
                    let outer: usize = s[..*axis].iter().product();
                    let len = s[*axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let ga = accumulate(grads, *a, outer * len * inner);
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                ga[base + i] += scale * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let len = numel(*a);
                    let ga = accumulate(grads, *a, len);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::PairCrossEntropy { l0, l1, labels } => {
                let a = val(*l0);
                let b = val(*l1);
                let n = labels.len() as f64;
                let d1: Vec<f64> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (pair_probability(a[i], b[i]) - y) / n * g[0])
                    .collect();
                if wants(*l1) {
                    let gb = accumulate(grads, *l1, d1.len());
                    for (x, &y) in gb.iter_mut().zip(&d1) {
                        *x += y;
                    }
                }
                if wants(*l0) {
                    let ga = accumulate(grads, *l0, d1.len());
                    for (x, &y) in ga.iter_mut().zip(&d1) {
                        *x -= y;
                    }
                }
            }
        }
    }
}

pub(crate) fn check_label(y: f64) -> Result<()> {
    if y == 0.0 || y == 0.5 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::Label(y))
    }
}

/// `P[second ≻ first]` for logits `(l0, l1)`: the two-way softmax.
/// Swapping the logits gives exactly `1 - p`.
pub fn pair_probability(l0: f64, l1: f64) -> f64 {
    let d = l1 - l0;
    if d >= 0.0 {
        sigmoid(d)
    } else {
        1.0 - sigmoid(-d)
    }
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn pair_cross_entropy_value(l0: f64, l1: f64, y: f64) -> f64 {
    let lse = log_sum_exp2(l0, l1);
    -(1.0 - y) * (l0 - lse) - y * (l1 - lse)
}

/// Cross-entropy between the two-way softmax of `(logit0, logit1)` and a
/// preference label `y` (`1` means the second segment is preferred).
pub fn cross_entropy_pair(logit0: f64, logit1: f64, y: f64) -> Result<f64> {
    check_label(y)?;
    Ok(pair_cross_entropy_value(logit0, logit1, y))
}

/// Plain softmax of a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    if !out.is_empty() {
        softmax_in_place(&mut out);
    }
    out
}
