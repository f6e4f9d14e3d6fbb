//! Dense row-major tensors and the deterministic kernels everything else
//! is built from.
//!
//! Every kernel uses a fixed, left-to-right reduction order. Sums that
//! collapse many elements (`sum_to`, `sum_all`, `dot`, `logsumexp_rows`)
//! accumulate in `f64` regardless of the element type. Identical inputs
//! always give bit-identical outputs, which the trajectory replay in the
//! distillation engine relies on.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Floating point element type of a [`Tensor`].
///
/// `f32` is the working precision; `f64` exists for oracles and
/// finite-difference checks.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const BYTES: usize;
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Bit pattern widened to 64 bits, for checksums.
    fn bits(self) -> u64;
}

impl Element for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Element for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
    #[error("numeric fault in {op}: non-finite output")]
    NumericFault { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn contract<T>(op: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract {
        op,
        reason: reason.into(),
    })
}

fn mismatch<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F: Element = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", F::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return contract("new", format!("zero-sized dimension in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return contract(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * F::BYTES
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return contract("item", format!("tensor of shape {:?} is not a scalar", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        let chunks = self.data.chunks_exact(32);
        let tail = chunks.remainder().iter().all(|v| v.is_finite());
        tail && chunks.into_iter().all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
    }

    pub fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NumericFault { op })
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| {
            let v = v.as_f64();
            v * v
        }).sum()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return mismatch("reshape", &self.shape, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        let rows = self.shape[0];
        if count == 0 || start + count > rows {
            return contract("slice_rows", format!("rows {start}..{} of {rows}", start + count));
        }
        let stride = self.numel() / rows;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        })
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return mismatch(op, &self.shape, &other.shape);
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: F, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return mismatch("axpy", &self.shape, &other.shape);
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + c * b;
        }
        Ok(())
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    /// `(x + offset)^power`, elementwise.
    pub fn pow_offset(&self, offset: F, power: F) -> Self {
        self.map(|v| (v + offset).powf(power))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > F::zero() { v } else { F::zero() })
    }

    /// 1 where `x > 0`, else 0.
    pub fn relu_mask(&self) -> Self {
        self.map(|v| if v > F::zero() { F::one() } else { F::zero() })
    }

    pub fn sum_all(&self) -> F {
        F::of(self.data.iter().map(|v| v.as_f64()).sum())
    }

    pub fn mean(&self) -> F {
        F::of(self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.numel() as f64)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return mismatch("matmul", &self.shape, &rhs.shape);
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![F::zero(); m * n];
        gemm_acc(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return contract("transpose", format!("expected rank 2, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Sums over every axis where `target` has extent 1 and `self` does not.
    /// Ranks must agree.
    pub fn sum_to(&self, target: &[usize]) -> Result<Self> {
        check_broadcastable("sum_to", target, &self.shape)?;
        let mut acc = vec![0.0f64; target.iter().product()];
        let runs = BroadcastRuns::new(target, &self.shape);
        for (block, off) in self.data.chunks(runs.len).zip(runs.offsets()) {
            if runs.repeat {
                acc[off] += block.iter().map(|v| v.as_f64()).sum::<f64>();
            } else {
                for (a, v) in acc[off..off + runs.len].iter_mut().zip(block) {
                    *a += v.as_f64();
                }
            }
        }
        Ok(Self {
            shape: target.to_vec(),
            data: acc.into_iter().map(F::of).collect(),
        })
    }

    /// Repeats along every axis where `self` has extent 1. Ranks must agree.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        check_broadcastable("broadcast_to", &self.shape, target)?;
        let runs = BroadcastRuns::new(&self.shape, target);
        let numel: usize = target.iter().product();
        let mut out = Vec::with_capacity(numel);
        for off in runs.offsets() {
            if runs.repeat {
                out.extend(std::iter::repeat_n(self.data[off], runs.len));
            } else {
                out.extend_from_slice(&self.data[off..off + runs.len]);
            }
        }
        Ok(Self {
            shape: target.to_vec(),
            data: out,
        })
    }

    /// Row-wise `log Σ exp`, `[n, k] -> [n]`, max-shifted for stability.
    pub fn logsumexp_rows(&self) -> Result<Self> {
        if self.rank() != 2 {
            return contract("logsumexp_rows", format!("expected rank 2, got {:?}", self.shape));
        }
        let k = self.shape[1];
        let data = self
            .data
            .chunks(k)
            .map(|row| {
                let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let s: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
                F::of(m + s.ln())
            })
            .collect();
        Ok(Self {
            shape: vec![self.shape[0]],
            data,
        })
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let lse = self.logsumexp_rows()?;
        let k = self.shape[1];
        let mut out = self.data.clone();
        for (row, &l) in out.chunks_mut(k).zip(&lse.data) {
            for v in row {
                *v = (*v - l).exp();
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Index of the largest entry in each row (first on ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return contract("argmax_rows", format!("expected rank 2, got {:?}", self.shape));
        }
        let k = self.shape[1];
        Ok(self
            .data
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Stride-1 "same" cross-correlation. `x: [n, cin, h, w]`,
    /// `w: [cout, cin, k, k]` with odd `k`.
    pub fn conv2d(&self, weight: &Self) -> Result<Self> {
        let (n, cin, h, w) = dims4("conv2d", self)?;
        let (cout, wcin, k, k2) = dims4("conv2d", weight)?;
        if wcin != cin || k != k2 || k % 2 == 0 {
            return mismatch("conv2d", &self.shape, &weight.shape);
        }
        let (plane, rows) = (h * w, cin * k * k);
        let mut out = vec![F::zero(); n * cout * plane];
        let mut cols = vec![F::zero(); rows * plane];
        for b in 0..n {
            im2col(&self.data[b * cin * plane..(b + 1) * cin * plane], cin, h, w, k, &mut cols);
            gemm_acc(&weight.data, &cols, &mut out[b * cout * plane..(b + 1) * cout * plane], cout, rows, plane);
        }
        Ok(Self {
            shape: vec![n, cout, h, w],
            data: out,
        })
    }

    /// Adjoint of [`Tensor::conv2d`] in its input: `self` is the output
    /// cotangent `[n, cout, h, w]`, result has the input's shape.
    pub fn conv2d_input_grad(&self, weight: &Self) -> Result<Self> {
        let (n, cout, h, w) = dims4("conv2d_input_grad", self)?;
        let (wcout, cin, k, k2) = dims4("conv2d_input_grad", weight)?;
        if wcout != cout || k != k2 || k % 2 == 0 {
            return mismatch("conv2d_input_grad", &self.shape, &weight.shape);
        }
        let (plane, rows) = (h * w, cin * k * k);
        let wt = weight.reshape(&[cout, rows])?.transpose2d()?;
        let mut out = vec![F::zero(); n * cin * plane];
        let mut cols = vec![F::zero(); rows * plane];
        for b in 0..n {
            cols.fill(F::zero());
            gemm_acc(&wt.data, &self.data[b * cout * plane..(b + 1) * cout * plane], &mut cols, rows, cout, plane);
            col2im(&cols, cin, h, w, k, &mut out[b * cin * plane..(b + 1) * cin * plane]);
        }
        Ok(Self {
            shape: vec![n, cin, h, w],
            data: out,
        })
    }

    /// Adjoint of [`Tensor::conv2d`] in its weight: `self` is the input
    /// `[n, cin, h, w]`, `grad` the output cotangent `[n, cout, h, w]`.
    pub fn conv2d_weight_grad(&self, grad: &Self, k: usize) -> Result<Self> {
        let (n, cin, h, w) = dims4("conv2d_weight_grad", self)?;
        let (gn, cout, gh, gw) = dims4("conv2d_weight_grad", grad)?;
        if gn != n || gh != h || gw != w || k % 2 == 0 {
            return mismatch("conv2d_weight_grad", &self.shape, &grad.shape);
        }
        let (plane, rows) = (h * w, cin * k * k);
        let mut acc = vec![0.0f64; cout * rows];
        let mut cols = vec![F::zero(); rows * plane];
        let mut cols_t = vec![F::zero(); plane * rows];
        let mut part = vec![F::zero(); cout * rows];
        for b in 0..n {
            im2col(&self.data[b * cin * plane..(b + 1) * cin * plane], cin, h, w, k, &mut cols);
            for r in 0..rows {
                for j in 0..plane {
                    cols_t[j * rows + r] = cols[r * plane + j];
                }
            }
            part.fill(F::zero());
            gemm_acc(&grad.data[b * cout * plane..(b + 1) * cout * plane], &cols_t, &mut part, cout, plane, rows);
            for (a, p) in acc.iter_mut().zip(&part) {
                *a += p.as_f64();
            }
        }
        Ok(Self {
            shape: vec![cout, cin, k, k],
            data: acc.into_iter().map(F::of).collect(),
        })
    }

    /// 2x2 average pooling with stride 2; trailing odd rows/columns dropped.
    pub fn avgpool2(&self) -> Result<Self> {
        let (n, c, h, w) = dims4("avgpool2", self)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return contract("avgpool2", format!("spatial size {h}x{w} too small"));
        }
        let quarter = F::of(0.25);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let s = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    out.push(s * quarter);
                }
            }
        }
        Ok(Self {
            shape: vec![n, c, oh, ow],
            data: out,
        })
    }

    /// Adjoint of [`Tensor::avgpool2`]: spreads each value over its 2x2
    /// window scaled by 1/4, zero in dropped rows/columns.
    pub fn unpool2(&self, h: usize, w: usize) -> Result<Self> {
        let (n, c, oh, ow) = dims4("unpool2", self)?;
        if h / 2 != oh || w / 2 != ow {
            return contract("unpool2", format!("{oh}x{ow} does not pool from {h}x{w}"));
        }
        let quarter = F::of(0.25);
        let mut out = vec![F::zero(); n * c * h * w];
        for p in 0..n * c {
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let v = self.data[(p * oh + y) * ow + x] * quarter;
                    dst[2 * y * w + 2 * x] = v;
                    dst[2 * y * w + 2 * x + 1] = v;
                    dst[(2 * y + 1) * w + 2 * x] = v;
                    dst[(2 * y + 1) * w + 2 * x + 1] = v;
                }
            }
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data: out,
        })
    }

    /// `out[.., y, x] = self[.., y - dy, x - dx]`, zero where out of range.
    pub fn shift2d(&self, dy: isize, dx: isize) -> Result<Self> {
        let (n, c, h, w) = dims4("shift2d", self)?;
        let plane = h * w;
        let mut out = vec![F::zero(); n * c * plane];
        for p in 0..n * c {
            accumulate_shifted(
                &mut out[p * plane..(p + 1) * plane],
                &self.data[p * plane..(p + 1) * plane],
                h,
                w,
                -dy,
                -dx,
                F::one(),
            );
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Mirror along the width axis.
    pub fn flip_w(&self) -> Result<Self> {
        let (_, _, _, w) = dims4("flip_w", self)?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Selects rows of the leading axis.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let rows = self.shape[0];
        if index.is_empty() {
            return contract("gather_rows", "empty index");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return contract("gather_rows", format!("index {bad} out of {rows} rows"));
        }
        let stride = self.numel() / rows;
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in index {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Ok(Self { shape, data })
    }

    /// Adjoint of [`Tensor::gather_rows`]: row `r` of `self` is added into
    /// row `index[r]` of an `rows`-row zero tensor, in order of `r`.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Self> {
        if index.len() != self.shape[0] {
            return contract(
                "scatter_add_rows",
                format!("{} indices for {} rows", index.len(), self.shape[0]),
            );
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return contract("scatter_add_rows", format!("index {bad} out of {rows} rows"));
        }
        let stride = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = rows;
        let mut data = vec![F::zero(); rows * stride];
        for (r, &i) in index.iter().enumerate() {
            for (d, &s) in data[i * stride..(i + 1) * stride]
                .iter_mut()
                .zip(&self.data[r * stride..(r + 1) * stride])
            {
                *d = *d + s;
            }
        }
        Ok(Self { shape, data })
    }

    /// Per-channel standardisation over the spatial axes of `[n, c, h, w]`.
    pub fn channel_normalize(&self, eps: F) -> Result<Self> {
        let (n, c, h, w) = dims4("channel_normalize", self)?;
        let plane = h * w;
        let mut out = self.data.clone();
        for p in 0..n * c {
            let s = &mut out[p * plane..(p + 1) * plane];
            let mean = s.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
            let var = s.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + eps.as_f64()).sqrt();
            for v in s {
                *v = F::of((v.as_f64() - mean) * inv);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// `Σ aᵢ bᵢ`, accumulated in `f64`.
pub fn dot<F: Element>(a: &[F], b: &[F]) -> Result<f64> {
    if a.len() != b.len() {
        return mismatch("dot", &[a.len()], &[b.len()]);
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum())
}

fn dims4<F: Element>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => contract(op, format!("expected rank 4, got {:?}", t.shape())),
    }
}

fn check_broadcastable(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    if small.len() != big.len() || small.iter().zip(big).any(|(&s, &b)| s != b && s != 1) {
        return mismatch(op, small, big);
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Walks a broadcast from `small` to `big` in contiguous runs of `big`.
/// Trailing axes either all match (`repeat == false`, the run maps to a
/// slice of `small`) or all have extent 1 in `small` (`repeat == true`,
/// the run maps to a single element).
struct BroadcastRuns {
    outer_shape: Vec<usize>,
    outer_strides: Vec<usize>,
    len: usize,
    repeat: bool,
}

impl BroadcastRuns {
    fn new(small: &[usize], big: &[usize]) -> Self {
        let rank = big.len();
        let repeat = rank > 0 && small[rank - 1] == 1 && big[rank - 1] != 1;
        let mut split = rank;
        while split > 0 && if repeat { small[split - 1] == 1 } else { small[split - 1] == big[split - 1] } {
            split -= 1;
        }
        let sstrides = strides(small);
        Self {
            outer_shape: big[..split].to_vec(),
            outer_strides: (0..split).map(|a| if small[a] == 1 { 0 } else { sstrides[a] }).collect(),
            len: big[split..].iter().product(),
            repeat,
        }
    }

    /// Offset into `small` where each run starts, in row-major order of `big`.
    fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        let count: usize = self.outer_shape.iter().product();
        let mut idx = vec![0usize; self.outer_shape.len()];
        (0..count).map(move |i| {
            if i > 0 {
                increment(&mut idx, &self.outer_shape);
            }
            idx.iter().zip(&self.outer_strides).map(|(i, s)| i * s).sum()
        })
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for a in (0..idx.len()).rev() {
        idx[a] += 1;
        if idx[a] < shape[a] {
            return;
        }
        idx[a] = 0;
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`, all row-major.
fn gemm_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Unfolds one `[cin, h, w]` sample into `[cin * k * k, h * w]` patch
/// columns with zero padding.
fn im2col<F: Element>(x: &[F], cin: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[((ci * k + ky) * k + kx) * plane..((ci * k + ky) * k + kx + 1) * plane];
                dst.fill(F::zero());
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (hh, ww) = (h as isize, w as isize);
                let (x0, x1) = ((-dx).max(0), (ww - dx).min(ww));
                if x0 >= x1 {
                    continue;
                }
                for y in (-dy).max(0)..(hh - dy).min(hh) {
                    let sy = y + dy;
                    dst[(y * ww + x0) as usize..(y * ww + x1) as usize]
                        .copy_from_slice(&src[(sy * ww + x0 + dx) as usize..(sy * ww + x1 + dx) as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds patch columns back, summing overlaps.
fn col2im<F: Element>(cols: &[F], cin: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..cin {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[((ci * k + ky) * k + kx) * plane..((ci * k + ky) * k + kx + 1) * plane];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                let (hh, ww) = (h as isize, w as isize);
                let (x0, x1) = ((-dx).max(0), (ww - dx).min(ww));
                if x0 >= x1 {
                    continue;
                }
                for y in (-dy).max(0)..(hh - dy).min(hh) {
                    let sy = y + dy;
                    let d = &mut dst[(sy * ww + x0 + dx) as usize..(sy * ww + x1 + dx) as usize];
                    for (o, &v) in d.iter_mut().zip(&src[(y * ww + x0) as usize..(y * ww + x1) as usize]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
}

/// `dst[y, x] += c * src[y + dy, x + dx]` over the in-range region.
fn accumulate_shifted<F: Element>(
    dst: &mut [F],
    src: &[F],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    c: F,
) {
    let (h, w) = (h as isize, w as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (w - dx).min(w);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let d = &mut dst[(y * w + x0) as usize..(y * w + x1) as usize];
        let s = &src[((y + dy) * w + x0 + dx) as usize..((y + dy) * w + x1 + dx) as usize];
        for (o, &v) in d.iter_mut().zip(s) {
            *o = *o + c * v;
        }
    }
}
