//! Dense row-major `f64` tensors and the raw kernels the autodiff graph
//! dispatches to.
//!
//! A [`Tensor`] is an immutable value: shape metadata plus a shared data
//! buffer. Cloning is cheap (the buffer is reference counted) and tensors
//! can be moved freely between threads. Every constructor that accepts
//! external data rejects non-finite values.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking that the buffer matches the shape and holds
    /// only finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                node: 0,
                op: "tensor",
                detail: format!("non-finite value {} at flat index {pos}", data[pos]),
            });
        }
        Ok(Self::from_raw(shape.to_vec(), data))
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_raw(shape.to_vec(), vec![value; numel_of(shape)])
    }

    /// Vector of length `values.len()`.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(&[values.len()], values.to_vec())
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_raw(shape.to_vec(), data)
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_raw(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Self> {
        let c = *self.shape.last().ok_or_else(|| shape_err!("narrow on scalar"))?;
        if start + len > c {
            return Err(shape_err!("narrow {start}+{len} exceeds last dim {c}"));
        }
        let rows = self.numel() / c.max(1);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(Self::from_raw(shape, narrow_last(&self.data, rows, c, start, len)))
    }

    /// One image `index` of an `N×...` batch.
    pub fn select_first(&self, index: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| shape_err!("select on scalar"))?;
        if index >= n {
            return Err(shape_err!("index {index} out of range for batch of {n}"));
        }
        let stride = self.numel() / n;
        Ok(Self::from_raw(
            self.shape[1..].to_vec(),
            self.data[index * stride..(index + 1) * stride].to_vec(),
        ))
    }

    /// Rows `idx` of the leading axis, in the given order.
    pub fn gather_first(&self, idx: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| shape_err!("gather on scalar"))?;
        let stride = self.numel() / n.max(1);
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                return Err(shape_err!("gather index {i} out of range for {n}"));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self::from_raw(shape, data))
    }

    /// Concatenates tensors along the leading axis.
    pub fn cat_first(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| contract_err!("cat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(shape_err!("cat {:?} with {:?}", first.shape, p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self::from_raw(shape, data))
    }

    /// Numerically stable `log Σ exp` over `axis`, removing that axis.
    pub fn logsumexp(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {axis} out of range for rank {}", self.rank()));
        }
        if !self.is_finite() {
            return Err(Error::Numeric {
                node: 0,
                op: "logsumexp",
                detail: "non-finite input".into(),
            });
        }
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self::from_raw(shape, logsumexp_axis(&self.data, outer, len, inner)))
    }
}

/// `(outer, len, inner)` sizes around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn logsumexp_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| x[(o * len + j) * inner + i];
            let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..len).map(|j| (at(j) - m).exp()).sum();
            out[o * inner + i] = m + s.ln();
        }
    }
    out
}

pub(crate) fn sum_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..len {
            let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub(crate) fn expand_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &x[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend_from_slice(src);
        }
    }
    out
}

pub(crate) fn narrow_last(x: &[f64], rows: usize, c: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x[r * c + start..r * c + start + len]);
    }
    out
}

pub(crate) fn pad_last(x: &[f64], rows: usize, len: usize, start: usize, total: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * total];
    for r in 0..rows {
        out[r * total + start..r * total + start + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
}

/// `C[m×n] = op(A) op(B)` for one matrix pair, where `op` optionally
/// transposes the stored operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least m*k, k*n and m*n values and the
    // strides above address only those elements.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers `k×k` zero-padded neighbourhoods of an `N×H×W×C` tensor into
/// rows of length `k·k·C` (row-major over the window, then channel).
pub(crate) fn im2col(x: &[f64], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = Vec::with_capacity(n * h * w * k * k * c);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for m in 0..k {
                    let y = i as isize + m as isize - p;
                    for q in 0..k {
                        let xx = j as isize + q as isize - p;
                        if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                            out.resize(out.len() + c, 0.0);
                        } else {
                            let src = ((b * h + y as usize) * w + xx as usize) * c;
                            out.extend_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters window rows back, summing overlaps.
pub(crate) fn col2im(cols: &[f64], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let row = k * k * c;
    let mut out = vec![0.0; n * h * w * c];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let base = ((b * h + i) * w + j) * row;
                for m in 0..k {
                    let y = i as isize + m as isize - p;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for q in 0..k {
                        let xx = j as isize + q as isize - p;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + y as usize) * w + xx as usize) * c;
                        let src = base + (m * k + q) * c;
                        for (o, v) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 average pooling of `N×H×W×C`.
pub(crate) fn avg_pool2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let dst = ((b * oh + i) * ow + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * x[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of `N×H×W×C`.
pub(crate) fn upsample2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let src = ((b * h + i / 2) * w + j / 2) * c;
                let dst = ((b * oh + i) * ow + j) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}
