//! Dense row-major tensors.
//!
//! Complex images use a leading axis of size 2 (`[real, imag]`), so a
//! complex `H×W` image is a `[2, H, W]` tensor and every inner product in
//! this crate is the real Euclidean one, which equals `Re(a^H b)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("new", format!("zero-sized axis in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: T, other: &Self) -> Result<Self> {
        self.zip_map(other, "axpy", |a, b| a + alpha * b)
    }

    pub fn add_assign_scaled(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign_scaled")?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }

    /// 1 where the element is strictly positive, else 0.
    pub fn positive_mask(&self) -> Self {
        self.map(|v| if v > T::zero() { T::one() } else { T::zero() })
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Self) -> Result<Self> {
        let (c, h, w) = self.dims3("add_channel_bias")?;
        if bias.shape != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias shape {:?} does not match channel axis {c}", bias.shape),
            ));
        }
        let mut out = self.clone();
        let plane = h * w;
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bias.data[ch];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        Ok(out)
    }

    /// Per-channel sums of a `[C, H, W]` tensor, shape `[C]`.
    pub fn channel_sum(&self) -> Result<Self> {
        let (c, h, w) = self.dims3("channel_sum")?;
        let sums = self.data.chunks(h * w).map(|p| p.iter().copied().sum()).collect();
        Self::new(&[c], sums)
    }

    /// Broadcast a `[C]` vector to `[C, H, W]`.
    pub fn broadcast_channels(&self, h: usize, w: usize) -> Result<Self> {
        if self.rank() != 1 {
            return Err(Error::shape(
                "broadcast_channels",
                format!("expected rank-1 tensor, got {:?}", self.shape),
            ));
        }
        let c = self.shape[0];
        let mut data = Vec::with_capacity(c * h * w);
        for &v in self.data.iter() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        Self::new(&[c, h, w], data)
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, format!("expected [C, H, W], got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", self.shape))),
        }
    }
}

/// Euclidean inner product of the real 2-channel encodings, i.e. `Re(a^H b)`.
pub fn dot_re<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.dot(b)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.relu()
}

fn check_kernel<T: Real>(
    op: &'static str,
    input_channels: usize,
    kernels: &Tensor<T>,
) -> Result<(usize, usize)> {
    let (c_out, c_in, kh, kw) = kernels.dims4(op)?;
    if c_in != input_channels {
        return Err(Error::shape(
            op,
            format!("kernel input-channel axis is {c_in}, input has {input_channels} channels"),
        ));
    }
    if kh != kw {
        return Err(Error::shape(op, format!("kernel spatial axes differ: {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(Error::shape(op, format!("kernel size axis must be odd, got {kh}")));
    }
    Ok((c_out, kh))
}

/// Zero-padded "same" cross-correlation plus per-channel bias.
///
/// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, k, k]` with odd
/// `k`, `bias` is `[C_out]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let out = conv2d_nobias(input, kernels)?;
    if bias.shape() != [kernels.shape()[0]] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias axis 0 is {:?}, kernels output-channel axis is {}",
                bias.shape(),
                kernels.shape()[0]
            ),
        ));
    }
    out.add_channel_bias(bias)
}

/// Row ranges for a shift `d` in `[-r, r]`: output index `y` reads input `y + d`.
#[inline]
fn shifted_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

pub fn conv2d_nobias<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, h, w) = input.dims3("conv2d")?;
    let (c_out, k) = check_kernel("conv2d", c_in, kernels)?;
    let r = (k / 2) as isize;
    let plane = h * w;
    let x = input.data();
    let kd = kernels.data();
    let mut out = vec![T::zero(); c_out * plane];
    for (o, out_plane) in out.chunks_mut(plane).enumerate() {
        for i in 0..c_in {
            let in_plane = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let wgt = kd[((o * c_in + i) * k + ky) * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    let (x0, x1) = shifted_range(w, dx);
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        let dst = &mut out_plane[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wgt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, h, w], out)
}

/// Vector-Jacobian product of [`conv2d_nobias`] with respect to its input.
///
/// `grad_out` is `[C_out, H, W]`; returns `[C_in, H, W]`. This is the
/// transposed convolution with the same kernels.
pub fn conv2d_input_grad<T: Real>(grad_out: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_out, h, w) = grad_out.dims3("conv2d_input_grad")?;
    let (ko, c_in, k, _) = kernels.dims4("conv2d_input_grad")?;
    if ko != c_out {
        return Err(Error::shape(
            "conv2d_input_grad",
            format!("kernel output-channel axis is {ko}, gradient has {c_out} channels"),
        ));
    }
    let r = (k / 2) as isize;
    let plane = h * w;
    let g = grad_out.data();
    let kd = kernels.data();
    let mut out = vec![T::zero(); c_in * plane];
    for o in 0..c_out {
        let g_plane = &g[o * plane..(o + 1) * plane];
        for (i, out_plane) in out.chunks_mut(plane).enumerate() {
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let wgt = kd[((o * c_in + i) * k + ky) * k + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    let (x0, x1) = shifted_range(w, dx);
                    for y in y0..y1 {
                        let dst_row = (y as isize + dy) as usize * w;
                        let dst = &mut out_plane[(dst_row as isize + x0 as isize + dx) as usize
                            ..(dst_row as isize + x1 as isize + dx) as usize];
                        let src = &g_plane[y * w + x0..y * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + wgt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_in, h, w], out)
}

/// Vector-Jacobian product of [`conv2d_nobias`] with respect to its kernels.
///
/// Returns `[C_out, C_in, k, k]` for the given kernel size.
pub fn conv2d_weight_grad<T: Real>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = input.dims3("conv2d_weight_grad")?;
    let (c_out, gh, gw) = grad_out.dims3("conv2d_weight_grad")?;
    if (gh, gw) != (h, w) {
        return Err(Error::shape(
            "conv2d_weight_grad",
            format!("spatial axes differ: input {h}x{w}, gradient {gh}x{gw}"),
        ));
    }
    let r = (k / 2) as isize;
    let plane = h * w;
    let x = input.data();
    let g = grad_out.data();
    let mut out = vec![T::zero(); c_out * c_in * k * k];
    for o in 0..c_out {
        let g_plane = &g[o * plane..(o + 1) * plane];
        for i in 0..c_in {
            let in_plane = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let (x0, x1) = shifted_range(w, dx);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let src_row = (y as isize + dy) as usize * w;
                        let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        let gr = &g_plane[y * w + x0..y * w + x1];
                        acc = acc + gr.iter().zip(src).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    out[((o * c_in + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Tensor::new(&[c_out, c_in, k, k], out)
}
