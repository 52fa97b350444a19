//! Dense row-major tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};
use crate::Scalar;

/// Dense N-D array stored contiguously in row-major order.
///
/// Video-shaped values use the `[N, C, T, H, W]` layout throughout the crate.
/// A tensor is a plain value: operators never mutate their inputs.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: std::fmt::Debug> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dtype", &std::any::type_name::<S>())
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> S) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| S::from_f64_lossy(rng.gen_range(lo..hi))).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| S::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal))).collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn dtype(&self) -> &'static str {
        S::NAME
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Flat offset of a multi-index, bounds-checked against the shape.
    pub fn offset(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.shape.len() {
            return Err(dim_err!("index {:?} has rank {} but tensor has rank {}", idx, idx.len(), self.rank()));
        }
        let mut off = 0;
        for (ax, (&i, &n)) in idx.iter().zip(&self.shape).enumerate() {
            if i >= n {
                return Err(dim_err!("index {} out of bounds for axis {} of extent {}", i, ax, n));
            }
            off = off * n + i;
        }
        Ok(off)
    }

    pub fn at(&self, idx: &[usize]) -> Result<S> {
        Ok(self.data[self.offset(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], v: S) -> Result<()> {
        let off = self.offset(idx)?;
        self.data[off] = v;
        Ok(())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_count(self.numel().max(1))
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        if axes.len() != self.rank() {
            return Err(dim_err!("permutation {:?} does not match rank {}", axes, self.rank()));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || seen[a] {
                return Err(dim_err!("{:?} is not a permutation", axes));
            }
            seen[a] = true;
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let out = Tensor::from_fn(&out_shape, |idx| {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            self.data[off]
        });
        Ok(out)
    }

    /// Reverses the order of entries along `axis` (time reversal when `axis == 2` on video tensors).
    pub fn flip(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(dim_err!("axis {} out of range for rank {}", axis, self.rank()));
        }
        let n = self.shape[axis];
        let out = Tensor::from_fn(&self.shape, |idx| {
            let mut src = idx.to_vec();
            src[axis] = n - 1 - idx[axis];
            self.data[self.offset(&src).expect("flipped index stays in bounds")]
        });
        Ok(out)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Extents of a `[N, C, T, H, W]` tensor.
    pub fn video_dims(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, c, t, h, w] => Ok([n, c, t, h, w]),
            _ => Err(dim_err!("expected a [N, C, T, H, W] video tensor, got {:?}", self.shape)),
        }
    }
}
