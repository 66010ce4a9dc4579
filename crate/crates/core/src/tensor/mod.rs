//! Minimal deterministic tensor kernels for the U-Net.
//!
//! Every kernel is a plain function over [`Tensor4`] values; backward passes
//! are explicit adjoints. Work is split over the batch dimension and
//! per-sample results are reduced in sample order, so outputs are bitwise
//! reproducible regardless of thread count.

mod adam;
mod conv;
mod layers;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState, ParamGroupMut};
pub use conv::{conv2d_backward, conv2d_forward, he_init, ConvGrads, ConvParams};
pub use layers::{
    clip01, concat_channels, dropout, dropout_backward, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, split_channels, upsample2_backward, upsample2_forward,
    DropoutMask, Mode, PoolIndices,
};
pub use loss::{mse_loss, Region};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{ReliefError, Result};

/// Scalar type of network computation: `f32` for speed, `f64` for gradient
/// checks.
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    /// `c <- alpha * a * b + beta * c` on strided row-major matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `(batch, channels, height, width)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(ReliefError::shape(format!(
                "{} values for tensor shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor4 {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> Tensor4<T> {
    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values per batch item.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> &T {
        &self.data[self.index(b, c, y, x)]
    }
}

/// Builds a batch tensor from per-sample buffers of equal length.
pub(crate) fn stack_samples<T: Real>(per_sample: Vec<Vec<T>>, shape: [usize; 4]) -> Tensor4<T> {
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in per_sample {
        data.extend_from_slice(&s);
    }
    Tensor4 { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checked() {
        assert!(Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let t = Tensor4::<f64>::from_fn([2, 3, 4, 5], |i| i as f64);
        assert_eq!(*t.at(1, 2, 3, 4), 119.0);
        assert_eq!(t.sample(1)[0], 60.0);
    }
}
