//! Mean squared error over a rectangular window.

use super::{Real, Tensor4};
use crate::error::{ReliefError, Result};

/// Rows `top..top+height`, columns `left..left+width` of every plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(h: usize, w: usize) -> Self {
        Region {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    /// Centre window left after trimming `border` cells from each side.
    pub fn centered(h: usize, w: usize, border: usize) -> Result<Self> {
        if 2 * border >= h || 2 * border >= w {
            return Err(ReliefError::invalid(format!(
                "border {border} leaves nothing of a {h}x{w} tile"
            )));
        }
        Ok(Region {
            top: border,
            left: border,
            height: h - 2 * border,
            width: w - 2 * border,
        })
    }
}

/// Mean of `(p - t)^2` over the region of every sample and channel, with its
/// gradient (zero outside the region). The sum is accumulated in `f64`.
pub fn mse_loss<T: Real>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    region: Region,
) -> Result<(f64, Tensor4<T>)> {
    if pred.shape() != target.shape() {
        return Err(ReliefError::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let [n, c, h, w] = pred.shape();
    if region.height == 0
        || region.width == 0
        || region.top + region.height > h
        || region.left + region.width > w
    {
        return Err(ReliefError::shape(format!(
            "loss region {region:?} outside {h}x{w}"
        )));
    }
    let count = (n * c * region.height * region.width) as f64;
    let scale = T::from_f64_lossy(2.0 / count);
    let mut grad = Tensor4::zeros(pred.shape());
    let mut sum = 0.0f64;
    let (p, t) = (pred.data(), target.data());
    let g = grad.data_mut();
    for plane in 0..n * c {
        for y in region.top..region.top + region.height {
            let row = plane * h * w + y * w;
            for i in row + region.left..row + region.left + region.width {
                let d = p[i] - t[i];
                sum += d.as_f64() * d.as_f64();
                g[i] = scale * d;
            }
        }
    }
    Ok((sum / count, grad))
}
