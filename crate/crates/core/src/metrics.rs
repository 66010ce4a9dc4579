//! Image comparison: mean squared error and structural similarity.

use crate::error::{ReliefError, Result};
use crate::exec;
use crate::raster_io::GrayImage;

fn same_size(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(ReliefError::shape(format!(
            "images are {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

pub fn mse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_size(a, b)?;
    let sum: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.values.len() as f64)
}

/// Window side and stabilizing constants for [`ssim`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Mean SSIM over every `window x window` square (stride 1, uniform
/// weights, population statistics).
pub fn ssim(a: &GrayImage, b: &GrayImage, params: SsimParams) -> Result<f64> {
    same_size(a, b)?;
    let SsimParams { window, c1, c2 } = params;
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(ReliefError::invalid("SSIM constants must be positive"));
    }
    if window == 0 || a.rows < window || a.cols < window {
        return Err(ReliefError::invalid(format!(
            "{}x{} image is smaller than the {window}x{window} SSIM window",
            a.rows, a.cols
        )));
    }
    let (wr, wc) = (a.rows - window + 1, a.cols - window + 1);
    let n = (window * window) as f64;
    let cols = a.cols;
    let row_sums = exec::map_indexed(wr, |top| {
        let mut acc = 0.0;
        for left in 0..wc {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in top..top + window {
                for x in left..left + window {
                    let (p, q) = (a.values[y * cols + x], b.values[y * cols + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
        acc
    });
    Ok(row_sums.iter().sum::<f64>() / (wr * wc) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_image(seed: u64, rows: usize, cols: usize) -> GrayImage {
        let mut rng = seeded(seed);
        GrayImage::new(rows, cols, (0..rows * cols).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = random_image(1, 9, 7);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let base = GrayImage::new(2, 2, vec![0.2, 0.3, 0.4, 0.5]).unwrap();
        let up = GrayImage::new(2, 2, base.values.iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((mse(&base, &up).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse(&a, &random_image(1, 7, 9)).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random_image(2, 16, 16);
        assert_eq!(ssim(&a, &a, SsimParams::default()).unwrap(), 1.0);
        let zero = GrayImage::new(8, 8, vec![0.0; 64]).unwrap();
        let one = GrayImage::new(8, 8, vec![1.0; 64]).unwrap();
        let c1 = 1e-4;
        let s = ssim(&zero, &one, SsimParams::default()).unwrap();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
        assert!(ssim(
            &zero,
            &one,
            SsimParams {
                window: 9,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn ssim_symmetric() {
        let a = random_image(3, 12, 20);
        let b = random_image(4, 12, 20);
        let p = SsimParams::default();
        assert_eq!(ssim(&a, &b, p).unwrap(), ssim(&b, &a, p).unwrap());
    }
}
