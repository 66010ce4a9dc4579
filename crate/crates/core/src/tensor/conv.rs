//! 3x3 same-padded convolution via im2col and GEMM.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{stack_samples, Real, Tensor4};
use crate::error::{ReliefError, Result};
use crate::exec;

/// Weights `(out, in, 3, 3)` row-major, plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients with the same layout as [`ConvParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        ConvParams {
            out_channels,
            in_channels,
            weight: vec![T::zero(); out_channels * in_channels * 9],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.weight.len() != self.out_channels * self.in_channels * 9
            || self.bias.len() != self.out_channels
        {
            return Err(ReliefError::shape(format!(
                "conv params {}x{}x3x3 hold {} weights and {} biases",
                self.out_channels,
                self.in_channels,
                self.weight.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

impl<T: Real> ConvGrads<T> {
    pub fn zeros_like(p: &ConvParams<T>) -> Self {
        ConvGrads {
            weight: vec![T::zero(); p.weight.len()],
            bias: vec![T::zero(); p.bias.len()],
        }
    }
}

/// He-normal weights (variance `2 / (in * 9)`) and zero biases.
pub fn he_init<T: Real, R: Rng + ?Sized>(
    out_channels: usize,
    in_channels: usize,
    rng: &mut R,
) -> ConvParams<T> {
    ConvParams {
        out_channels,
        in_channels,
        weight: he_normal(in_channels * 9, out_channels * in_channels * 9, rng),
        bias: vec![T::zero(); out_channels],
    }
}

/// `count` draws from `Normal(0, 2 / fan_in)`.
///
/// Draws happen in `f64` so single and double precision models built from
/// the same seed agree up to rounding.
pub fn he_normal<T: Real, R: Rng + ?Sized>(fan_in: usize, count: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    (0..count)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect()
}

/// Unfolds one sample `(c, h, w)` into `(c * 9, h * w)` columns.
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for i in 0..c {
        let plane = &src[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => out.copy_from_slice(srow),
                        _ => {
                            out[..w - 1].copy_from_slice(&srow[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating overlaps.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    dst.fill(T::zero());
    for i in 0..c {
        let plane = &mut dst[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let drow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                drow[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                drow[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                drow[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Real>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<()> {
    params.check()?;
    if input.channels() != params.in_channels {
        return Err(ReliefError::shape(format!(
            "conv expects {} input channels, got {}",
            params.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

/// `out[b,o,y,x] = bias[o] + sum_{i,dy,dx} w[o,i,dy,dx] in[b,i,y+dy-1,x+dx-1]`
/// with zeros outside the input.
pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, params: &ConvParams<T>) -> Result<Tensor4<T>> {
    check_input(input, params)?;
    let [n, ci, h, w] = input.shape();
    let co = params.out_channels;
    let hw = h * w;
    let k = ci * 9;
    let outs = exec::map_indexed(n, |b| {
        let mut col = vec![T::zero(); k * hw];
        im2col(input.sample(b), ci, h, w, &mut col);
        let mut out = vec![T::zero(); co * hw];
        // SAFETY: buffers sized co x k, k x hw and co x hw, row-major.
        unsafe {
            T::gemm(
                co,
                k,
                hw,
                T::one(),
                params.weight.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        for (o, plane) in out.chunks_mut(hw).enumerate() {
            let bias = params.bias[o];
            plane.iter_mut().for_each(|v| *v += bias);
        }
        out
    });
    Ok(stack_samples(outs, [n, co, h, w]))
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
///
/// Per-sample parameter gradients are summed in batch order.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, ConvGrads<T>)> {
    check_input(input, params)?;
    let [n, ci, h, w] = input.shape();
    let co = params.out_channels;
    if grad_out.shape() != [n, co, h, w] {
        return Err(ReliefError::shape(format!(
            "conv grad_out {:?} does not match output shape {:?}",
            grad_out.shape(),
            [n, co, h, w]
        )));
    }
    let hw = h * w;
    let k = ci * 9;
    let per_sample = exec::map_indexed(n, |b| {
        let g = grad_out.sample(b);
        let mut col = vec![T::zero(); k * hw];
        im2col(input.sample(b), ci, h, w, &mut col);
        let mut gw = vec![T::zero(); co * k];
        let mut gcol = vec![T::zero(); k * hw];
        // SAFETY: g is co x hw, col is k x hw (read transposed), gw is co x k;
        // weight is co x k (read transposed), gcol is k x hw.
        unsafe {
            T::gemm(
                co,
                hw,
                k,
                T::one(),
                g.as_ptr(),
                hw as isize,
                1,
                col.as_ptr(),
                1,
                hw as isize,
                T::zero(),
                gw.as_mut_ptr(),
                k as isize,
                1,
            );
            T::gemm(
                k,
                co,
                hw,
                T::one(),
                params.weight.as_ptr(),
                1,
                k as isize,
                g.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                gcol.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        let gb: Vec<T> = g
            .chunks(hw)
            .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        let mut gin = vec![T::zero(); ci * hw];
        col2im(&gcol, ci, h, w, &mut gin);
        (gin, gw, gb)
    });

    let mut grads = ConvGrads::zeros_like(params);
    let mut gins = Vec::with_capacity(n);
    for (gin, gw, gb) in per_sample {
        grads.weight.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
        grads.bias.iter_mut().zip(&gb).for_each(|(a, &b)| *a += b);
        gins.push(gin);
    }
    Ok((stack_samples(gins, [n, ci, h, w]), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Independent quadruple loop.
    fn brute(input: &Tensor4<f64>, p: &ConvParams<f64>) -> Vec<f64> {
        let [n, ci, h, w] = input.shape();
        let co = p.out_channels;
        let mut out = vec![0.0; n * co * h * w];
        for b in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = p.bias[o];
                        for i in 0..ci {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (sy, sx) = (
                                        y as isize + dy as isize - 1,
                                        x as isize + dx as isize - 1,
                                    );
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    s += p.weight[((o * ci + i) * 3 + dy) * 3 + dx]
                                        * input.at(b, i, sy as usize, sx as usize);
                                }
                            }
                        }
                        out[((b * co + o) * h + y) * w + x] = s;
                    }
                }
            }
        }
        out
    }

    fn random_case(seed: u64, shape: [usize; 4], co: usize) -> (Tensor4<f64>, ConvParams<f64>) {
        let mut rng = seeded(seed);
        let input = Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let mut p = he_init::<f64, _>(co, shape[1], &mut rng);
        p.bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
        (input, p)
    }

    #[test]
    fn identity_kernel() {
        let mut p = ConvParams::<f64>::zeros(2, 2);
        for o in 0..2 {
            p.weight[((o * 2 + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        let (input, _) = random_case(1, [2, 2, 5, 4], 2);
        let out = conv2d_forward(&input, &p).unwrap();
        assert_eq!(out, input);
        let g = Tensor4::from_fn([2, 2, 5, 4], |i| i as f64 * 0.1);
        let (gin, _) = conv2d_backward(&input, &p, &g).unwrap();
        assert_eq!(gin, g);
    }

    #[test]
    fn ones_kernel_on_ones() {
        let input = Tensor4::from_vec([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let p = ConvParams {
            out_channels: 1,
            in_channels: 1,
            weight: vec![1.0; 9],
            bias: vec![0.0],
        };
        let out = conv2d_forward(&input, &p).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_brute_force() {
        let (input, p) = random_case(3, [1, 2, 5, 5], 3);
        let fast = conv2d_forward(&input, &p).unwrap();
        for (a, b) in fast.data().iter().zip(brute(&input, &p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let (input, p) = random_case(4, [2, 2, 4, 4], 3);
        let (gin, g) = conv2d_backward(&input, &p, &Tensor4::zeros([2, 3, 4, 4])).unwrap();
        assert!(gin
            .data()
            .iter()
            .chain(&g.weight)
            .chain(&g.bias)
            .all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let (input, p) = random_case(5, [1, 2, 4, 4], 3);
        let wrong = ConvParams::<f64>::zeros(3, 1);
        assert!(conv2d_forward(&input, &wrong).is_err());
        assert!(conv2d_backward(&input, &p, &Tensor4::zeros([1, 2, 4, 4])).is_err());
    }

    #[test]
    fn he_variance_and_determinism() {
        let draws: Vec<f64> = he_normal(9, 100_000, &mut seeded(42));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var - 2.0 / 9.0).abs() < 0.05 * 2.0 / 9.0, "variance {var}");
        let again: Vec<f64> = he_normal(9, 100_000, &mut seeded(42));
        assert_eq!(draws, again);
        let p = he_init::<f32, _>(4, 3, &mut seeded(1));
        assert!(p.bias.iter().all(|&b| b == 0.0));
        assert_eq!(p.weight.len(), 108);
    }

    #[test]
    fn single_precision_agrees_with_double() {
        let (input, p) = random_case(6, [2, 3, 6, 6], 4);
        let input32 = input
            .map(|v| v)
            .data()
            .iter()
            .map(|&v| v as f32)
            .collect::<Vec<_>>();
        let input32 = Tensor4::from_vec(input.shape(), input32).unwrap();
        let p32 = ConvParams {
            out_channels: p.out_channels,
            in_channels: p.in_channels,
            weight: p.weight.iter().map(|&v| v as f32).collect(),
            bias: p.bias.iter().map(|&v| v as f32).collect(),
        };
        let a = conv2d_forward(&input, &p).unwrap();
        let b = conv2d_forward(&input32, &p32).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}
