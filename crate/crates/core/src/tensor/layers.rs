//! Pooling, upsampling, activation, dropout and channel concatenation.

use rand::Rng;

use super::{Real, Tensor4};
use crate::error::{ReliefError, Result};

/// Whether a pass is part of training (dropout active) or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Flat input index of the winning cell for every pooled output.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Ties go to the first cell in row-major
/// order.
pub fn maxpool2_forward<T: Real>(input: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ReliefError::shape(format!(
            "max pooling needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor4::from_vec([n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: [n, c, h, w],
            argmax,
        },
    ))
}

/// Routes each pooled gradient to the cell that won the forward max.
pub fn maxpool2_backward<T: Real>(grad_out: &Tensor4<T>, idx: &PoolIndices) -> Result<Tensor4<T>> {
    if grad_out.data().len() != idx.argmax.len() {
        return Err(ReliefError::shape(format!(
            "{} pooled gradients for {} recorded indices",
            grad_out.data().len(),
            idx.argmax.len()
        )));
    }
    let mut grad = Tensor4::zeros(idx.input_shape);
    let len = grad.data().len();
    let g = grad.data_mut();
    for (&i, &v) in idx.argmax.iter().zip(grad_out.data()) {
        if i >= len {
            return Err(ReliefError::shape(format!(
                "pool index {i} outside input of {len} values"
            )));
        }
        g[i] += v;
    }
    Ok(grad)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor4::from_vec([n, c, oh, ow], out).expect("shape by construction")
}

/// Adjoint of [`upsample2_forward`]: sums each 2x2 block.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, oh, ow] = grad_out.shape();
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(ReliefError::shape("upsample gradient must have even size"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        let base = plane * oh * ow;
        for y in 0..h {
            for x in 0..w {
                let i = base + 2 * y * ow + 2 * x;
                out.push((g[i] + g[i + 1]) + (g[i + ow] + g[i + ow + 1]));
            }
        }
    }
    Tensor4::from_vec([n, c, h, w], out)
}

pub fn relu_forward<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input (or, equivalently, output) was
/// strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if input.shape() != grad_out.shape() {
        return Err(ReliefError::shape("relu gradient shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

/// Per-unit multipliers applied by a dropout pass: `0` for dropped units,
/// `1 / (1 - rate)` for kept ones. Empty means identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    pub scale: Vec<T>,
}

impl<T: Real> DropoutMask<T> {
    pub fn is_identity(&self) -> bool {
        self.scale.is_empty()
    }
}

/// Inverted dropout: in training each unit is zeroed with probability `rate`
/// and survivors are scaled by `1 / (1 - rate)`; evaluation is the identity.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor4<T>,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor4<T>, DropoutMask<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ReliefError::invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), DropoutMask { scale: Vec::new() }));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let scale: Vec<T> = (0..input.data().len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| v * s)
        .collect();
    Ok((
        Tensor4::from_vec(input.shape(), data)?,
        DropoutMask { scale },
    ))
}

pub fn dropout_backward<T: Real>(
    grad_out: &Tensor4<T>,
    mask: &DropoutMask<T>,
) -> Result<Tensor4<T>> {
    if mask.is_identity() {
        return Ok(grad_out.clone());
    }
    if mask.scale.len() != grad_out.data().len() {
        return Err(ReliefError::shape("dropout mask does not match gradient"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.scale)
        .map(|(&g, &s)| g * s)
        .collect();
    Tensor4::from_vec(grad_out.shape(), data)
}

/// Stacks `a`'s channels followed by `b`'s.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c1, h, w] = a.shape();
    let [n2, c2, h2, w2] = b.shape();
    if (n, h, w) != (n2, h2, w2) {
        return Err(ReliefError::shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * (c1 + c2) * h * w);
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor4::from_vec([n, c1 + c2, h, w], data)
}

/// Splits after the first `c1` channels; inverse of [`concat_channels`].
pub fn split_channels<T: Real>(t: &Tensor4<T>, c1: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [n, c, h, w] = t.shape();
    if c1 > c {
        return Err(ReliefError::shape(format!(
            "cannot split {c1} of {c} channels"
        )));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * c1 * plane);
    let mut b = Vec::with_capacity(n * (c - c1) * plane);
    for s in 0..n {
        let sample = t.sample(s);
        a.extend_from_slice(&sample[..c1 * plane]);
        b.extend_from_slice(&sample[c1 * plane..]);
    }
    Ok((
        Tensor4::from_vec([n, c1, h, w], a)?,
        Tensor4::from_vec([n, c - c1, h, w], b)?,
    ))
}

/// Clamps every value into `[0, 1]`.
pub fn clip01<T: Real>(t: &Tensor4<T>) -> Tensor4<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn pool_examples() {
        let (out, idx) = maxpool2_forward(&t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
        let (out, idx) = maxpool2_forward(&t([1, 1, 2, 2], &[5.0; 4])).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(idx.argmax, vec![0]);
        assert!(maxpool2_forward(&t([1, 1, 3, 2], &[0.0; 6])).is_err());
    }

    #[test]
    fn pool_matches_block_scan() {
        let mut rng = seeded(8);
        let x = Tensor4::from_fn([2, 3, 6, 8], |_| rng.random_range(-1.0..1.0));
        let (out, _) = maxpool2_forward(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..3 {
                    for xx in 0..4 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(*x.at(b, c, 2 * y + dy, 2 * xx + dx));
                            }
                        }
                        assert_eq!(*out.at(b, c, y, xx), m);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_backward_routes() {
        let (_, idx) = maxpool2_forward(&t([1, 1, 2, 2], &[1.0, 9.0, 3.0, 4.0])).unwrap();
        let g = maxpool2_backward(&t([1, 1, 1, 1], &[1.0]), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
        let z = maxpool2_backward(&t([1, 1, 1, 1], &[0.0]), &idx).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let bad = PoolIndices {
            input_shape: [1, 1, 2, 2],
            argmax: vec![7],
        };
        assert!(maxpool2_backward(&t([1, 1, 1, 1], &[1.0]), &bad).is_err());
    }

    #[test]
    fn upsample_examples() {
        let up = upsample2_forward(&t([1, 1, 1, 1], &[3.5]));
        assert_eq!(up.data(), &[3.5; 4]);
        let mut rng = seeded(2);
        let x = Tensor4::from_fn([1, 2, 3, 2], |_| rng.random_range(-1.0..1.0));
        let back = upsample2_backward(&upsample2_forward(&x)).unwrap();
        // Block mean of the replicated tensor is the original.
        for (a, b) in back.data().iter().zip(x.data()) {
            assert_eq!(a / 4.0, *b);
        }
    }

    #[test]
    fn relu_examples() {
        let x = t([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t([1, 1, 1, 3], &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
        let pos = t([1, 1, 1, 2], &[0.5, 3.0]);
        assert_eq!(relu_forward(&pos), pos);
    }

    #[test]
    fn dropout_contract() {
        let mut rng = seeded(3);
        let x = Tensor4::from_fn([1, 1, 10, 10], |i| i as f64);
        let (y, m) = dropout(&x, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(y, x);
        assert!(m.is_identity());
        let (y, _) = dropout(&x, 0.7, &mut rng, Mode::Eval).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&x, 1.0, &mut rng, Mode::Train).is_err());

        let (y, m) = dropout(&x, 0.5, &mut rng, Mode::Train).unwrap();
        for ((&a, &b), &s) in x.data().iter().zip(y.data()).zip(&m.scale) {
            assert!(s == 0.0 || s == 2.0);
            assert_eq!(b, a * s);
        }
        let g = dropout_backward(&Tensor4::from_fn([1, 1, 10, 10], |_| 1.0), &m).unwrap();
        assert_eq!(g.data(), m.scale.as_slice());
    }

    #[test]
    fn dropout_preserves_mean() {
        let x = Tensor4::from_fn([1, 1, 1000, 1000], |i| 1.0 + (i % 7) as f64);
        let (y, _) = dropout(&x, 0.5, &mut seeded(10), Mode::Train).unwrap();
        let mx = x.data().iter().sum::<f64>() / 1e6;
        let my = y.data().iter().sum::<f64>() / 1e6;
        assert!((my - mx).abs() < 0.01 * mx, "{my} vs {mx}");
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor4::from_fn([2, 2, 4, 4], |i| i as f64);
        let b = Tensor4::from_fn([2, 3, 4, 4], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), [2, 5, 4, 4]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));
        let empty = Tensor4::<f64>::zeros([2, 0, 4, 4]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &Tensor4::zeros([2, 1, 2, 4])).is_err());
    }

    #[test]
    fn clip_examples() {
        let x = t([1, 1, 1, 3], &[1.2, -0.1, 0.5]);
        let c = clip01(&x);
        assert_eq!(c.data(), &[1.0, 0.0, 0.5]);
        assert_eq!(clip01(&c), c);
    }
}
