//! Central finite differences against every backward pass, in f64.

use rand::Rng;

use relief_core::rng::seeded;
use relief_core::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, dropout, dropout_backward, maxpool2_backward,
    maxpool2_forward, mse_loss, relu_backward, relu_forward, split_channels, upsample2_backward,
    upsample2_forward, ConvParams, Mode, Region, Tensor4,
};
use relief_core::unet::{UNet, UNetConfig};

const H: f64 = 1e-6;

fn random(seed: u64, shape: [usize; 4]) -> Tensor4<f64> {
    let mut rng = seeded(seed);
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks `grad` against d/dx of `<f(x), probe>` at every coordinate.
fn check_input_grad(
    x: &Tensor4<f64>,
    probe: &Tensor4<f64>,
    grad: &Tensor4<f64>,
    f: impl Fn(&Tensor4<f64>) -> Tensor4<f64>,
) {
    for i in 0..x.data().len() {
        let mut up = x.clone();
        up.data_mut()[i] += H;
        let mut down = x.clone();
        down.data_mut()[i] -= H;
        let numeric = (dot(&f(&up), probe) - dot(&f(&down), probe)) / (2.0 * H);
        let a = grad.data()[i];
        assert!(
            (a - numeric).abs() <= 1e-6 * a.abs().max(1.0),
            "coordinate {i}: analytic {a}, numeric {numeric}"
        );
    }
}

#[test]
fn conv_input_weight_and_bias() {
    let x = random(1, [2, 3, 5, 4]);
    let mut rng = seeded(2);
    let p = ConvParams {
        out_channels: 2,
        in_channels: 3,
        weight: (0..54).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: vec![0.3, -0.2],
    };
    let probe = random(3, [2, 2, 5, 4]);
    let (gx, gp) = conv2d_backward(&x, &p, &probe).unwrap();
    check_input_grad(&x, &probe, &gx, |t| conv2d_forward(t, &p).unwrap());

    let params: Vec<f64> = p.weight.iter().chain(&p.bias).copied().collect();
    let analytic: Vec<f64> = gp.weight.iter().chain(&gp.bias).copied().collect();
    let loss = |v: &[f64]| {
        let q = ConvParams {
            out_channels: 2,
            in_channels: 3,
            weight: v[..54].to_vec(),
            bias: v[54..].to_vec(),
        };
        dot(&conv2d_forward(&x, &q).unwrap(), &probe)
    };
    for i in 0..params.len() {
        let mut up = params.clone();
        up[i] += H;
        let mut down = params.clone();
        down[i] -= H;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * H);
        assert!((analytic[i] - numeric).abs() < 1e-6, "param {i}");
    }
}

#[test]
fn maxpool() {
    let x = random(4, [2, 2, 6, 4]);
    let (_, idx) = maxpool2_forward(&x).unwrap();
    let probe = random(5, [2, 2, 3, 2]);
    let g = maxpool2_backward(&probe, &idx).unwrap();
    check_input_grad(&x, &probe, &g, |t| maxpool2_forward(t).unwrap().0);
}

#[test]
fn upsample() {
    let x = random(6, [1, 3, 3, 4]);
    let probe = random(7, [1, 3, 6, 8]);
    let g = upsample2_backward(&probe).unwrap();
    check_input_grad(&x, &probe, &g, upsample2_forward);
}

#[test]
fn relu() {
    // keep inputs away from the kink
    let x = random(8, [1, 2, 5, 5]).map(|v| if v.abs() < 0.01 { 0.5 } else { v });
    let probe = random(9, [1, 2, 5, 5]);
    let g = relu_backward(&x, &probe).unwrap();
    check_input_grad(&x, &probe, &g, relu_forward);
}

#[test]
fn dropout_with_fixed_mask() {
    let x = random(10, [2, 2, 4, 4]);
    let (_, mask) = dropout(&x, 0.4, &mut seeded(11), Mode::Train).unwrap();
    let probe = random(12, [2, 2, 4, 4]);
    let g = dropout_backward(&probe, &mask).unwrap();
    // Re-running with the same stream reproduces the mask.
    check_input_grad(&x, &probe, &g, |t| {
        dropout(t, 0.4, &mut seeded(11), Mode::Train).unwrap().0
    });
}

#[test]
fn concat_split_are_adjoint() {
    let a = random(13, [1, 2, 3, 3]);
    let b = random(14, [1, 3, 3, 3]);
    let probe = random(15, [1, 5, 3, 3]);
    let (ga, gb) = split_channels(&probe, 2).unwrap();
    check_input_grad(&a, &probe, &ga, |t| concat_channels(t, &b).unwrap());
    check_input_grad(&b, &probe, &gb, |t| concat_channels(&a, t).unwrap());
}

#[test]
fn mse_loss_gradient_and_region() {
    let p = random(16, [2, 1, 6, 6]);
    let t = random(17, [2, 1, 6, 6]);
    let region = Region::centered(6, 6, 2).unwrap();
    let (_, g) = mse_loss(&p, &t, region).unwrap();
    for i in 0..p.data().len() {
        let mut up = p.clone();
        up.data_mut()[i] += H;
        let mut down = p.clone();
        down.data_mut()[i] -= H;
        let numeric = (mse_loss(&up, &t, region).unwrap().0
            - mse_loss(&down, &t, region).unwrap().0)
            / (2.0 * H);
        assert!((g.data()[i] - numeric).abs() < 1e-8, "coordinate {i}");
    }
    // Cells outside the region carry no gradient at all.
    for b in 0..2 {
        for y in 0..6 {
            for x in 0..6 {
                let inside = (2..4).contains(&y) && (2..4).contains(&x);
                if !inside {
                    assert_eq!(g.data()[g.index(b, 0, y, x)], 0.0);
                }
            }
        }
    }
}

#[test]
fn three_level_network_parameters() {
    let config = UNetConfig {
        levels: 3,
        base_channels: 2,
        dropout_rates: vec![0.0; 3],
        tile_size: 32,
        crop_border: 2,
    };
    let mut model = UNet::<f64>::build(config, &mut seeded(20)).unwrap();
    let mut rng = seeded(21);
    let x = Tensor4::from_fn([1, 1, 32, 32], |_| rng.random::<f64>());
    let t = Tensor4::from_fn([1, 1, 32, 32], |_| rng.random::<f64>());
    let region = Region::centered(32, 32, 2).unwrap();
    let loss = |m: &UNet<f64>| {
        let (y, _) = m.forward_train(&x, &mut seeded(0)).unwrap();
        mse_loss(&y, &t, region).unwrap().0
    };
    let (y, cache) = model.forward_train(&x, &mut seeded(0)).unwrap();
    let (_, g) = mse_loss(&y, &t, region).unwrap();
    let grads = model.backward(&cache, &g).unwrap();
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
        .collect();
    let base = model.flat_params();
    for i in (0..base.len()).step_by(base.len() / 40) {
        let mut p = base.clone();
        p[i] += H;
        model.set_flat_params(&p).unwrap();
        let up = loss(&model);
        p[i] -= 2.0 * H;
        model.set_flat_params(&p).unwrap();
        let down = loss(&model);
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[i];
        assert!(
            (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()).max(1e-4),
            "param {i}: analytic {a}, numeric {numeric}"
        );
    }
}
