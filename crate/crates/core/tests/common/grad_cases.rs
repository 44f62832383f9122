//! Finite-difference gradient checks for every graph operator and the
//! composed perceptual loss, shared by the gradient tests and the acceptance
//! suite. Each case returns its error statistics.

use super::{grad_check, GradCheck, Lcg};
use dfc_dit::graph::Graph;
use dfc_dit::ops::{ConvSpec, Padding};
use dfc_dit::{LossArch, LossNetwork, Shape, Tap, Tensor};

pub const H: f32 = 1e-3;
pub const MAX_REL: f64 = 1e-2;
pub const TYPICAL_REL: f64 = 1e-3;

/// Pool input whose 2x2 windows have a unique maximum by a wide margin.
pub fn pool_input(rng: &mut Lcg, shape: Shape) -> Tensor {
    let mut t = rng.tensor(shape, -1.0, 1.0);
    let s = t.shape();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in (0..s.h).step_by(2) {
                for x in (0..s.w).step_by(2) {
                    let k = (rng.next_u64() % 4) as usize;
                    let (py, px) = (y + k / 2, x + k % 2);
                    let i = s.index(n, c, py, px);
                    t.data_mut()[i] = 1.5 + rng.unit();
                }
            }
        }
    }
    t
}

pub fn conv2d_zero_padding_strided() -> GradCheck {
    let mut rng = Lcg::new(10);
    let inputs = [
        rng.tensor(Shape::new(1, 3, 6, 6), -1.0, 1.0),
        rng.tensor(Shape::new(4, 3, 4, 4), -0.5, 0.5),
        rng.tensor(Shape::new(1, 4, 1, 1), -0.5, 0.5),
    ];
    grad_check(&inputs, H, 1, |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), ConvSpec::new((2, 2), Padding::Zero(1))))
}

pub fn conv2d_replicate_padding() -> GradCheck {
    let mut rng = Lcg::new(11);
    let inputs = [
        rng.tensor(Shape::new(1, 4, 6, 6), -1.0, 1.0),
        rng.tensor(Shape::new(2, 4, 3, 3), -0.5, 0.5),
        rng.tensor(Shape::new(1, 2, 1, 1), -0.5, 0.5),
    ];
    grad_check(&inputs, H, 2, |g, ids| {
        g.conv2d(ids[0], ids[1], Some(ids[2]), ConvSpec::new((1, 1), Padding::Replicate(1)))
    })
}

pub fn relu() -> GradCheck {
    let x = Lcg::new(12).signed_away_from_zero(Shape::new(1, 4, 6, 6), 0.05);
    grad_check(&[x], H, 3, |g, ids| Ok(g.relu(ids[0])))
}

pub fn scaled_tanh() -> GradCheck {
    let x = Lcg::new(13).tensor(Shape::new(1, 4, 6, 6), -2.0, 2.0);
    grad_check(&[x], H, 4, |g, ids| g.scaled_tanh(ids[0], 0.0, 255.0))
}

pub fn upsample_nearest() -> GradCheck {
    let x = Lcg::new(14).tensor(Shape::new(1, 4, 3, 3), -1.0, 1.0);
    grad_check(&[x], H, 5, |g, ids| g.upsample_nearest(ids[0], 2))
}

pub fn replicate3() -> GradCheck {
    let x = Lcg::new(15).tensor(Shape::new(1, 1, 6, 6), -1.0, 1.0);
    grad_check(&[x], H, 6, |g, ids| g.replicate3(ids[0]))
}

pub fn max_pool2() -> GradCheck {
    let x = pool_input(&mut Lcg::new(16), Shape::new(1, 4, 6, 6));
    grad_check(&[x], H, 7, |g, ids| g.max_pool2(ids[0]))
}

pub fn channel_affine() -> GradCheck {
    let x = Lcg::new(17).tensor(Shape::new(1, 3, 6, 6), -1.0, 1.0);
    grad_check(&[x], H, 8, |g, ids| g.channel_affine(ids[0], 0.7, &[1.0, -2.0, 0.5]))
}

pub fn normalized_sq_distance() -> GradCheck {
    let mut rng = Lcg::new(18);
    // a close pair keeps the f32 rounding of the scalar output far below the
    // finite-difference signal
    let a = rng.tensor(Shape::new(1, 4, 6, 6), -1.0, 1.0);
    let b = Tensor::from_fn(a.shape(), |n, c, y, x| a.at(n, c, y, x) + rng.range(-0.02, 0.02));
    let inputs = [a, b];
    grad_check(&inputs, H, 9, |g, ids| g.normalized_sq_distance(ids[0], ids[1]))
}

pub fn sum() -> GradCheck {
    let mut rng = Lcg::new(19);
    let inputs = [rng.tensor(Shape::new(1, 2, 3, 3), -1.0, 1.0), rng.tensor(Shape::new(1, 2, 3, 3), -1.0, 1.0)];
    grad_check(&inputs, H, 10, |g, ids| {
        let zero = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let a = g.normalized_sq_distance(ids[0], zero)?;
        let b = g.normalized_sq_distance(ids[1], zero)?;
        g.sum(&[a, b])
    })
}

pub fn conv_relu_composite() -> GradCheck {
    // Small operands keep the f32 rounding noise of the outputs well below
    // the perturbation signal. A 1e-3 step moves any pre-activation by at most
    // 1e-4 here, so keeping them 2e-4 from zero means the finite difference
    // never straddles the ReLU kink.
    let mut rng = Lcg::new(20);
    let (x, w) = loop {
        let x = rng.tensor(Shape::new(1, 3, 6, 6), -0.1, 0.1);
        let w = rng.tensor(Shape::new(4, 3, 3, 3), -0.1, 0.1);
        let pre = dfc_dit::ops::conv2d(&x, &w, None, ConvSpec::new((1, 1), Padding::Zero(1))).unwrap();
        if pre.data().iter().all(|v| v.abs() > 2e-4) {
            break (x, w);
        }
    };
    let w2 = rng.tensor(Shape::new(2, 4, 3, 3), -0.1, 0.1);
    grad_check(&[x, w, w2], H, 11, |g, ids| {
        let spec = ConvSpec::new((1, 1), Padding::Zero(1));
        let a = g.conv2d(ids[0], ids[1], None, spec)?;
        let r = g.relu(a);
        g.conv2d(r, ids[2], None, spec)
    })
}

pub fn perceptual_loss_tiny_network() -> GradCheck {
    // Zero means and unit-scale images keep the feature maps O(1), so their
    // f32 rounding stays far below the effect of a 1e-3 perturbation.
    let mut archive = LossNetwork::random(LossArch::Tiny { width: 4 }, 21).to_archive();
    archive.means = vec![0.0; 3];
    let net = LossNetwork::from_archive(&archive).unwrap();
    let taps = Tap::parse_set("conv1_1,conv2_1").unwrap();
    let mut rng = Lcg::new(22);
    let x = rng.tensor(Shape::new(1, 3, 6, 6), -1.0, 1.0);
    let x_hat = Tensor::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) + rng.range(-0.05, 0.05));
    grad_check(&[x_hat], H, 12, |g: &mut Graph, ids| {
        let target = g.constant(x.clone());
        net.perceptual_loss_node(g, target, ids[0], &taps)
    })
}

/// Every case, by name.
pub fn all() -> Vec<(&'static str, GradCheck)> {
    vec![
        ("conv2d_zero_padding_strided", conv2d_zero_padding_strided()),
        ("conv2d_replicate_padding", conv2d_replicate_padding()),
        ("relu", relu()),
        ("scaled_tanh", scaled_tanh()),
        ("upsample_nearest", upsample_nearest()),
        ("replicate3", replicate3()),
        ("max_pool2", max_pool2()),
        ("channel_affine", channel_affine()),
        ("normalized_sq_distance", normalized_sq_distance()),
        ("sum", sum()),
        ("conv_relu_composite", conv_relu_composite()),
        ("perceptual_loss_tiny_network", perceptual_loss_tiny_network()),
    ]
}
