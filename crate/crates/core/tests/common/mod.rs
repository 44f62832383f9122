//! Independent reference implementations shared by the integration tests.
//! Everything here is written directly from the operator definitions with
//! plain nested loops and f64 arithmetic.

#![allow(dead_code)]

pub mod grad_cases;

use dfc_dit::graph::{Graph, NodeId};
use dfc_dit::tensor::{Shape, Tensor};
use dfc_dit::{LossNetwork, Result};

/// 64-bit LCG (Knuth's MMIX constants); the SSIM reference script uses the
/// same generator.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0
    }

    pub fn byte(&mut self) -> u8 {
        (self.next_u64() >> 56) as u8
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.unit()
    }

    pub fn tensor(&mut self, shape: Shape, lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| self.range(lo, hi))
    }

    /// Values with `|v|` in `[gap, 1]` and a random sign; keeps ReLU inputs
    /// away from the kink.
    pub fn signed_away_from_zero(&mut self, shape: Shape, gap: f32) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| {
            let m = self.range(gap, 1.0);
            if self.next_u64() & 1 == 0 {
                m
            } else {
                -m
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pad {
    Zero(usize),
    Replicate(usize),
}

/// Six nested loops over (n, out channel, out y, out x, in channel, ky, kx).
pub fn naive_conv(input: &Tensor, weights: &Tensor, bias: Option<&[f32]>, stride: (usize, usize), pad: Pad) -> Tensor {
    let s = input.shape();
    let ws = weights.shape();
    let (cout, kh, kw) = (ws.n, ws.h, ws.w);
    let p = match pad {
        Pad::Zero(p) | Pad::Replicate(p) => p as isize,
    };
    let oh = (s.h + 2 * p as usize - kh) / stride.0 + 1;
    let ow = (s.w + 2 * p as usize - kw) / stride.1 + 1;
    Tensor::from_fn(Shape::new(s.n, cout, oh, ow), |n, o, y, x| {
        let mut acc = bias.map_or(0.0, |b| b[o] as f64);
        for c in 0..s.c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (y * stride.0 + ky) as isize - p;
                    let ix = (x * stride.1 + kx) as isize - p;
                    let v = match pad {
                        Pad::Zero(_) => {
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                0.0
                            } else {
                                input.at(n, c, iy as usize, ix as usize)
                            }
                        }
                        Pad::Replicate(_) => {
                            let cy = iy.clamp(0, s.h as isize - 1) as usize;
                            let cx = ix.clamp(0, s.w as isize - 1) as usize;
                            input.at(n, c, cy, cx)
                        }
                    };
                    acc += v as f64 * weights.at(o, c, ky, kx) as f64;
                }
            }
        }
        acc as f32
    })
}

pub fn naive_relu(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn naive_pool(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, x| {
        let mut m = f32::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                m = m.max(t.at(n, c, 2 * y + dy, 2 * x + dx));
            }
        }
        m
    })
}

/// Triple sum over channel, row and column, then the batch mean.
pub fn naive_sq_distance(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        let mut item = 0.0;
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let d = a.at(n, c, y, x) as f64 - b.at(n, c, y, x) as f64;
                    item += d * d;
                }
            }
        }
        total += item / (s.c * s.h * s.w) as f64;
    }
    total / s.n as f64
}

/// Features of the two-layer "tiny" loss network (conv1_1 -> relu -> pool ->
/// conv2_1), computed from the weights in its archive.
pub fn tiny_features(net: &LossNetwork, image: &Tensor) -> (Tensor, Tensor) {
    let archive = net.to_archive();
    let get = |name: &str| {
        let t = archive.get(name).unwrap();
        let [a, b, c, d] = match t.shape.as_slice() {
            [a, b, c, d] => [*a, *b, *c, *d],
            [a] => [1, *a, 1, 1],
            other => panic!("unexpected shape {other:?}"),
        };
        Tensor::new(Shape::new(a, b, c, d), t.data.clone()).unwrap()
    };
    let means = net.means();
    let centred = Tensor::from_fn(image.shape(), |n, c, y, x| image.at(n, c, y, x) - means[c]);
    let b1 = get("conv1_1.bias");
    let b2 = get("conv2_1.bias");
    let c1 = naive_conv(&centred, &get("conv1_1.weight"), Some(b1.data()), (1, 1), Pad::Zero(1));
    let c2 = naive_conv(&naive_pool(&naive_relu(&c1)), &get("conv2_1.weight"), Some(b2.data()), (1, 1), Pad::Zero(1));
    (c1, c2)
}

/// Perceptual loss of the tiny network over taps {conv1_1, conv2_1}, summed by hand.
pub fn tiny_perceptual_loss(net: &LossNetwork, x: &Tensor, x_hat: &Tensor) -> f64 {
    let (a1, a2) = tiny_features(net, x);
    let (b1, b2) = tiny_features(net, x_hat);
    naive_sq_distance(&a1, &b1) + naive_sq_distance(&a2, &b2)
}

/// Worst and mean relative error of an analytic gradient against central
/// finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    /// (input index, entry, analytic, numeric) at the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub mean_rel: f64,
    pub entries: usize,
}

/// Relative error that stays meaningful for entries near zero: the
/// denominator never drops below 1% of the largest analytic entry.
fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d out / d inputs` for the graph built by `build`.
///
/// The analytic side back-propagates `normalized_sq_distance(out, out - r)`
/// for a fixed random `r`; its gradient with respect to `out` is `2r/N`, so
/// the numeric side differentiates the linear functional `(2/N) sum(r * out)`
/// evaluated in f64.
pub fn grad_check<F>(inputs: &[Tensor], h: f32, seed: u64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.parameter(t.clone())).collect();
    let out = build(&mut graph, &ids).unwrap();
    let out_value = graph.value(out).clone();
    let mut rng = Lcg::new(seed);
    let r: Vec<f64> = (0..out_value.len())
        .map(|_| {
            let m = rng.range(0.5, 1.5) as f64;
            if rng.next_u64() & 1 == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    let target = Tensor::new(
        out_value.shape(),
        out_value.data().iter().zip(&r).map(|(&o, &ri)| (o as f64 - ri) as f32).collect(),
    )
    .unwrap();
    let t = graph.constant(target.clone());
    let loss = graph.normalized_sq_distance(out, t).unwrap();
    let grads = graph.backward(loss).unwrap();
    // exact gradient of the loss w.r.t. out as stored in f32
    let coeff: Vec<f64> = out_value
        .data()
        .iter()
        .zip(target.data())
        .map(|(&o, &tt)| {
            2.0 * (o as f64 - tt as f64) / out_value.shape().item_len() as f64 / out_value.shape().n as f64
        })
        .collect();

    let functional = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        g.value(out).data().iter().zip(&coeff).map(|(&o, &c)| o as f64 * c).sum()
    };

    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    let mut entries = 0;
    let mut worst = (0, 0, 0.0, 0.0);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).expect("every input is a parameter").clone();
        assert_eq!(analytic.shape(), input.shape());
        let floor = 1e-2 * analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)) + 1e-12;
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let base = input.data()[j];
            plus[k].data_mut()[j] = base + h;
            minus[k].data_mut()[j] = base - h;
            let step = plus[k].data()[j] as f64 - minus[k].data()[j] as f64;
            let numeric = (functional(&plus) - functional(&minus)) / step;
            let e = rel_error(analytic.data()[j] as f64, numeric, floor);
            if e > max_rel {
                max_rel = e;
                worst = (k, j, analytic.data()[j] as f64, numeric);
            }
            sum_rel += e;
            entries += 1;
        }
    }
    GradCheck { max_rel, worst, mean_rel: sum_rel / entries as f64, entries }
}

/// Separable resampling evaluated as a direct 2-D kernel sum over the
/// edge-replicated source.
pub fn kernel_sum_resize(
    plane: &[f32],
    w: usize,
    h: usize,
    out_w: usize,
    out_h: usize,
    kernel: fn(f64) -> f64,
    support: f64,
) -> Vec<f32> {
    let axis = |len: usize, out: usize, i: usize| -> Vec<(usize, f64)> {
        let ratio = len as f64 / out as f64;
        let scale = ratio.max(1.0);
        let centre = (i as f64 + 0.5) * ratio - 0.5;
        let lo = (centre - support * scale).floor() as isize;
        let hi = (centre + support * scale).ceil() as isize;
        let taps: Vec<(usize, f64)> =
            (lo..=hi).map(|j| (j.clamp(0, len as isize - 1) as usize, kernel((j as f64 - centre) / scale))).collect();
        let total: f64 = taps.iter().map(|t| t.1).sum();
        taps.into_iter().map(|(j, wt)| (j, wt / total)).collect()
    };
    let mut out = vec![0.0f32; out_w * out_h];
    for oy in 0..out_h {
        let ys = axis(h, out_h, oy);
        for ox in 0..out_w {
            let xs = axis(w, out_w, ox);
            let mut acc = 0.0;
            for &(sy, wy) in &ys {
                for &(sx, wx) in &xs {
                    acc += wy * wx * plane[sy * w + sx] as f64;
                }
            }
            out[oy * out_w + ox] = acc as f32;
        }
    }
    out
}

pub fn keys_cubic(x: f64) -> f64 {
    let a = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

pub fn lanczos3(x: f64) -> f64 {
    let sinc = |v: f64| if v == 0.0 { 1.0 } else { (std::f64::consts::PI * v).sin() / (std::f64::consts::PI * v) };
    if x.abs() < 3.0 {
        sinc(x) * sinc(x / 3.0)
    } else {
        0.0
    }
}

/// Mean SSIM with explicit 11x11 window sums at every fully-inside position.
pub fn naive_ssim(a: &[u8], b: &[u8], w: usize, h: usize) -> f64 {
    let sigma: f64 = 1.5;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(fy * fy + fx * fx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let g = win[dy][dx] / total;
                    let p = a[(y + dy) * w + x + dx] as f64;
                    let q = b[(y + dy) * w + x + dx] as f64;
                    mx += g * p;
                    my += g * q;
                    sxx += g * p * p;
                    syy += g * q * q;
                    sxy += g * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// The image pair the SSIM reference script generates for `index`.
pub fn ssim_pair(index: u64) -> (usize, usize, Vec<u8>, Vec<u8>) {
    let mut rng = Lcg::new(1000 + index);
    let w = 11 + (index as usize * 7) % 23;
    let h = 11 + (index as usize * 5) % 19;
    let a: Vec<u8> = (0..w * h).map(|_| rng.byte()).collect();
    let b = if index.is_multiple_of(2) {
        a.iter()
            .map(|&v| {
                let noise = rng.byte() as i64 - 128;
                (v as i64 + noise.div_euclid(4)).clamp(0, 255) as u8
            })
            .collect()
    } else {
        (0..w * h).map(|_| rng.byte()).collect()
    };
    (w, h, a, b)
}

/// Frozen reference values from `tools/ssim_reference.py`.
#[derive(Debug, serde::Deserialize)]
pub struct SsimCase {
    pub index: u64,
    pub width: usize,
    pub height: usize,
    pub inverted: bool,
    pub ssim: f64,
}

pub fn ssim_cases() -> Vec<SsimCase> {
    serde_json::from_str(include_str!("../fixtures/ssim_reference.json")).unwrap()
}

/// Radiance file with a mix of flat and adaptive-RLE scanlines, written by
/// hand: rows 0 and 2 are run-length encoded, rows 1 and 3 are flat.
pub fn mixed_rgbe_fixture() -> (Vec<u8>, Vec<[u8; 4]>) {
    let (w, h) = (16usize, 4usize);
    let mut rng = Lcg::new(77);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = if x >= 10 && y % 2 == 0 {
                // a run for the RLE encoder
                [200, 100, 50, 130]
            } else if x == 3 {
                [0, 0, 0, 0]
            } else {
                [rng.byte().max(3), rng.byte(), rng.byte(), 120 + rng.byte() % 20]
            };
            pixels.push(p);
        }
    }
    let mut bytes = b"#?RADIANCE\n# hand-built fixture\nFORMAT=32-bit_rle_rgbe\nEXPOSURE=1.0\n\n-Y 4 +X 16\n".to_vec();
    for y in 0..h {
        let row = &pixels[y * w..(y + 1) * w];
        if y % 2 == 0 {
            bytes.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for c in 0..4 {
                // literal dump of the first 10, then one run of 6
                bytes.push(10);
                bytes.extend(row[..10].iter().map(|p| p[c]));
                bytes.push(128 + 6);
                bytes.push(row[10][c]);
            }
        } else {
            bytes.extend(row.iter().flatten());
        }
    }
    (bytes, pixels)
}
