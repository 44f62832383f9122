//! Deterministic procedural images for desk-scale training and testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::HdrImage;
use crate::tensor::{Shape, Tensor};

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.0..255.0))
}

/// One textured RGB image on a 0..255 scale, shaped 1x3xSxS: a colour
/// gradient overlaid with discs, rectangles, stripe patches and mild noise.
pub fn textured_image(size: usize, rng: &mut impl Rng) -> Tensor {
    let n = size as f32;
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut px = vec![[0.0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / n - 0.5) * dx + (y as f32 / n - 0.5) * dy + 0.75) / 1.5;
            let t = t.clamp(0.0, 1.0);
            px[y * size + x] = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        }
    }

    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color = random_color(rng);
        let cx = rng.random_range(0.0..n);
        let cy = rng.random_range(0.0..n);
        let r = rng.random_range(0.08..0.3) * n;
        let kind = rng.random_range(0..3);
        let period = rng.random_range(2.0..8.0);
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match kind {
                    0 => fx * fx + fy * fy <= r * r,
                    1 => fx.abs() <= r && fy.abs() <= 0.6 * r,
                    _ => {
                        let u = fx * theta.cos() + fy * theta.sin();
                        fx.abs() <= r && fy.abs() <= r && (u / period).rem_euclid(2.0) < 1.0
                    }
                };
                if inside {
                    px[y * size + x] = color;
                }
            }
        }
    }

    let noise = rng.random_range(0.0..6.0);
    let data: Vec<f32> = (0..3)
        .flat_map(|c| px.iter().map(move |p| p[c]))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 255.0))
        .collect();
    Tensor::new(Shape::new(1, 3, size, size), data).expect("size matches")
}

/// `count` textured images drawn from `seed`.
pub fn textured_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| textured_image(size, &mut rng)).collect()
}

/// A square radiance map whose luminance spans `10^decades` from the darkest
/// to the brightest corner, with a bright disc, texture, a neutral gray left
/// half and a tinted right half.
pub fn radiance_map(size: usize, decades: f32, seed: u64) -> HdrImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint = [rng.random_range(0.4..1.0f32), rng.random_range(0.4..1.0f32), rng.random_range(0.4..1.0f32)];
    let (sx, sy) = (rng.random_range(0.55..0.8f32), rng.random_range(0.15..0.4f32));
    let n = (size.max(2) - 1) as f32;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / n, y as f32 / n);
            let ramp = (u + v) / 2.0;
            let texture = 1.0 + 0.25 * ((u * 40.0).sin() * (v * 23.0).cos());
            let sun = {
                let d2 = (u - sx).powi(2) + (v - sy).powi(2);
                1.0 + 8.0 * (-d2 / 0.004).exp()
            };
            let lum = 10f32.powf(decades * ramp - 2.0) * texture * sun;
            let rgb = if u < 0.5 {
                [lum; 3]
            } else {
                let l = tint[0] * 0.299 + tint[1] * 0.587 + tint[2] * 0.114;
                tint.map(|t| lum * t / l)
            };
            data.extend_from_slice(&rgb);
        }
    }
    HdrImage::new(size, size, data).expect("finite positive radiance")
}
