//! Classical operators the learned transformations are compared against:
//! fixed-kernel downscaling, luminance decolorization and the SSIM index.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imageio::{self, LdrImage};
use crate::tensor::{Shape, Tensor};

/// Reconstruction kernels for separable resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Box,
    Bilinear,
    /// Keys cubic convolution with `a = -0.5`.
    Bicubic,
    Lanczos3,
}

impl Filter {
    /// Half-width of the kernel at unit scale.
    pub fn support(self) -> f64 {
        match self {
            Filter::Box => 0.5,
            Filter::Bilinear => 1.0,
            Filter::Bicubic => 2.0,
            Filter::Lanczos3 => 3.0,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        let ax = x.abs();
        match self {
            Filter::Box => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Filter::Bilinear => (1.0 - ax).max(0.0),
            Filter::Bicubic => {
                const A: f64 = -0.5;
                if ax <= 1.0 {
                    ((A + 2.0) * ax - (A + 3.0)) * ax * ax + 1.0
                } else if ax < 2.0 {
                    ((A * ax - 5.0 * A) * ax + 8.0 * A) * ax - 4.0 * A
                } else {
                    0.0
                }
            }
            Filter::Lanczos3 => {
                if ax < 1e-12 {
                    1.0
                } else if ax < 3.0 {
                    let px = PI * x;
                    3.0 * px.sin() * (px / 3.0).sin() / (px * px)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Downscaling method and integer factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownscaleMethod {
    pub kind: DownscaleKind,
    pub factor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownscaleKind {
    /// Top-left pixel of each block.
    Subsample,
    Filtered(Filter),
}

impl DownscaleKind {
    pub const ALL: [DownscaleKind; 5] = [
        DownscaleKind::Subsample,
        DownscaleKind::Filtered(Filter::Box),
        DownscaleKind::Filtered(Filter::Bilinear),
        DownscaleKind::Filtered(Filter::Bicubic),
        DownscaleKind::Filtered(Filter::Lanczos3),
    ];
}

impl fmt::Display for DownscaleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DownscaleKind::Subsample => "subsample",
            DownscaleKind::Filtered(Filter::Box) => "box",
            DownscaleKind::Filtered(Filter::Bilinear) => "bilinear",
            DownscaleKind::Filtered(Filter::Bicubic) => "bicubic",
            DownscaleKind::Filtered(Filter::Lanczos3) => "lanczos3",
        })
    }
}

impl FromStr for DownscaleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DownscaleKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown downscaling method `{s}`")))
    }
}

impl DownscaleMethod {
    pub fn new(kind: DownscaleKind, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::InvalidArgument(format!("downscale factor must be at least 2, got {factor}")));
        }
        Ok(DownscaleMethod { kind, factor })
    }
}

/// Normalised taps for one output sample: first source index and weights.
/// Indices may fall outside the source and are clamped by the caller.
fn contributions(out_index: usize, ratio: f64, filter: Filter) -> (isize, Vec<f64>) {
    let scale = ratio.max(1.0);
    let center = (out_index as f64 + 0.5) * ratio - 0.5;
    let radius = filter.support() * scale;
    let first = (center - radius).floor() as isize;
    let last = (center + radius).ceil() as isize;
    let mut weights: Vec<f64> = (first..=last).map(|j| filter.eval((j as f64 - center) / scale)).collect();
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    (first, weights)
}

fn resample_axis(
    src: &[f64],
    len: usize,
    stride: usize,
    lines: usize,
    line_stride: usize,
    out_len: usize,
    filter: Filter,
) -> Vec<f64> {
    let ratio = len as f64 / out_len as f64;
    let taps: Vec<_> = (0..out_len).map(|i| contributions(i, ratio, filter)).collect();
    let mut out = vec![0.0; lines * out_len];
    for line in 0..lines {
        for (i, (first, weights)) in taps.iter().enumerate() {
            let mut acc = 0.0;
            for (k, w) in weights.iter().enumerate() {
                let j = (first + k as isize).clamp(0, len as isize - 1) as usize;
                acc += w * src[line * line_stride + j * stride];
            }
            out[line * out_len + i] = acc;
        }
    }
    out
}

/// Separable resampling of one `w x h` plane to `out_w x out_h`, with edge
/// replication at the borders.
pub fn resample_plane(plane: &[f32], w: usize, h: usize, out_w: usize, out_h: usize, filter: Filter) -> Vec<f32> {
    let src: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
    // rows: h lines of w samples -> h lines of out_w samples
    let horiz = resample_axis(&src, w, 1, h, w, out_w, filter);
    // columns: out_w lines of h samples (stride out_w) -> stored column-major
    let vert = resample_axis(&horiz, h, out_w, out_w, 1, out_h, filter);
    let mut out = vec![0.0f32; out_w * out_h];
    for x in 0..out_w {
        for y in 0..out_h {
            out[y * out_w + x] = vert[x * out_h + y] as f32;
        }
    }
    out
}

/// Resizes every plane of a tensor.
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize, filter: Filter) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize to an empty extent".into()));
    }
    let s = t.shape();
    let plane = s.plane_len();
    let mut data = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for p in t.data().chunks(plane) {
        data.extend(resample_plane(p, s.w, s.h, out_w, out_h, filter));
    }
    Tensor::new(Shape::new(s.n, s.c, out_h, out_w), data)
}

/// Downscales every plane of a tensor by the method's integer factor.
pub fn downscale_tensor(t: &Tensor, method: DownscaleMethod) -> Result<Tensor> {
    let s = t.shape();
    let f = method.factor;
    if !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
        return Err(Error::Shape(format!("{}x{} is not divisible by the downscale factor {f}", s.h, s.w)));
    }
    match method.kind {
        DownscaleKind::Subsample => {
            Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h / f, s.w / f), |n, c, y, x| t.at(n, c, y * f, x * f)))
        }
        DownscaleKind::Filtered(filter) => resize_tensor(t, s.h / f, s.w / f, filter),
    }
}

pub fn downscale_baseline(image: &LdrImage, method: DownscaleMethod) -> Result<LdrImage> {
    imageio::from_tensor(&downscale_tensor(&imageio::to_tensor(image), method)?)
}

/// Luminance-only grayscale conversion.
pub fn decolorize_baseline(image: &LdrImage) -> Result<LdrImage> {
    imageio::luminance_image(image)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Separable Gaussian filter over the fully-inside ("valid") region.
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = win.iter().enumerate().map(|(k, c)| c * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = win.iter().enumerate().map(|(k, c)| c * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel planes on a 0..255 scale, using an 11x11
/// Gaussian window (sigma 1.5) over every fully-inside window position.
pub fn ssim_plane(a: &[f32], b: &[f32], w: usize, h: usize) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape(format!("ssim planes do not match {w}x{h}")));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let win = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &win));

    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cov = exy[i] - ux * uy;
        let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / mx.len() as f64)
}

/// SSIM between two grayscale images of identical extent.
pub fn ssim(a: &LdrImage, b: &LdrImage) -> Result<f64> {
    if a.channels != 1 || b.channels != 1 {
        return Err(Error::Shape("ssim compares single-channel images".into()));
    }
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!("ssim extents differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let fa: Vec<f32> = a.data.iter().map(|&v| v as f32).collect();
    let fb: Vec<f32> = b.data.iter().map(|&v| v as f32).collect();
    ssim_plane(&fa, &fb, a.width, a.height)
}
