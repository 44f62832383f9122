//! Forward and backward kernels for the operators the transformation and loss
//! networks are built from. All kernels are pure functions over [`Tensor`]s.
//!
//! Convolution gathers input patches into a column matrix (im2col) and runs a
//! single GEMM per batch item. Batch items are processed in parallel, but every
//! reduction across the batch is summed in item order so results do not depend
//! on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// How a convolution input is extended past its border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `n` pixels of zeros on every side.
    Zero(usize),
    /// `n` pixels on every side copied from the nearest boundary pixel.
    Replicate(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Replicate(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), padding: Padding) -> Self {
        ConvSpec { stride, padding }
    }
}

/// Output extent of a strided, padded convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    input: Shape,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(input: Shape, weights: Shape, spec: ConvSpec) -> Result<Self> {
        if weights.c != input.c {
            return Err(Error::Shape(format!(
                "conv2d: weights {weights} expect {} input channels, input {input} has {}",
                weights.c, input.c
            )));
        }
        let pad = spec.padding.amount();
        let (sy, sx) = spec.stride;
        let oh = conv_output_extent(input.h, weights.h, sy, pad);
        let ow = conv_output_extent(input.w, weights.w, sx, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => {
                Ok(ConvGeometry { input, cout: weights.n, kh: weights.h, kw: weights.w, oh, ow, spec })
            }
            _ => Err(Error::Shape(format!(
                "conv2d: kernel {}x{} with stride {:?} does not fit input {}x{} padded by {pad}",
                weights.h, weights.w, spec.stride, input.h, input.w
            ))),
        }
    }

    fn patch_len(&self) -> usize {
        self.input.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn output_shape(&self) -> Shape {
        Shape::new(self.input.n, self.cout, self.oh, self.ow)
    }

    /// Source pixel for tap `k` at output index `o` along an axis of length `len`,
    /// or `None` when the tap lands in zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, stride: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - self.spec.padding.amount() as isize;
        match self.spec.padding {
            Padding::Zero(_) => (pos >= 0 && (pos as usize) < len).then_some(pos as usize),
            Padding::Replicate(_) => Some(pos.clamp(0, len as isize - 1) as usize),
        }
    }

    /// Gathers the patches of one batch item into a `patch_len x out_plane` matrix.
    fn im2col(&self, item: &[f32], cols: &mut [f32]) {
        let (h, w) = (self.input.h, self.input.w);
        let (sy, sx) = self.spec.stride;
        let plane = self.out_plane();
        for c in 0..self.input.c {
            let src = &item[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, ki, sy, h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.source(ox, kj, sx, w) {
                                        Some(ix) => src[iy * w + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column-gradient matrix back onto the input positions it
    /// was gathered from. Replicated border taps accumulate into the edge pixel.
    fn col2im(&self, cols: &[f32], item_grad: &mut [f32]) {
        let (h, w) = (self.input.h, self.input.w);
        let (sy, sx) = self.spec.stride;
        let plane = self.out_plane();
        for c in 0..self.input.c {
            let dst = &mut item_grad[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ki, sy, h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.source(ox, kj, sx, w) {
                                dst[iy * w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strided GEMM: `c = a * b + beta * c` with `a: m x k`, `b: k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!("conv2d: bias {} does not match {cout} filters", b.shape())));
        }
    }
    Ok(())
}

/// 2-D cross-correlation of `input` (N,Cin,H,W) with `weights` (Cout,Cin,kH,kW).
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), weights.shape(), spec)?;
    check_bias(bias, geo.cout)?;
    let out_shape = geo.output_shape();
    let (k, plane) = (geo.patch_len(), geo.out_plane());
    let mut out = vec![0.0f32; out_shape.len()];
    out.par_chunks_mut(out_shape.item_len()).zip(input.data().par_chunks(input.shape().item_len())).for_each_init(
        || vec![0.0f32; k * plane],
        |cols, (dst, item)| {
            geo.im2col(item, cols);
            if let Some(b) = bias {
                for (row, &bv) in dst.chunks_mut(plane).zip(b.data()) {
                    row.fill(bv);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(geo.cout, k, plane, weights.data(), (k as isize, 1), cols, (plane as isize, 1), beta, dst);
        },
    );
    Tensor::new(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to whichever operands are requested.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// One batch item's input and weight gradients, when requested.
type ItemGrads = (Option<Vec<f32>>, Option<Vec<f32>>);

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: ConvSpec,
    grad_out: &Tensor,
    want_input: bool,
    want_weights: bool,
    want_bias: bool,
) -> Result<ConvGrads> {
    let geo = ConvGeometry::new(input.shape(), weights.shape(), spec)?;
    if grad_out.shape() != geo.output_shape() {
        return Err(Error::Shape(format!(
            "conv2d backward: gradient {} does not match output {}",
            grad_out.shape(),
            geo.output_shape()
        )));
    }
    let (k, plane, cout) = (geo.patch_len(), geo.out_plane(), geo.cout);
    let in_shape = input.shape();

    // Per-item partial results, reduced below in batch order.
    let partials: Vec<ItemGrads> = (0..in_shape.n)
        .into_par_iter()
        .map(|n| {
            let dout = grad_out.item_slice(n);
            let mut cols = vec![0.0f32; k * plane];
            let dinput = want_input.then(|| {
                gemm(k, cout, plane, weights.data(), (1, k as isize), dout, (plane as isize, 1), 0.0, &mut cols);
                let mut item_grad = vec![0.0f32; in_shape.item_len()];
                geo.col2im(&cols, &mut item_grad);
                item_grad
            });
            let dweights = want_weights.then(|| {
                geo.im2col(input.item_slice(n), &mut cols);
                let mut dw = vec![0.0f32; cout * k];
                gemm(cout, plane, k, dout, (plane as isize, 1), &cols, (1, plane as isize), 0.0, &mut dw);
                dw
            });
            (dinput, dweights)
        })
        .collect();

    let mut grad_input = want_input.then(|| Vec::with_capacity(in_shape.len()));
    let mut grad_weights = want_weights.then(|| vec![0.0f32; weights.len()]);
    for (di, dw) in partials {
        if let (Some(acc), Some(di)) = (grad_input.as_mut(), di) {
            acc.extend_from_slice(&di);
        }
        if let (Some(acc), Some(dw)) = (grad_weights.as_mut(), dw) {
            acc.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
        }
    }
    let grad_bias = want_bias.then(|| {
        let mut db = vec![0.0f32; cout];
        for n in 0..in_shape.n {
            for (o, row) in grad_out.item_slice(n).chunks(plane).enumerate() {
                db[o] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        db
    });

    Ok(ConvGrads {
        input: grad_input.map(|g| Tensor::new(in_shape, g)).transpose()?,
        weights: grad_weights.map(|g| Tensor::new(weights.shape(), g)).transpose()?,
        bias: grad_bias.map(|g| Tensor::new(Shape::new(1, cout, 1, 1), g)).transpose()?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

fn check_range(lo: f32, hi: f32) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        return Err(Error::InvalidArgument(format!("scaled tanh needs lo < hi, got ({lo}, {hi})")));
    }
    Ok(())
}

/// `lo + (hi - lo) * (tanh(v) + 1) / 2`.
pub fn scaled_tanh(input: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
    check_range(lo, hi)?;
    let half = (hi - lo) * 0.5;
    Ok(input.map(|v| lo + half * (v.tanh() + 1.0)))
}

pub fn scaled_tanh_backward(input: &Tensor, lo: f32, hi: f32, grad_out: &Tensor) -> Result<Tensor> {
    check_range(lo, hi)?;
    let half = (hi - lo) * 0.5;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let t = x.tanh();
            g * half * (1.0 - t * t)
        })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Nearest-neighbour upsampling by an integer factor in both spatial axes.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
    }
    let s = input.shape();
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h * factor, s.w * factor), |n, c, y, x| {
        input.at(n, c, y / factor, x / factor)
    }))
}

pub fn upsample_nearest_backward(input_shape: Shape, factor: usize, grad_out: &Tensor) -> Tensor {
    let mut grad = vec![0.0f32; input_shape.len()];
    let go = grad_out.shape();
    for n in 0..go.n {
        for c in 0..go.c {
            for y in 0..go.h {
                for x in 0..go.w {
                    grad[input_shape.index(n, c, y / factor, x / factor)] += grad_out.at(n, c, y, x);
                }
            }
        }
    }
    Tensor::new(input_shape, grad).expect("shape preserved")
}

/// Repeats a single-channel tensor `copies` times along the channel axis.
pub fn replicate_channels(input: &Tensor, copies: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.c != 1 || copies == 0 {
        return Err(Error::Shape(format!("channel replication needs one input channel, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, copies, s.h, s.w), |n, _, y, x| input.at(n, 0, y, x)))
}

pub fn replicate_channels_backward(input_shape: Shape, grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(input_shape, |n, _, y, x| (0..grad_out.shape().c).map(|c| grad_out.at(n, c, y, x)).sum())
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::Shape(format!("max pool 2x2 needs at least 2x2 input, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, x| {
        let (y0, x0) = (2 * y, 2 * x);
        input.at(n, c, y0, x0).max(input.at(n, c, y0, x0 + 1)).max(input.at(n, c, y0 + 1, x0)).max(input.at(
            n,
            c,
            y0 + 1,
            x0 + 1,
        ))
    }))
}

/// Routes each pooled gradient to the first maximal element of its window.
pub fn max_pool2_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = input.shape();
    let go = grad_out.shape();
    let mut grad = vec![0.0f32; s.len()];
    for n in 0..go.n {
        for c in 0..go.c {
            for y in 0..go.h {
                for x in 0..go.w {
                    let mut best = (2 * y, 2 * x);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * y + dy, 2 * x + dx);
                        if input.at(n, c, cand.0, cand.1) > input.at(n, c, best.0, best.1) {
                            best = cand;
                        }
                    }
                    grad[s.index(n, c, best.0, best.1)] += grad_out.at(n, c, y, x);
                }
            }
        }
    }
    Tensor::new(s, grad).expect("shape preserved")
}

/// `v * scale + shift[c]` for every value in channel `c`.
pub fn channel_affine(input: &Tensor, scale: f32, shift: &[f32]) -> Result<Tensor> {
    let s = input.shape();
    if shift.len() != s.c {
        return Err(Error::Shape(format!("{} channel offsets for input {s}", shift.len())));
    }
    let plane = s.plane_len();
    let data = input.data().iter().enumerate().map(|(i, &v)| v * scale + shift[(i / plane) % s.c]).collect();
    Tensor::new(s, data)
}

/// Squared distance normalised by `C*H*W` and averaged over the batch.
pub fn normalized_sq_distance(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "normalized distance between mismatched shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.len() as f64) as f32)
}

/// Gradients of [`normalized_sq_distance`] scaled by the upstream scalar gradient.
pub fn normalized_sq_distance_backward(a: &Tensor, b: &Tensor, grad: f32) -> (Tensor, Tensor) {
    let k = 2.0 * grad as f64 / a.len() as f64;
    let da: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| (k * (x as f64 - y as f64)) as f32).collect();
    let db = da.iter().map(|v| -v).collect();
    (Tensor::new(a.shape(), da).expect("shape preserved"), Tensor::new(a.shape(), db).expect("shape preserved"))
}
