//! End-to-end procedures: offline training of the downscaler and decolorizer
//! over a corpus, online per-image HDR tone mapping, display rendering and
//! inference.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Filter};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::imageio::{self, luminance_rgb, HdrImage, LdrImage};
use crate::lossnet::{LossNetwork, Tap, TapSet};
use crate::ops;
use crate::optim::{AdamState, DEFAULT_LEARNING_RATE};
use crate::tensor::{Shape, Tensor};
use crate::transform::{NetShape, Task, TransformNet, DEFAULT_DEPTH, DEFAULT_HIDDEN};

/// Admissible open lower and closed upper bound of the display exponent.
pub const GAMMA_RANGE: (f32, f32) = (0.2, 1.0);

/// Log-domain span that exactly fills the display range: `alpha = 0.5` over a
/// dynamic range of `10^4`.
pub const REFERENCE_LOG_SPAN: f32 = 0.5 * 9.210_340_4;

/// Training and rendering settings for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    pub taps: TapSet,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Side of the square training crops.
    pub training_size: usize,
    /// Optimisation steps for online tone mapping.
    pub iterations: usize,
    pub alpha: f32,
    pub gamma: f32,
    pub eps_log: f32,
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    pub corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl serde::Serialize for Task {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Task {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl TaskConfig {
    /// Documented defaults for `task`.
    pub fn for_task(task: Task) -> Self {
        let taps = match task {
            Task::Downscale | Task::Tonemap => [Tap::Conv1_1, Tap::Conv2_1, Tap::Conv3_1].into_iter().collect(),
            Task::Decolorize => [Tap::Conv4_1].into_iter().collect(),
        };
        TaskConfig {
            task,
            taps,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 16,
            epochs: 10,
            training_size: 256,
            iterations: 300,
            alpha: 0.5,
            gamma: 0.5,
            eps_log: 1e-6,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            depth: DEFAULT_DEPTH,
            corpus: None,
            output: None,
        }
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape { hidden: self.hidden, depth: self.depth }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.gamma > GAMMA_RANGE.0 && self.gamma <= GAMMA_RANGE.1) {
            return fail(format!(
                "gamma = {} is outside the admissible range ({}, {}]",
                self.gamma, GAMMA_RANGE.0, GAMMA_RANGE.1
            ));
        }
        if !(self.eps_log > 0.0 && self.eps_log.is_finite()) {
            return fail(format!("eps_log = {} must be positive", self.eps_log));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.taps.is_empty() {
            return fail("taps must name at least one layer".into());
        }
        if self.hidden == 0 {
            return fail("hidden must be at least 1".into());
        }
        if self.task == Task::Downscale {
            let f = 1usize << self.depth.min(8);
            if self.training_size == 0 || !self.training_size.is_multiple_of(f) {
                return fail(format!("training_size {} must be divisible by {f}", self.training_size));
            }
        }
        Ok(())
    }
}

/// Offset and gain mapping compressed log radiance onto the loss-network scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRescale {
    /// Compressed value mapped to mid-gray.
    pub center: f32,
    pub gain: f32,
}

/// What a training run did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: Task,
    /// Loss before each parameter update.
    pub losses: Vec<f32>,
    /// Loss after the last update.
    pub final_loss: Option<f32>,
    pub epoch_seconds: Vec<f64>,
    pub net_checksum: String,
    pub loss_network_checksum: String,
    pub rescale: Option<LogRescale>,
}

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.losses.len()
    }
}

/// Training images, each 1x3xSxS on a 0..255 scale.
#[derive(Debug, Clone)]
pub struct Corpus {
    images: Vec<Tensor>,
}

impl Corpus {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::InvalidArgument("the training corpus is empty".into()));
        };
        let s = first.shape();
        if s.n != 1 || s.c != 3 || s.h != s.w {
            return Err(Error::Shape(format!("corpus images must be 1x3xSxS, got {s}")));
        }
        if let Some(bad) = images.iter().find(|t| t.shape() != s) {
            return Err(Error::Shape(format!("corpus mixes {} with {s}", bad.shape())));
        }
        Ok(Corpus { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image_size(&self) -> usize {
        self.images[0].shape().h
    }

    /// Loads every PNG/PPM/PGM in `dir` (sorted by name), centre-cropped to a
    /// square and resized to `size`.
    pub fn load_dir(dir: impl AsRef<Path>, size: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
                matches!(ext.as_str(), "png" | "ppm" | "pgm" | "pnm")
            })
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| imageio::load_image(p).and_then(|img| prepare_training_image(&img, size)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(images)
    }
}

/// Centre crop to a square, resize to `size` and expand gray to RGB.
pub fn prepare_training_image(image: &LdrImage, size: usize) -> Result<Tensor> {
    let t = imageio::to_tensor(image);
    let side = image.width.min(image.height);
    let (x0, y0) = ((image.width - side) / 2, (image.height - side) / 2);
    let cropped =
        Tensor::from_fn(Shape::new(1, 3, side, side), |_, c, y, x| t.at(0, c.min(image.channels - 1), y + y0, x + x0));
    if side == size {
        return Ok(cropped);
    }
    baselines::resize_tensor(&cropped, size, size, Filter::Bicubic)
}

/// Stacks the single output channel into three identical channels.
pub fn replicate3(gray: &Tensor) -> Result<Tensor> {
    ops::replicate_channels(gray, 3)
}

fn check_finite(loss: f32, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at iteration {iteration}")))
    }
}

/// Restores a 3-channel, input-sized image from the net output so the loss
/// always compares tensors of identical shape.
fn shape_parity(graph: &mut Graph, task: Task, output: NodeId, factor: usize) -> Result<NodeId> {
    match task {
        Task::Downscale => graph.upsample_nearest(output, factor),
        Task::Decolorize => graph.replicate3(output),
        Task::Tonemap => Ok(output),
    }
}

/// One forward/backward pass; returns the loss and the parameter gradients.
fn loss_and_grads(
    net: &TransformNet,
    lossnet: &LossNetwork,
    input: &Tensor,
    target: &Tensor,
    taps: &TapSet,
) -> Result<(f32, Vec<Tensor>)> {
    let mut graph = Graph::new();
    let x = graph.constant(input.clone());
    let t = if std::ptr::eq(input, target) { x } else { graph.constant(target.clone()) };
    let params = net.param_nodes(&mut graph);
    let y = net.forward_graph(&mut graph, x, &params)?;
    let y = shape_parity(&mut graph, net.task(), y, net.scale_factor())?;
    let (st, sy) = (graph.value(t).shape(), graph.value(y).shape());
    if st != sy {
        return Err(Error::Shape(format!("loss operands differ in shape: {st} vs {sy}")));
    }
    let loss = lossnet.perceptual_loss_node(&mut graph, t, y, taps)?;
    let value = graph.value(loss).item();
    let mut grads = graph.backward(loss)?;
    let grads = params.iter().map(|&p| grads.take(p).expect("parameters always receive a gradient")).collect();
    Ok((value, grads))
}

/// Feature perceptual loss of `net` on `images`, without updating anything.
pub fn evaluate_loss(net: &TransformNet, lossnet: &LossNetwork, images: &Tensor, taps: &TapSet) -> Result<f32> {
    let mut graph = Graph::new();
    let x = graph.constant(images.clone());
    let params: Vec<NodeId> = net.params().iter().map(|p| graph.constant(p.clone())).collect();
    let y = net.forward_graph(&mut graph, x, &params)?;
    let y = shape_parity(&mut graph, net.task(), y, net.scale_factor())?;
    let loss = lossnet.perceptual_loss_node(&mut graph, x, y, taps)?;
    Ok(graph.value(loss).item())
}

fn train_offline(
    task: Task,
    corpus: &Corpus,
    lossnet: &LossNetwork,
    config: &TaskConfig,
) -> Result<(TransformNet, TrainReport)> {
    config.validate()?;
    if config.task != task {
        return Err(Error::TaskMismatch(format!("config is for {}, training {task}", config.task)));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("the training corpus is empty".into()));
    }
    let loss_checksum = lossnet.checksum();
    let mut net = TransformNet::build(task, config.net_shape(), config.seed)?;
    let mut adam = AdamState::new(config.learning_rate, net.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::new();
    let mut epoch_seconds = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let images: Vec<Tensor> = batch.iter().map(|&i| corpus.images[i].clone()).collect();
            let x = Tensor::stack(&images)?;
            let (loss, grads) = loss_and_grads(&net, lossnet, &x, &x, &config.taps)?;
            check_finite(loss, losses.len())?;
            losses.push(loss);
            adam.step(net.params_mut(), &grads)?;
        }
        epoch_seconds.push(start.elapsed().as_secs_f64());
    }

    let report = TrainReport {
        task,
        losses,
        final_loss: None,
        epoch_seconds,
        net_checksum: net.checksum(),
        loss_network_checksum: loss_checksum,
        rescale: None,
    };
    Ok((net, report))
}

/// Trains the downscaler: the net output is upsampled back by nearest
/// neighbour and compared with the input through the loss network.
pub fn train_downscaler(
    corpus: &Corpus,
    lossnet: &LossNetwork,
    config: &TaskConfig,
) -> Result<(TransformNet, TrainReport)> {
    train_offline(Task::Downscale, corpus, lossnet, config)
}

/// Trains the decolorizer: the single gray output channel is replicated into
/// three channels and compared with the colour input.
pub fn train_decolorizer(
    corpus: &Corpus,
    lossnet: &LossNetwork,
    config: &TaskConfig,
) -> Result<(TransformNet, TrainReport)> {
    train_offline(Task::Decolorize, corpus, lossnet, config)
}

/// `alpha * ln(radiance + eps_log)` per channel, as a 1x3xHxW tensor.
pub fn log_compress(hdr: &HdrImage, alpha: f32, eps_log: f32) -> Result<Tensor> {
    if alpha.is_nan() || alpha <= 0.0 || eps_log.is_nan() || eps_log <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "log compression needs alpha > 0 and eps > 0, got {alpha}, {eps_log}"
        )));
    }
    if let Some(v) = hdr.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("corrupt radiance value {v}")));
    }
    Ok(hdr.to_tensor().map(|r| alpha * (r + eps_log).ln()))
}

/// Maps compressed log radiance onto the 0..255 loss-network scale with a
/// fixed gain: the midpoint of the compressed range lands on 127.5 and
/// [`REFERENCE_LOG_SPAN`] spans the full display range. Larger `alpha` thus
/// yields a wider target the range-compressing net must fold into `[0, 255]`.
pub fn rescale_for_loss(compressed: &Tensor) -> (Tensor, LogRescale) {
    let center = 0.5 * (compressed.min() + compressed.max());
    let gain = 255.0 / REFERENCE_LOG_SPAN;
    let rescaled = compressed.map(|c| 127.5 + gain * (c - center));
    (rescaled, LogRescale { center, gain })
}

/// Unclamped display values `(C_in / L_in)^gamma * L_out` per channel, with 0
/// where the input luminance is 0.
pub fn render_display_values(hdr: &HdrImage, net_output: &Tensor, gamma: f32) -> Result<Tensor> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} is outside (0, 1]")));
    }
    let s = net_output.shape();
    if s != Shape::new(1, 3, hdr.height, hdr.width) {
        return Err(Error::Shape(format!("net output {s} does not match a {}x{} radiance map", hdr.width, hdr.height)));
    }
    let mut out = vec![0.0f32; s.len()];
    let plane = s.plane_len();
    for y in 0..hdr.height {
        for x in 0..hdr.width {
            let rgb_in = hdr.pixel(x, y);
            let l_in = luminance_rgb(rgb_in);
            let rgb_net = [0, 1, 2].map(|c| net_output.at(0, c, y, x));
            let l_out = luminance_rgb(rgb_net);
            let i = y * hdr.width + x;
            for c in 0..3 {
                out[c * plane + i] = if l_in > 0.0 { (rgb_in[c] / l_in).powf(gamma) * l_out } else { 0.0 };
            }
        }
    }
    Tensor::new(s, out)
}

/// Colour rendering of a tone-mapped luminance, clamped and quantised.
pub fn render_display(hdr: &HdrImage, net_output: &Tensor, gamma: f32) -> Result<LdrImage> {
    imageio::from_tensor(&render_display_values(hdr, net_output, gamma)?)
}

/// Outcome of online tone mapping.
#[derive(Debug, Clone)]
pub struct Tonemapped {
    pub image: LdrImage,
    pub report: TrainReport,
    pub net: TransformNet,
    /// Raw net output before colour rendering, 1x3xHxW.
    pub net_output: Tensor,
}

/// Fits a fresh tone-mapping net to a single radiance map and renders it.
pub fn tonemap_online(hdr: &HdrImage, lossnet: &LossNetwork, config: &TaskConfig) -> Result<Tonemapped> {
    config.validate()?;
    let loss_checksum = lossnet.checksum();
    let compressed = log_compress(hdr, config.alpha, config.eps_log)?;
    let (target, rescale) = rescale_for_loss(&compressed);
    let mut net = TransformNet::build(Task::Tonemap, config.net_shape(), config.seed)?;
    let mut adam = AdamState::new(config.learning_rate, net.params());
    let mut losses = Vec::with_capacity(config.iterations);
    let start = Instant::now();
    for i in 0..config.iterations {
        let (loss, grads) = loss_and_grads(&net, lossnet, &target, &target, &config.taps)?;
        check_finite(loss, i)?;
        losses.push(loss);
        adam.step(net.params_mut(), &grads)?;
    }
    let final_loss = evaluate_loss(&net, lossnet, &target, &config.taps)?;
    check_finite(final_loss, config.iterations)?;
    let net_output = net.forward(&target)?;
    let image = render_display(hdr, &net_output, config.gamma)?;
    let report = TrainReport {
        task: Task::Tonemap,
        losses,
        final_loss: Some(final_loss),
        epoch_seconds: vec![start.elapsed().as_secs_f64()],
        net_checksum: net.checksum(),
        loss_network_checksum: loss_checksum,
        rescale: Some(rescale),
    };
    Ok(Tonemapped { image, report, net, net_output })
}

/// Pads the bottom and right edges by replication up to multiples of `f`.
fn pad_to_multiple(t: &Tensor, f: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s.h.div_ceil(f) * f, s.w.div_ceil(f) * f);
    if (h, w) == (s.h, s.w) {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| t.at(n, c, y.min(s.h - 1), x.min(s.w - 1)))
}

/// Runs a trained downscaler or decolorizer on a display image.
///
/// Downscaling an extent that is not a multiple of the net's factor pads by
/// edge replication first, giving an output of `ceil(extent / factor)`.
pub fn apply(net: &TransformNet, image: &LdrImage) -> Result<LdrImage> {
    if net.task() == Task::Tonemap {
        return Err(Error::TaskMismatch("tone-mapping nets apply to radiance maps, not display images".into()));
    }
    if image.channels != 3 {
        return Err(Error::TaskMismatch(format!("the {} net expects a colour image", net.task())));
    }
    let x = imageio::to_tensor(image);
    let x = match net.task() {
        Task::Downscale => pad_to_multiple(&x, net.scale_factor()),
        _ => x,
    };
    imageio::from_tensor(&net.forward(&x)?)
}

/// Runs a tone-mapping net on a radiance map and renders the result.
pub fn apply_hdr(net: &TransformNet, hdr: &HdrImage, config: &TaskConfig) -> Result<LdrImage> {
    if net.task() != Task::Tonemap {
        return Err(Error::TaskMismatch(format!("the {} net cannot tone map a radiance map", net.task())));
    }
    let (target, _) = rescale_for_loss(&log_compress(hdr, config.alpha, config.eps_log)?);
    render_display(hdr, &net.forward(&target)?, config.gamma)
}

/// Checkpoint sidecar: the resolved config and the run's report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TaskConfig,
    pub report: TrainReport,
}

pub fn sidecar_path(net_path: &Path) -> PathBuf {
    let mut name = net_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the net's weight archive to `path` and the sidecar next to it.
pub fn save_checkpoint(net: &TransformNet, config: &TaskConfig, report: &TrainReport, path: &Path) -> Result<()> {
    net.to_archive().save(path)?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&Checkpoint { config: config.clone(), report: report.clone() })
        .expect("checkpoint serialises");
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}
