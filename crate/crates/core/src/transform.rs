//! The learnable transformation networks.
//!
//! * downscale: `depth` stride-2 4x4 convolutions with zero padding 1, ReLU
//!   after every layer but the last; output is 3 channels at `1/2^depth` size.
//! * decolorize: `depth` 3x3 stride-1 convolutions with replication padding 1,
//!   ReLU between layers, a single output filter.
//! * tonemap: as decolorize with 3 output filters followed by a tanh scaled to
//!   `[0, 255]`.
//!
//! Inputs arrive on a 0..255 scale and are mapped to `[-1, 1]` before the first
//! convolution; the linear-output nets map their result back by the inverse.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{ConvSpec, Padding};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_DEPTH: usize = 2;
/// Extra gain on the output layer's initial weights, so an untrained net
/// starts close to mid-gray.
pub const OUTPUT_INIT_GAIN: f32 = 0.1;
pub const DISPLAY_RANGE: (f32, f32) = (0.0, 255.0);

const INPUT_SCALE: f32 = 1.0 / 127.5;
const INPUT_SHIFT: f32 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Downscale,
    Decolorize,
    Tonemap,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Downscale, Task::Decolorize, Task::Tonemap];

    pub fn name(self) -> &'static str {
        match self {
            Task::Downscale => "downscale",
            Task::Decolorize => "decolorize",
            Task::Tonemap => "tonemap",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// Width and depth of a transformation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape { hidden: DEFAULT_HIDDEN, depth: DEFAULT_DEPTH }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    kernel: usize,
    spec: ConvSpec,
    relu: bool,
}

fn layer_plan(task: Task, shape: NetShape) -> Result<Vec<ConvLayer>> {
    let NetShape { hidden, depth } = shape;
    if hidden == 0 {
        return Err(Error::InvalidArgument("hidden width must be positive".into()));
    }
    let min_depth = if task == Task::Downscale { 1 } else { 2 };
    if depth < min_depth || (task == Task::Downscale && depth > 3) {
        return Err(Error::InvalidArgument(format!("depth {depth} is not supported for {task}")));
    }
    let (kernel, spec, out) = match task {
        Task::Downscale => (4, ConvSpec::new((2, 2), Padding::Zero(1)), 3),
        Task::Decolorize => (3, ConvSpec::new((1, 1), Padding::Replicate(1)), 1),
        Task::Tonemap => (3, ConvSpec::new((1, 1), Padding::Replicate(1)), 3),
    };
    Ok((0..depth)
        .map(|i| {
            let last = i + 1 == depth;
            ConvLayer {
                cin: if i == 0 { 3 } else { hidden },
                cout: if last { out } else { hidden },
                kernel,
                spec,
                relu: !last,
            }
        })
        .collect())
}

/// A transformation network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformNet {
    task: Task,
    shape: NetShape,
    seed: u64,
    layers: Vec<ConvLayer>,
    /// Weight then bias for each layer.
    params: Vec<Tensor>,
}

impl TransformNet {
    /// Builds the architecture for `task` with He-initialised weights and zero biases.
    pub fn build(task: Task, shape: NetShape, seed: u64) -> Result<Self> {
        let layers = layer_plan(task, shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * layers.len());
        for l in &layers {
            let fan_in = l.cin * l.kernel * l.kernel;
            let mut std = (2.0 / fan_in as f32).sqrt();
            if !l.relu {
                std *= OUTPUT_INIT_GAIN;
            }
            params.push(Tensor::normal(Shape::new(l.cout, l.cin, l.kernel, l.kernel), std, &mut rng));
            params.push(Tensor::zeros(Shape::new(1, l.cout, 1, 1)));
        }
        Ok(TransformNet { task, shape, seed, layers, params })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn net_shape(&self) -> NetShape {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Spatial reduction factor (1 for the extent-preserving nets).
    pub fn scale_factor(&self) -> usize {
        match self.task {
            Task::Downscale => 1 << self.layers.len(),
            _ => 1,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cout)
    }

    /// Shapes of the parameter tensors in order.
    pub fn param_shapes(&self) -> Vec<Shape> {
        self.params.iter().map(Tensor::shape).collect()
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != 3 {
            return Err(Error::Shape(format!("{} net expects 3-channel input, got {shape}", self.task)));
        }
        let f = self.scale_factor();
        if !shape.h.is_multiple_of(f) || !shape.w.is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "{} net needs height and width divisible by {f}, got {}x{}",
                self.task, shape.h, shape.w
            )));
        }
        if self.task != Task::Downscale && (shape.h < 2 || shape.w < 2) {
            return Err(Error::Shape(format!("{} net needs at least 2x2 input", self.task)));
        }
        Ok(())
    }

    /// Records the forward pass in `graph`. `params` are the graph nodes holding
    /// this net's parameters in [`TransformNet::params`] order.
    pub fn forward_graph(&self, graph: &mut Graph, image: NodeId, params: &[NodeId]) -> Result<NodeId> {
        self.check_input(graph.value(image).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter nodes for a net with {} tensors",
                params.len(),
                self.params.len()
            )));
        }
        let mut x = graph.channel_affine(image, INPUT_SCALE, &[INPUT_SHIFT; 3])?;
        for (l, p) in self.layers.iter().zip(params.chunks(2)) {
            x = graph.conv2d(x, p[0], Some(p[1]), l.spec)?;
            if l.relu {
                x = graph.relu(x);
            }
        }
        match self.task {
            Task::Tonemap => graph.scaled_tanh(x, DISPLAY_RANGE.0, DISPLAY_RANGE.1),
            _ => {
                let c = self.output_channels();
                graph.channel_affine(x, 1.0 / INPUT_SCALE, &vec![127.5; c])
            }
        }
    }

    /// Adds this net's parameters to `graph` as trainable leaves.
    pub fn param_nodes(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| graph.parameter(p.clone())).collect()
    }

    /// Inference on a batch of 0..255 images.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let params: Vec<NodeId> = self.params.iter().map(|p| graph.constant(p.clone())).collect();
        let input = graph.constant(image.clone());
        let out = self.forward_graph(&mut graph, input, &params)?;
        Ok(graph.value(out).clone())
    }

    pub fn architecture_name(&self) -> String {
        format!("transform/{}", self.task)
    }

    pub fn to_archive(&self) -> WeightArchive {
        let mut archive = WeightArchive::new(self.architecture_name());
        archive.metadata.insert("hidden".into(), self.shape.hidden.to_string());
        archive.metadata.insert("depth".into(), self.shape.depth.to_string());
        archive.metadata.insert("seed".into(), self.seed.to_string());
        for (i, pair) in self.params.chunks(2).enumerate() {
            archive.push(format!("conv{}.weight", i + 1), pair[0].shape().as_array().to_vec(), pair[0].data().to_vec());
            archive.push(format!("conv{}.bias", i + 1), vec![pair[1].len()], pair[1].data().to_vec());
        }
        archive
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let task: Task = archive
            .architecture
            .strip_prefix("transform/")
            .ok_or_else(|| Error::Format(format!("`{}` is not a transformation network", archive.architecture)))?
            .parse()?;
        let meta = |key: &str| -> Result<u64> {
            let v = archive.metadata_value(key)?;
            v.parse().map_err(|_| Error::Archive { name: key.into(), reason: format!("not an integer: `{v}`") })
        };
        let shape = NetShape { hidden: meta("hidden")? as usize, depth: meta("depth")? as usize };
        let mut net = TransformNet::build(task, shape, meta("seed")?)?;
        for (i, l) in net.layers.iter().enumerate() {
            let w = archive.expect(&format!("conv{}.weight", i + 1), &[l.cout, l.cin, l.kernel, l.kernel])?;
            let b = archive.expect(&format!("conv{}.bias", i + 1), &[l.cout])?;
            net.params[2 * i] = Tensor::new(Shape::new(l.cout, l.cin, l.kernel, l.kernel), w.data.clone())?;
            net.params[2 * i + 1] = Tensor::new(Shape::new(1, l.cout, 1, 1), b.data.clone())?;
        }
        Ok(net)
    }

    pub fn checksum(&self) -> String {
        self.to_archive().checksum()
    }
}
