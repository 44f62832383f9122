//! The fixed feature extractor used to score transformations: a VGG-19 style
//! stack of 3x3 convolutions, ReLUs and 2x2 max pools, instantiated only up to
//! `conv5_1`. Features are read at convolution outputs, before the ReLU.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{ConvSpec, Padding};
use crate::tensor::{Shape, Tensor};

/// Per-channel RGB means of the reference VGG-19 training set on a 0..255 scale.
pub const IMAGENET_MEANS: [f32; 3] = [123.68, 116.779, 103.939];

/// Named read-out points of the loss network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    Conv1_1,
    Conv2_1,
    Conv3_1,
    Conv4_1,
    Conv5_1,
}

pub type TapSet = BTreeSet<Tap>;

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::Conv1_1, Tap::Conv2_1, Tap::Conv3_1, Tap::Conv4_1, Tap::Conv5_1];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Conv1_1 => "conv1_1",
            Tap::Conv2_1 => "conv2_1",
            Tap::Conv3_1 => "conv3_1",
            Tap::Conv4_1 => "conv4_1",
            Tap::Conv5_1 => "conv5_1",
        }
    }

    /// Parses a comma-separated tap list such as `conv1_1,conv2_1`.
    pub fn parse_set(list: &str) -> Result<TapSet> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }

    pub fn format_set(taps: &TapSet) -> String {
        taps.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
    }
}

impl serde::Serialize for Tap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> serde::Deserialize<'de> for Tap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        name.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::UnknownTap(s.to_string()))
    }
}

/// Layer configuration of a loss network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossArch {
    /// The 19-layer configuration with every width divided by `width_divisor`.
    Vgg19 { width_divisor: usize },
    /// `conv1_1 -> relu -> pool -> conv2_1`, `width` filters each; for tests.
    Tiny { width: usize },
}

impl LossArch {
    pub const VGG19: LossArch = LossArch::Vgg19 { width_divisor: 1 };

    fn descriptor(self) -> Vec<Layer> {
        match self {
            LossArch::Vgg19 { width_divisor } => {
                let widths = [64, 128, 256, 512, 512].map(|w| (w / width_divisor).max(1));
                let convs_per_block = [2, 2, 4, 4, 1];
                let mut layers = Vec::new();
                let mut cin = 3;
                for (block, (&width, &count)) in widths.iter().zip(&convs_per_block).enumerate() {
                    if block > 0 {
                        layers.push(Layer::MaxPool);
                    }
                    for i in 0..count {
                        layers.push(Layer::Conv { name: format!("conv{}_{}", block + 1, i + 1), cin, cout: width });
                        layers.push(Layer::Relu);
                        cin = width;
                    }
                }
                layers
            }
            LossArch::Tiny { width } => vec![
                Layer::Conv { name: "conv1_1".into(), cin: 3, cout: width },
                Layer::Relu,
                Layer::MaxPool,
                Layer::Conv { name: "conv2_1".into(), cin: width, cout: width },
                Layer::Relu,
            ],
        }
    }
}

impl fmt::Display for LossArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossArch::Vgg19 { width_divisor: 1 } => f.write_str("vgg19"),
            LossArch::Vgg19 { width_divisor } => write!(f, "vgg19/{width_divisor}"),
            LossArch::Tiny { width } => write!(f, "tiny/{width}"),
        }
    }
}

impl FromStr for LossArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown loss-network architecture `{s}`"));
        let number = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
        match s.split_once('/') {
            None if s == "vgg19" => Ok(LossArch::VGG19),
            Some(("vgg19", d)) => Ok(LossArch::Vgg19 { width_divisor: number(d)? }),
            Some(("tiny", w)) => Ok(LossArch::Tiny { width: number(w)? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Layer {
    Conv { name: String, cin: usize, cout: usize },
    Relu,
    MaxPool,
}

#[derive(Debug, Clone)]
struct ConvParams {
    weight: Tensor,
    bias: Tensor,
}

/// Feature maps keyed by tap.
pub type FeatureMaps = BTreeMap<Tap, Tensor>;

/// A loaded, immutable loss network.
#[derive(Debug, Clone)]
pub struct LossNetwork {
    arch: LossArch,
    layers: Vec<Layer>,
    /// Parameters of the `i`-th conv layer in stack order.
    convs: Vec<ConvParams>,
    means: [f32; 3],
}

const CONV3X3: ConvSpec = ConvSpec { stride: (1, 1), padding: Padding::Zero(1) };

impl LossNetwork {
    pub fn arch(&self) -> LossArch {
        self.arch
    }

    pub fn means(&self) -> [f32; 3] {
        self.means
    }

    /// Taps this network can serve.
    pub fn available_taps(&self) -> TapSet {
        self.conv_names().filter_map(|n| n.parse().ok()).collect()
    }

    /// Output channel count at `tap`.
    pub fn tap_channels(&self, tap: Tap) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv { name, cout, .. } if name == tap.name() => Some(*cout),
            _ => None,
        })
    }

    fn conv_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { name, .. } => Some(name.as_str()),
            _ => None,
        })
    }

    /// A network with He-initialised random weights drawn from `seed`.
    pub fn random(arch: LossArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch.descriptor();
        let convs = layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { cin, cout, .. } => {
                    let std = (2.0 / (cin * 9) as f32).sqrt();
                    Some(ConvParams {
                        weight: Tensor::normal(Shape::new(*cout, *cin, 3, 3), std, &mut rng),
                        bias: Tensor::zeros(Shape::new(1, *cout, 1, 1)),
                    })
                }
                _ => None,
            })
            .collect();
        LossNetwork { arch, layers, convs, means: IMAGENET_MEANS }
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let arch: LossArch = archive.architecture.parse()?;
        let means: [f32; 3] = archive.means.as_slice().try_into().map_err(|_| Error::Archive {
            name: "means".into(),
            reason: format!("expected 3 channel means, found {}", archive.means.len()),
        })?;
        let layers = arch.descriptor();
        let mut convs = Vec::new();
        for layer in &layers {
            if let Layer::Conv { name, cin, cout } = layer {
                let w = archive.expect(&format!("{name}.weight"), &[*cout, *cin, 3, 3])?;
                let b = archive.expect(&format!("{name}.bias"), &[*cout])?;
                convs.push(ConvParams {
                    weight: Tensor::new(Shape::new(*cout, *cin, 3, 3), w.data.clone())?,
                    bias: Tensor::new(Shape::new(1, *cout, 1, 1), b.data.clone())?,
                });
            }
        }
        let net = LossNetwork { arch, layers, convs, means };
        if net.convs.iter().any(|c| !c.weight.is_finite() || !c.bias.is_finite()) {
            return Err(Error::Format("loss network weights contain NaN or infinity".into()));
        }
        Ok(net)
    }

    pub fn to_archive(&self) -> WeightArchive {
        let mut archive = WeightArchive::new(self.arch.to_string());
        archive.means = self.means.to_vec();
        for (name, p) in self.conv_names().zip(&self.convs) {
            archive.push(format!("{name}.weight"), p.weight.shape().as_array().to_vec(), p.weight.data().to_vec());
            archive.push(format!("{name}.bias"), vec![p.bias.len()], p.bias.data().to_vec());
        }
        archive
    }

    /// Reads a network from a weight archive file.
    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&WeightArchive::load(path)?)
    }

    /// Header describing the tensors an archive for `arch` must hold; the
    /// payload itself is left to external tooling.
    pub fn template_header(arch: LossArch) -> crate::archive::Header {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for layer in arch.descriptor() {
            if let Layer::Conv { name, cin, cout } = layer {
                for (suffix, shape) in [("weight", vec![cout, cin, 3, 3]), ("bias", vec![cout])] {
                    let len = shape.iter().product::<usize>() as u64;
                    tensors.push(crate::archive::TensorEntry { name: format!("{name}.{suffix}"), shape, offset });
                    offset += 4 * len;
                }
            }
        }
        crate::archive::Header {
            format: crate::archive::FORMAT_NAME.into(),
            version: crate::archive::FORMAT_VERSION,
            architecture: arch.to_string(),
            means: IMAGENET_MEANS.to_vec(),
            metadata: Default::default(),
            tensors,
        }
    }

    pub fn checksum(&self) -> String {
        self.to_archive().checksum()
    }

    fn check_taps(&self, taps: &TapSet) -> Result<()> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("the tap set is empty".into()));
        }
        let available = self.available_taps();
        match taps.iter().find(|t| !available.contains(t)) {
            Some(t) => {
                Err(Error::UnknownTap(format!("{t} (network `{}` serves {})", self.arch, Tap::format_set(&available))))
            }
            None => Ok(()),
        }
    }

    /// Runs the stack on `image` inside `graph` up to the deepest requested tap
    /// and returns the pre-activation node at each tap.
    pub fn tap_nodes(&self, graph: &mut Graph, image: NodeId, taps: &TapSet) -> Result<Vec<(Tap, NodeId)>> {
        self.check_taps(taps)?;
        let shape = graph.value(image).shape();
        if shape.c != 3 {
            return Err(Error::Shape(format!("loss network expects 3-channel input, got {shape}")));
        }
        let neg_means = self.means.map(|m| -m);
        let mut x = graph.channel_affine(image, 1.0, &neg_means)?;
        let mut found = Vec::with_capacity(taps.len());
        let mut conv_idx = 0;
        for layer in &self.layers {
            if found.len() == taps.len() {
                break;
            }
            x = match layer {
                Layer::Conv { name, .. } => {
                    let p = &self.convs[conv_idx];
                    conv_idx += 1;
                    let w = graph.constant(p.weight.clone());
                    let b = graph.constant(p.bias.clone());
                    let y = graph.conv2d(x, w, Some(b), CONV3X3)?;
                    if let Some(tap) = taps.iter().find(|t| t.name() == name) {
                        found.push((*tap, y));
                    }
                    y
                }
                Layer::Relu => graph.relu(x),
                Layer::MaxPool => graph.max_pool2(x)?,
            };
        }
        Ok(found)
    }

    /// Feature maps of `image` at every requested tap.
    pub fn extract_features(&self, image: &Tensor, taps: &TapSet) -> Result<FeatureMaps> {
        let mut graph = Graph::new();
        let input = graph.constant(image.clone());
        let nodes = self.tap_nodes(&mut graph, input, taps)?;
        Ok(nodes.into_iter().map(|(t, id)| (t, graph.value(id).clone())).collect())
    }

    /// Sum over taps of the normalised squared feature distance, as a graph node.
    pub fn perceptual_loss_node(&self, graph: &mut Graph, x: NodeId, x_hat: NodeId, taps: &TapSet) -> Result<NodeId> {
        let (sx, sy) = (graph.value(x).shape(), graph.value(x_hat).shape());
        if sx != sy {
            return Err(Error::Shape(format!("perceptual loss between mismatched images {sx} and {sy}")));
        }
        let fx = self.tap_nodes(graph, x, taps)?;
        let fy = self.tap_nodes(graph, x_hat, taps)?;
        let terms = fx
            .iter()
            .zip(&fy)
            .map(|(&(_, a), &(_, b))| graph.normalized_sq_distance(a, b))
            .collect::<Result<Vec<_>>>()?;
        graph.sum(&terms)
    }

    /// Value of the feature perceptual loss between `x` and `x_hat`.
    pub fn perceptual_loss(&self, x: &Tensor, x_hat: &Tensor, taps: &TapSet) -> Result<f32> {
        let mut graph = Graph::new();
        let a = graph.constant(x.clone());
        let b = graph.constant(x_hat.clone());
        let loss = self.perceptual_loss_node(&mut graph, a, b, taps)?;
        Ok(graph.value(loss).item())
    }
}
