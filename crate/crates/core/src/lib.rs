//! Feature-perceptual-loss training of small image transformation networks
//! for downscaling, decolorization and HDR tone mapping.
//!
//! The crate is self-contained: a tensor type with a reverse-mode autodiff
//! graph, a VGG-style loss network with weight archives, the transformation
//! nets, classical baselines and image codecs.

pub mod archive;
pub mod baselines;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod lossnet;
pub mod ops;
pub mod optim;
pub mod pipelines;
pub mod synthetic;
pub mod tensor;
pub mod transform;

pub use archive::WeightArchive;
pub use baselines::{DownscaleKind, DownscaleMethod, Filter};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use imageio::{HdrImage, LdrImage};
pub use lossnet::{FeatureMaps, LossArch, LossNetwork, Tap, TapSet};
pub use ops::{ConvSpec, Padding};
pub use optim::AdamState;
pub use pipelines::{Corpus, TaskConfig, TrainReport};
pub use tensor::{Shape, Tensor};
pub use transform::{NetShape, Task, TransformNet};
