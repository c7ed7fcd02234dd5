//! Procedural neural textures: seeded multi-octave lattice noise read through
//! learned per-octave transforms and decoded point-wise by a small MLP.

pub mod archive;
pub mod encoder;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod sampler;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod transform;

pub use archive::TensorArchive;
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use image::Image;
pub use model::{Mode, TextureModel};
pub use noise::{NoiseSpec, TransformSet};
pub use params::{Bound, ParamStore};
pub use perceptual::{ExtractorKind, FeatureExtractor, StyleDistance};
pub use sampler::{GridSpec, Sampler, SamplerConfig, Texture, TextureVars, Variant};
pub use tensor::{Gradients, Scalar, Tape, Tensor, Var};
pub use trainer::{TrainConfig, TrainState, Trainer};

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
