//! Style-guided photo-to-anime translation.

pub mod discriminator;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod normalization;
pub mod params;
pub mod trainer;
pub mod types;

pub use discriminator::{Discriminator, DiscriminatorConfig, FeatureTaps};
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{AdvForm, LossReport, LossWeights};
pub use stylefat_autograd::{self as autograd, Scalar, Tensor};
pub use trainer::{TrainConfig, TrainState, Variant};
pub use types::{DomainTag, ImageBatch, UnpairedBatch};
