//! Multi-layer latent generator models with a joint latent-space
//! energy-based prior.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod model;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{HierarchicalModel, JointEbmPrior, LatentStack, ModelConfig};
pub use samplers::{LangevinConfig, Space};
pub use tensor::Tensor;
pub use training::{Trainer, TrainerConfig};
