//! Few-shot object counting with mutual query/exemplar relation modelling.

pub mod config;
pub mod decoder;
pub mod encoder;
mod error;
mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod relation;
pub mod scenes;
pub mod train;

pub use config::{AblationVariant, EncoderConfig, ModelConfig, OptimConfig, RelationConfig, TrainConfig};
pub use error::{MafeaError, Result};
pub use model::Mafea;
pub use objectives::{EvalReport, LossWeights};
pub use params::ParamStore;
pub use scenes::{CountingSample, Dataset, SceneSpec};
