//! Decoupled context encoding for retrieval-augmented language models.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod store;
pub mod training;
pub mod utility;

pub use error::{Error, Result};
pub use model::{Encoding, Model, ModelConfig};
pub use retrieval::{Embedder, EmbedderConfig};
pub use scalar::Scalar;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Embedder32 = Embedder<f32>;
pub type Embedder64 = Embedder<f64>;
pub type Encoding32 = Encoding<f32>;
