//! Wind nowcasting at unobserved locations with virtual graph nodes,
//! personalized-PageRank diffusion and momentum contrastive learning.

pub mod baselines;
pub mod config;
pub mod datakit;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod features;
pub mod geo_graph;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Tape = numerics::Tape<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type SparseMatrix = numerics::SparseMatrix<f64>;
pub type GraphContext = encoder::GraphContext<f64>;
pub type MoCoQueue = objectives::MoCoQueue<f64>;
