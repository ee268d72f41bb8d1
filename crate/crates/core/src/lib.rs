//! Laplacian autoencoder.
//!
//! A small dense neural-network library with a generalized Gauss-Newton
//! curvature engine. Diagonal Laplace posteriors over the weights are fitted
//! post hoc or trained online, and the uncertainty of sampled networks drives
//! the evaluations in [`tasks`].

pub mod arch;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod curvature;
pub mod dataio;
pub mod error;
pub mod loss;
pub mod net;
pub mod posterior;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use curvature::{ggn_backprop, CurvatureResult, CurvatureState, HessianMode};
pub use error::{Error, Result};
pub use loss::LossModel;
pub use net::{ArchSpec, Batch, LayerSpec, Network, ParamVector};
pub use posterior::{DiagGaussianPosterior, InitScheme, UncertaintySummary};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainReport};
