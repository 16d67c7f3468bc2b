//! Simulation library for ResNet training dynamics at three levels of
//! description: the finite `L x M` network under gradient flow, its
//! continuous-depth limit driven by the adjoint ODE, and the mean-field
//! particle flow on the empirical parameter measure. A verification harness
//! measures energy decay, depth error, and width concentration at desk scale.

pub mod activation;
pub mod continuum;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod flow_driver;
pub mod init;
pub mod manifest;
pub mod measure;
pub mod resnet_discrete;

pub use error::{Error, Result};
