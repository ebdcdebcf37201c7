//! The temporal side network and its frozen spatial backbone.

pub mod adapters;
pub mod config;
pub mod network;
pub mod params;
pub mod vit;

use thiserror::Error;

use crate::autodiff::TensorError;

pub use config::{ModelConfig, SmeMode, TdFallback};
pub use network::{fuse_frozen, ls_cross_entropy, network_forward, ForwardOutput, TdsModel};
pub use params::{Init, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;
