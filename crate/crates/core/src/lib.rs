//! Layout-agnostic EEG foundation model: electrode dictionary, signal
//! preprocessing, a spatially-guided transformer, masked-patch pretraining,
//! layout-homogeneous batching and the fine-tuning protocol.

pub mod autodiff;
pub mod channel_dictionary;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layout_scheduler;
pub mod model;
pub mod params;
pub mod pretraining;
pub mod scalar;
pub mod signal;
pub mod synthetic_data;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
