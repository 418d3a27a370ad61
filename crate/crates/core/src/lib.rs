//! Temporal action detection over pre-extracted feature sequences.
//!
//! Features pass through a convolutional embedding and a pyramid of SGP
//! blocks; shared heads classify every instant of every level and predict
//! its boundaries as expectations over neighbouring instants. Everything runs
//! on a small reverse-mode autodiff engine over `f64` tensors.

pub mod annotation;
pub mod assign;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod head;
pub mod infer;
pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod param;
pub mod pyramid;
pub mod rank;
pub mod sgp;
pub mod tensor;
pub mod train;

pub use config::{HeadKind, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use exec::Execution;
pub use model::Model;
pub use tensor::Tensor;
