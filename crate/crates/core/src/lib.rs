//! Language-binding object graph network for relational visual question
//! answering, built on a small reverse-mode autodiff tape.

pub mod ablation;
pub mod answer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod log_unit;
pub mod manifest;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
