//! Trajectory representation learning with programmed decoder tasks.

#[cfg(feature = "blas")]
extern crate blas_src;

pub mod augment;
pub mod diff;
pub mod eval;
pub mod harness;
pub mod programs;
pub mod scalar;
pub mod tasks;
pub mod trajectory;
pub mod tvae;

pub use scalar::Scalar;

pub type ParameterStoreF32 = diff::ParameterStore<f32>;
pub type ParameterStoreF64 = diff::ParameterStore<f64>;
pub type TapeF32 = diff::Tape<f32>;
pub type TapeF64 = diff::Tape<f64>;
pub type EmbeddingModelF32 = tasks::EmbeddingModel<f32>;
pub type EmbeddingModelF64 = tasks::EmbeddingModel<f64>;
pub type ClassifierF32 = eval::Classifier<f32>;
pub type ClassifierF64 = eval::Classifier<f64>;
