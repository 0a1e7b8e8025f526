//! Multimodal recommender unlearning workbench: a small embedding
//! recommender with ID/image/text branches, targeted reverse-update
//! unlearning with uniform and exact-retrain baselines, and ranking,
//! privacy, backdoor, and structural audits.
//!
//! Everything numeric is generic over the scalar type via [`scalar::Real`]
//! (`f32` or `f64`); the `*64` aliases below are the concrete types the
//! CLI uses.

pub mod audit;
pub mod bpr;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
mod rng;
pub mod scalar;
pub mod train;
pub mod unlearn;

pub use error::{Error, Result};

/// Concrete f64 instantiations, the defaults throughout the CLI.
pub type Matrix64 = linalg::Matrix<f64>;
pub type Dataset64 = dataset::InteractionDataset<f64>;
pub type Model64 = model::Model<f64>;
pub type GradientMap64 = bpr::GradientMap<f64>;

/// f32 instantiations for memory-constrained runs.
pub type Matrix32 = linalg::Matrix<f32>;
pub type Dataset32 = dataset::InteractionDataset<f32>;
pub type Model32 = model::Model<f32>;
pub type GradientMap32 = bpr::GradientMap<f32>;
