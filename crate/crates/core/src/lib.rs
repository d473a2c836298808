//! Neighborhood-aware joint-distribution optimal transport for low-resource
//! transfer over fixed sentence embeddings.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod neighbors;
pub mod ot;
pub mod trainer;

pub use config::{LabelCost, Method, TrainConfig};
pub use data::{Dataset, DiscreteMeasure, LabeledInstance, Role};
pub use error::{Error, Result};
pub use model::ModelParams;
pub use ot::{CostMatrix, OTParams, TransportPlan};
