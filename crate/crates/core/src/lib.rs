//! Scene-flow estimation on point clouds: a PointConv feature pyramid, a
//! global flow embedding at the coarsest level, coarse-to-fine refinement,
//! supervised and domain-adaptive losses, metrics, data handling, and
//! training.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod geom;
pub mod global_fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod refinement;
pub mod training;

pub use error::{Error, Result};
