//! Domain adaptation by image translation with ground-truth preservation.
//!
//! Everything runs on a procedurally generated toy world: a source domain
//! with full annotations and an unannotated target domain that differs only
//! in appearance.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod grid;
pub mod eval;
pub mod labels;
pub mod losses;
pub mod nets;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
