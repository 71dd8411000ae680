//! Joint brain extraction, affine registration and atlas-guided segmentation,
//! trained end to end from a single labelled template.
pub mod affine;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod evaluate;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod resample;
pub mod train;
pub mod volume;
pub use error::{CoreError, Result};
