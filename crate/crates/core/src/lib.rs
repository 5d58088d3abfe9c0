//! Hierarchy-constrained cognitive diagnosis.
//!
//! A self-contained training and inference engine for level-aware student
//! knowledge diagnosis: a minimal reverse-mode autodiff tape, response-log
//! ingestion and synthesis, convolution-enhanced intra-level attention plus
//! inter-level sampling attention, four base interaction functions (IRT,
//! MIRT, DINA, NCDM), joint Adam training, and property-checked metrics.

// indexed loops over small dense matrices are the house style here
#![allow(clippy::needless_range_loop)]

pub mod array;
pub mod autodiff;
pub mod cdm;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;

pub use array::Array;
pub use error::{HcdError, Result};
