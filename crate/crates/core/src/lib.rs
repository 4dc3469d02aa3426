//! TASSEL: attentive weakly supervised classification of object-based
//! satellite image time series.
//!
//! An object (a segment of a study area) carries one coarse label but is
//! made of many pixel time series. The pipeline partitions each object into
//! radiometric components via k-means, encodes every component with a shared
//! 1D temporal CNN, aggregates the component encodings with an attention
//! layer whose weights `alpha` are exposed as interpretable side-information,
//! and classifies the aggregate through fully connected heads. An auxiliary
//! linear classifier injects gradient directly at the aggregation level
//! during training.

pub mod components;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
