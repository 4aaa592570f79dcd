//! Per-slide prototype banks and nearest-prototype retrieval.

mod bank;
mod kmeans;

pub use bank::*;
pub use kmeans::*;
