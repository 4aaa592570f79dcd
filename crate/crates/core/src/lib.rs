pub mod autograd;
pub mod container;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod globalfusion;
pub mod ingest;
pub mod magfusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod protobank;
pub mod train;
pub mod util;

pub use error::{MmapError, Result};
