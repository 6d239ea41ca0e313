//! Agentic probing for no-reference image quality assessment at desk scale.
//!
//! Synthetic benchmark forging, Thurstone ranking rewards, GRPO math, crop
//! trajectory synthesis, correlation metrics and a grid-world curriculum.

pub mod cli;
pub mod error;
pub mod eval;
pub mod forge;
pub mod grpo;
pub mod model;
pub mod probe;
pub mod rank;
pub mod rewards;
pub mod sim;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::{BenchmarkItem, DefectKind, DefectRecord, Raster, Region};
