//! Online adaptation of a monocular depth predictor using low-rank refiners
//! supervised by a pseudo RGB-D pose solver.

pub mod adapt;
pub mod cli;
pub mod dce;
pub mod error;
pub mod formats;
pub mod geom;
pub mod gradcheck;
pub mod kdtree;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod oracle;
pub mod posesolver;
pub mod raster;
pub mod sdd;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
