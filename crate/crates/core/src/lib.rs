//! Desk-scale kVCT to MVCT domain transformation for metal artifact
//! reduction: phantom simulation, preprocessing, an encoder-decoder
//! network trained with spatial and spectral losses, masked evaluation and
//! the loss/weight ablation studies.

pub mod dataio;
pub mod error;
pub mod experiments;
pub mod phantom;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
