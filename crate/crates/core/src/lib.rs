//! Two-stage organ/tumor segmentation of 3D MR volumes with a constant-width
//! encoder-decoder network.

pub mod container;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod pocketnet;
pub mod preprocess;
pub mod report;
pub mod training;

pub use error::{Error, Result};
