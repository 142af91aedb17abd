//! Cross-block sentence representation fusion with a nested spatial/frequency
//! selector, together with the small transformer encoder and contrastive
//! training loop used to exercise it.

pub mod encoder;
pub mod error;
pub mod numerics;
pub mod selector;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
