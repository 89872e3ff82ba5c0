//! Cine-MR myocardial texture classification: volume alignment, myocardial
//! patch extraction, a small convolutional classifier with patch-position
//! input, and aggregation of patch probabilities into damage maps.

pub mod cli;
pub mod error;
pub mod imgvol;
pub mod nn;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod seeds;

pub use error::{Error, Result};
