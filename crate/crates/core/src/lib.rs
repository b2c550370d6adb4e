//! Desk-scale text-based person search with visual feature enhancement.
//!
//! The crate trains a pair of small transformer encoders so that a caption
//! and a pedestrian image of the same person land close together in a shared
//! embedding space. Two training-only auxiliary tasks sharpen the image
//! encoder: text-guided masked image modeling ([`tgmim`]) and
//! identity-supervised calibration of global visual features ([`isgvfc`]).
//! Retrieval at inference time uses only the global features ([`alignment`]).

pub mod alignment;
pub mod encoders;
pub mod error;
pub mod isgvfc;
pub mod metrics;
pub mod synthdata;
pub mod tensor;
pub mod tgmim;
pub mod trainer;

pub use error::{Error, Result};
