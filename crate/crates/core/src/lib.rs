//! Single-stage video instance segmentation with dynamic mask heads, a
//! contrastively trained tracking head and online memory-bank association.

pub mod assign;
pub mod cli;
pub mod consistency;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod trackloss;

pub use error::{Error, Result};
pub use geometry::{BBox, Mask};
