//! Gesture-to-gesture translation driven by a category label and a
//! simple-to-draw conditional map.

pub mod checkpoint;
pub mod condmap;
pub mod datapipe;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imaging;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
