//! Text-conditioned virtual IHC staining from H&E tiles.

pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod nn;
pub mod stainer;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
