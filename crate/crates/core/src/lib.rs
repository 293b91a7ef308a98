//! Joint multi-view and UV texture sequence generation with rectified flow
//! matching on procedural assets.

pub mod dataset;
pub mod error;
pub mod geomesh;
pub mod grid;
pub mod muvnet;
pub mod nn;
pub mod sampler;
pub mod seqspace;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::Grid;
