//! Multi-task retinal vessel segmentation and artery/vein classification.
//!
//! The crate covers the whole pipeline: raster I/O, vessel-enhancing
//! preprocessing, a small reverse-mode autodiff engine, the encoder-decoder
//! network with a spatial activation block, training, stitched full-image
//! inference and the evaluation protocol.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod network;
pub mod preprocess;
pub mod training;

pub use autodiff::{BnMode, Real, Tape, Tensor, Var};
pub use error::{Error, Result};
