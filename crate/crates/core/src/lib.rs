//! Anatomical labeling of segmented airway trees.
//!
//! Branch patches are encoded by a 3D CNN; the resulting branch features are
//! refined on the branch adjacency graph by a structure- and position-aware
//! graph attention network whose positional encodings are hop distances to
//! anatomically anchored branches.

pub mod anatomy;
pub mod cli;
pub mod cnn;
pub mod error;
pub mod gnn;
pub mod graphcore;
pub mod labeling;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
