//! Semi-supervised segmentation with a tri-branch attention network.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), the
//! channel/spatial attention calibrators ([`attention`]), the shared-encoder
//! three-decoder network ([`mtnet`]), the training objectives ([`losses`]),
//! synthetic slide data and file formats ([`data`]), the SGD training loop
//! ([`trainer`]) and sliding-window evaluation ([`inference`]).

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod attention;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod mtnet;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use config::{Arm, RunConfig};
pub use error::{Error, Result};
pub use graph::{Graph, PoolMode, Var};
pub use tensor::{DType, Float, Tensor};
