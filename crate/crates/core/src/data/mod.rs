//! Synthetic slides, patch sampling and the file formats.

pub mod dataset;
pub mod image;
pub mod patches;
pub mod synth;
pub mod tnsr;

pub use dataset::{generate_dataset, load_slide, load_split, make_split, DatasetConfig, DatasetSplit};
pub use image::{write_pgm, write_ppm};
pub use patches::{augment, extract_patches, Batch, BatchSampler, PatchStore};
pub use synth::{generate_slide, generate_valid_slide, SlideParams, SyntheticSlide};
pub use tnsr::{read_tnsr, write_tnsr, TnsrMap, TnsrTensor};
