//! Numerical core for knee MRI exam classification.
//!
//! Everything here is allocation-only (`no_std` + `alloc`): slice-count
//! normalization, volume-coherent augmentation, a compact residual CNN with
//! hand-written backpropagation, Adam, class-weighted loss, rank AUC and the
//! logistic-regression plane combiner. File formats, the CLI and the
//! training driver live in the `kneemri` crate.

#![no_std]

extern crate alloc;

pub mod augment;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod resample;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Image, MriVolume, Plane, Task};
