//! Cardiac CT segmentation from low-contrast images with labels transferred
//! from an aligned high-contrast acquisition.
//!
//! The crate is organized bottom-up:
//!
//! - [`volume`] and [`io`]: voxel grids with physical geometry and the
//!   `MVOL1` header + raw on-disk format.
//! - [`preprocess`]: Gaussian smoothing, isotropic resampling, intensity
//!   windowing and 2.5D slab extraction.
//! - [`nn`]: tensors, layers with analytic backward passes, the residual
//!   FCN and its checkpoint format.
//! - [`training`]: soft-Dice loss, Adam, learning-rate schedule, fold
//!   planning, batch sampling, the training loop and ensemble inference.
//! - [`postprocess`]: argmax decoding and largest-connected-component
//!   filtering.
//! - [`metrics`]: Dice, average symmetric surface distance, structure
//!   volumes and aggregate reports.
//! - [`phantom`]: synthetic paired-domain datasets sharing one label map.

pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{DType, Geometry, LabelVolume, Volume, VoxelData};

/// Number of label classes including background.
pub const NUM_CLASSES: usize = 8;

/// Short structure names indexed by class ID (0 is background).
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "LV-C", "RV", "LA", "RA", "LV-M", "AA", "PA"];

/// Column order used by tabular reports.
pub const REPORT_ORDER: [u8; 7] = [1, 5, 2, 3, 4, 6, 7];
