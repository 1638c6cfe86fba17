//! Localise-then-segment pipeline for labelled lumbar vertebra volumes.
//!
//! Stage one regresses, for every edge voxel of a scan, the offsets to the six
//! planes of a box around the lumbar spine and aggregates the per-voxel votes
//! with a kernel density estimate. Stage two labels sagittal slices of the
//! cropped region with a U-Net style network (background + L1..L5), after which
//! the label volume is cleaned up with per-slice closing and a largest
//! connected component filter.
//!
//! Every learner is built on the small dense/convolutional kernel in [`nn`].
//! The [`phantom`] module produces synthetic spines for training and testing.

pub mod error;
pub mod localizer;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod rng;
pub mod segmenter;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Axis, BoundingBox, Image2, IntegralVolume, LabelVolume, Volume, Window};
