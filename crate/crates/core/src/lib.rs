//! Gap-filling and prediction of ground-level pollutant concentration grids.
//!
//! The pipeline has two halves:
//!
//! 1. **Fusion** ([`fusion`]): reconstructs missing satellite grid cells from
//!    prior satellite fields and co-temporal ground-station observations, using
//!    local linear temporal projection, similarity-thresholded neighborhoods
//!    with inverse-distance weights, and multi-temporal variance weighting.
//! 2. **Regression** ([`vit`], [`training`]): a from-scratch transformer
//!    regressor over patchified concentration grids, trained with Adam on a
//!    masked loss under five-fold cross-validation, with a per-cell linear
//!    baseline for comparison.
//!
//! [`grid`] owns the coordinate frame and station regridding, [`nn`] is the
//! minimal dense-tensor engine (every op has a hand-written backward pass),
//! and [`io`] owns file formats, the synthetic dataset generator, and
//! checkpointing.

pub mod fusion;
pub mod grid;
pub mod io;
pub mod nn;
pub mod training;
pub mod vit;

pub use grid::{cell_of, regrid_stations, Field, FieldStack, GridSpec, StationRecord};
