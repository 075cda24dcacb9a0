//! Ensemble segmentation of 3D volumes with assemblies of tile-local U-Nets.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`volume`]: grids, intensity and label volumes, normalization, resampling, AVOL files
//! * [`tiling`]: overlapping tile grids and coverage queries
//! * [`nn3d`]: a small differentiable 3D U-Net with Dice loss, Adam, dropout and MixUp
//! * [`scheduler`]: nearest-neighbour transfer DAG and parallel assembly training
//! * [`inference`]: MC-dropout inference, majority voting and the coarse-to-fine cascade
//! * [`priors`]: synthetic atlas prior channel
//! * [`ssl`]: teacher-student pseudo-labelling
//! * [`evaluation`]: Dice, scan-rescan consistency, Wilcoxon and Mann-Whitney tests
//! * [`phantom`]: synthetic labelled phantoms and rescan simulation
//! * [`pipeline`]: subjects, cascade training and experiment reports

pub mod error;
pub mod evaluation;
pub mod inference;
pub mod nn3d;
pub mod phantom;
pub mod pipeline;
pub mod priors;
pub mod rng;
pub mod scheduler;
pub mod ssl;
pub mod tiling;
pub mod volume;

pub use error::{Error, Result};
