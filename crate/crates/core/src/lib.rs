//! Feature-enhanced spatial segmentation loss with baselines, metrics,
//! a minimal 3D U-Net, synthetic volumetric data and experiment
//! protocols, all in 64-bit reals with reproducible seeding.

pub mod config;
pub mod data;
pub mod experiments;
pub mod grad;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rng;
pub mod trainer;
pub mod volume;

pub use grad::check::{finite_diff_check, check_tape_gradient, CheckReport};
pub use grad::{GradError, Node, Tape};
pub use volume::{BinaryMask, ElemOp, Volume, VolumeError};
