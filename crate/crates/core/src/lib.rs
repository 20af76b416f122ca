//! Differentiable Tikhonov-regularized SVD deconvolution of perfusion series.
//!
//! The crate builds the Volterra system of an arterial input function (AIF),
//! deconvolves every tissue curve of a 4D series into a residue function,
//! turns the peak flow into relative CBF and a lesion probability map, and
//! scores it with a soft-Dice loss. The whole chain is differentiable with
//! respect to the AIF samples, so the AIF itself can be optimized against a
//! ground-truth lesion mask.
//!
//! `no_std` with `alloc`; file formats and the command line live in the
//! companion `aifopt-cli` crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

mod error;
mod math;

pub mod curves;
pub mod deconv;
pub mod grad;
pub mod lesion;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod smoothing;
pub mod volume;

pub use crate::curves::{delay_curve, gamma_variate, scale_curve, GammaVariateParams, TimeAxis, TimeSeries};
pub use crate::deconv::{
    build_volterra, cbf_from_residue, deconvolve_volume, factorize, normalize_rcbf, solve_residue,
    FilterMode, ResidueCurve, VolterraSystem,
};
pub use crate::error::{Error, Result};
pub use crate::grad::{backward, finite_difference_gradient, forward_with_tape, GradientVector, PipelineTape};
pub use crate::lesion::{binarize, lesion_probability, soft_dice_loss, LesionProbabilityMap};
pub use crate::pipeline::PipelineConfig;
pub use crate::volume::{BinaryMask3D, Dims3, ScalarMap3D, Volume4D};
