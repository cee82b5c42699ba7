//! Warped functional analysis of variance.
//!
//! This crate fits one-way random-effects models to functional/longitudinal
//! data in which curves vary both in amplitude and in the timing of their
//! features. Timing variation is modeled explicitly through a family of
//! monotone Hermite-spline warping functions whose landmark vectors are
//! Gaussian random effects on an unconstrained (Jupp-transformed) scale;
//! amplitude variation is modeled through Karhunen-Loeve style spline
//! components for the group factor and the residual term.
//!
//! The main entry points are:
//!
//! * [`estimation::fit_warped_anova`] - maximum likelihood via Monte Carlo EM,
//! * [`estimation::fit_common_anova`] - the classical (unwarped) functional ANOVA,
//! * [`estimation::fit_two_step`] - least-squares registration followed by
//!   common ANOVA on the aligned data,
//! * [`inference`] - variance ratios, Fisher-information asymptotics,
//!   arcsine-square-root confidence intervals, F tests and a group bootstrap,
//! * [`simulation`] - the ten benchmark generators and the estimator
//!   comparison harness.

// Numeric code keeps full-precision constants, NaN-robust negated
// comparisons, and index-aligned loops over small matrices.
#![allow(clippy::excessive_precision)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod basis;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod model;
pub mod numeric;
pub mod simulation;
pub mod warp;

pub use basis::{GramMatrix, SplineBasis};
pub use error::{Error, Result};
pub use estimation::{Estimator, FitConfig, FitResult, PosteriorSummaries};
pub use inference::VarianceRatioReport;
pub use model::{AmplitudeScores, ModelParams, ObservationSet, WarpEffects};
pub use simulation::{ErrorReport, SimModelSpec};
pub use warp::{JuppCoords, KnotVector, WarpFunction};
