//! CurvFiFE: curve fitting from emissions.
//!
//! Fits a distribution over a latent continuous-time curve `y(t)` given
//! "emissions": observations tied to the curve value at a known time through
//! an arbitrary likelihood `f_i(y(t_i))`, not just Gaussian noise. A
//! Gaussian-process prior (RBF covariance) is combined with the emission
//! factors by *grafting*: each non-Gaussian factor is iteratively replaced
//! with a moment-matched Gaussian factor, after which the posterior over the
//! curve at any set of times is an ordinary multivariate Gaussian.
//!
//! The top-level entry points live in [`curve`]: [`curve::fit`] produces a
//! [`curve::CurveDistribution`] that answers mean/covariance queries at
//! arbitrary times, and [`curve::select_bandwidth`] chooses the RBF time
//! scale by k-fold cross validation.

pub mod curve;
pub mod emissions;
pub mod error;
pub mod grafting;
pub mod kernel;
pub mod transform;

pub use curve::{fit, fit_warm, select_bandwidth, BandwidthSelection, CurveDistribution};
pub use emissions::{EmissionTriplet, GridSpec, TiltedMoments};
pub use error::{Error, Result};
pub use grafting::{GaussianFactorSet, GraftOutcome, IterationControl, MessageSet};
pub use kernel::KernelParams;
pub use transform::Transform;
