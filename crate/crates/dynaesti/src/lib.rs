//! Dynamic ability estimation: EM alternation between per-student ability
//! curve fits (via the `curvfife` crate, with item response functions as
//! emission distributions) and per-item bounded quasi-Newton updates of the
//! item parameters. Includes the synthetic-data generator, curve/IRF quality
//! metrics, and the dynamic-vs-static hold-out protocol.

pub mod em;
pub mod error;
pub mod evaluate;
pub mod formats;
pub mod irf;
pub mod optim;
pub mod quadrature;
pub mod records;
pub mod simulate;

pub use em::{
    e_step, holdout_compare, m_step, run_em, AbilityEstimate, BandwidthPolicy, EmConfig, EmOutcome,
    EmState, HoldoutReport, Mode,
};
pub use error::{Error, Result};
pub use evaluate::{correspondence, experiment_report, irf_rmise, rmise, SampledFunction};
pub use irf::{clip_strokes, GolfItem, IrfFamily, ItemModel, StepParams, ThreePl};
pub use records::{Dataset, ResponseRecord};
pub use simulate::{sample_curves, sample_items, sample_responses, SynthConfig, TrueCurves};
