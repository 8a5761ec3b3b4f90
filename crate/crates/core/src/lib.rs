//! Purchase dynamics of group deals.
//!
//! A deal's cumulative purchase count evolves in two phases separated by an
//! inflection point. Before it, purchases arrive by random discovery and form
//! a renewal (Poisson) process. After it, purchases grow multiplicatively from
//! social propagation, damped by an exponentially decaying novelty factor.
//!
//! The crate is organised by concern:
//!
//! * [`trace`]: purchase traces, CSV/JSON ingestion, cleaning, resampling and
//!   interarrival reconstruction.
//! * [`renewal`]: exponential interarrival fits, Erlang CDFs, failure and
//!   tipping-time probabilities.
//! * [`propagation`]: novelty-decay estimation, exponential decay fits and
//!   expected log-growth.
//! * [`sim`]: seeded synthetic cohort generator for the two-phase process.
//! * [`predict`]: baseline1, baseline2, multivariate regression and the
//!   log-linear social propagation predictor, plus hybrid policies.
//! * [`eval`]: train/test evaluation by relative error.
//! * [`stats`]: least squares and goodness-of-fit utilities shared by the above.

pub mod error;
pub mod eval;
pub mod predict;
pub mod propagation;
pub mod renewal;
pub mod sim;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport, PredictorKind};
pub use predict::{Baseline2Params, HybridPolicy, MlrModel, PolicyMode, SpModel};
pub use propagation::{GrowthNoise, NoveltyDecay, PropagationModel};
pub use renewal::RenewalModel;
pub use sim::{InflectionRule, SimConfig, SimResult};
pub use trace::{CleaningReport, Dataset, DealAttributes, PurchaseTrace, TraceSample};
