//! Hyper-parameter tuning on adaptively selected, gradient-matched data
//! subsets.
//!
//! Candidate configurations come from a [`search`] algorithm (random or TPE),
//! receive epochs from a [`scheduler`] (SHA, Hyperband, ASHA) and are trained
//! on per-batch coresets picked by [`coreset`] so that the weighted subset
//! gradient tracks the full training gradient. [`tuner`] glues the pieces
//! together and accounts every sample-gradient evaluation so speedups against
//! full-data tuning can be reported.

pub mod coreset;
pub mod dataio;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scheduler;
pub mod search;
pub mod tuner;

pub use coreset::{Coreset, SelectionConfig, Strategy};
pub use dataio::{BatchPlan, Dataset, SplitTag};
pub use model::{CostMeter, LossReport, MlpModel, OptimizerConfig};
pub use scheduler::{SchedulerConfig, SchedulerKind, TraceEvent};
pub use search::{ConfigSample, ObservationHistory, ParamSpace, Searcher};
pub use tuner::{ExperimentConfig, TuneReport};
