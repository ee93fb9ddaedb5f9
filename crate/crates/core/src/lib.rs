//! Joint emulation and probabilistic calibration of multi-fidelity computer models.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use dataset::{CalibParam, DatasetSchema, MultiSourceDataset, Record, SourceSpec, Standardizer};
pub use error::{Error, ErrorClass, Result};
pub use loss::{LossConfig, LossReport};
pub use net::{CalibPosterior, Checkpoint, LatentTrace, Network, NetworkConfig, PredictiveDistribution};
pub use trainer::{StepConfig, TrainConfig, TrainOutcome};
