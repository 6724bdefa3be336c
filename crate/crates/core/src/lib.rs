//! Collaborative descent fusion.
//!
//! Contributors repeatedly finetune a shared base model on their own
//! datasets; a repository averages the returned bodies into the next base.
//! This crate holds the numerical core (a small feed-forward classifier with
//! exact backpropagation), synthetic task families, the fusion state machine,
//! and the evaluation scenarios built on top of them.

pub mod error;
pub mod eval;
pub mod nn;
pub mod params;
pub mod protocol;
pub mod seed;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use eval::{run_scenario, EvalReport, Regime, Scenario, ScenarioConfig};
pub use nn::{init_model, Activation, Batch, Model, ModelArch};
pub use params::{Manifest, ParameterVector, TensorSpec};
pub use protocol::{
    cohort_for, contribute_local, fuse, run_iteration, run_protocol, CohortEntry, Contribution,
    HistoryRecord, InProcess, IterationDriver, RepositoryState, SubmitOutcome, TaskRegistry, ValidationPolicy,
};
pub use task::{generate_family, make_folds, sample_cohort, subsample, FoldPlan, TaskDataset, TaskFamilySpec};
pub use train::{accuracy, finetune, linear_probe, train_multitask, TrainConfig};
