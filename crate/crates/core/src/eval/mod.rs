//! Evaluation of base models and the comparison baselines.
//!
//! A base body is judged two ways: by finetuning it (with a fresh head) on
//! each task and by training only a linear head on top of the frozen body.

mod report;
mod scenario;

pub use report::{parse_csv, rows_to_csv, summarize, AccuracyRow, EvalReport, Regime, SummaryRow, CSV_HEADER};
pub use scenario::{run_scenario, Scenario, ScenarioConfig};

use rayon::prelude::*;

use crate::error::Result;
use crate::nn::{Model, ModelArch};
use crate::params::ParameterVector;
use crate::protocol::{cohort_for, run_iteration, RepositoryState, TaskRegistry};
use crate::task::TaskDataset;
use crate::train::{accuracy, finetune, linear_probe, train_multitask, TrainConfig};

/// Finetunes `base` (fresh head) on one task and returns its test accuracy.
pub fn finetuned_accuracy(
    base: &ParameterVector,
    arch: &ModelArch,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let start = Model::with_fresh_head(arch, base.clone(), task.n_classes())?;
    let tuned = finetune(&start, task, cfg)?;
    Ok(accuracy(&tuned, task, task.test()))
}

/// Trains a linear head on the frozen `base` and returns its test accuracy.
pub fn frozen_accuracy(
    base: &ParameterVector,
    arch: &ModelArch,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (head, _) = linear_probe(base, arch, task, cfg)?;
    let model = Model::from_parts(arch.clone(), task.n_classes(), base.clone(), head)?;
    Ok(accuracy(&model, task, task.test()))
}

/// Per-task test accuracy after finetuning from `base`; failures stay per task.
pub fn eval_base_model(
    base: &ParameterVector,
    arch: &ModelArch,
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
) -> Vec<Result<f64>> {
    tasks
        .par_iter()
        .map(|t| finetuned_accuracy(base, arch, t, cfg))
        .collect()
}

/// Per-task test accuracy of a linear probe on the frozen `base`.
pub fn eval_frozen(
    base: &ParameterVector,
    arch: &ModelArch,
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
) -> Vec<Result<f64>> {
    tasks
        .par_iter()
        .map(|t| frozen_accuracy(base, arch, t, cfg))
        .collect()
}

/// Joint multitask training of one body with a dedicated head per task.
pub fn baseline_multitask(
    base: &ParameterVector,
    tasks: &[TaskDataset],
    arch: &ModelArch,
    cfg: &TrainConfig,
) -> Result<ParameterVector> {
    train_multitask(base, arch, tasks, cfg).map(|(body, _)| body)
}

/// A single fusion round over all `tasks`, i.e. one iteration whose cohort is
/// every task, starting from `base`.
pub fn baseline_fuse_once(
    tasks: &[TaskDataset],
    base: &ParameterVector,
    arch: &ModelArch,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<ParameterVector> {
    let registry = TaskRegistry::from_tasks(tasks.iter().cloned());
    let ids: Vec<&str> = tasks.iter().map(|t| t.task_id()).collect();
    let cohort = cohort_for(&ids, cfg, run_seed, 0);
    let state = RepositoryState::new(base.clone());
    let next = run_iteration(&state, &cohort, &registry, arch)?;
    Ok(next.base().clone())
}
