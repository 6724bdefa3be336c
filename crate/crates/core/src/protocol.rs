//! The fusion repository: cohort bookkeeping, contribution validation,
//! parameter averaging and base replacement.
//!
//! An iteration opens with a cohort size. Contributors are admitted into the
//! cohort, finetune the current base on their own task and submit the
//! resulting body. Once every admitted contributor has submitted and the
//! cohort is full, the bodies are averaged and the result becomes the base for
//! the next iteration.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelArch};
use crate::params::ParameterVector;
use crate::seed::{derive_seed, tag};
use crate::task::TaskDataset;
use crate::train::{finetune_counted, TrainConfig};

/// How contributions are weighted during fusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[non_exhaustive]
pub enum FusionWeights {
    /// Every contribution counts `1 / |C|`.
    #[default]
    Uniform,
}

/// Elementwise arithmetic mean of identically shaped parameter vectors.
///
/// Each coordinate is summed in sorted order, so the result is bit-identical
/// under any permutation of the inputs, and it is clamped to the inputs'
/// range, so identical inputs come back unchanged.
pub fn fuse<P: Borrow<ParameterVector>>(contributions: &[P]) -> Result<ParameterVector> {
    fuse_with(FusionWeights::Uniform, contributions)
}

pub fn fuse_with<P: Borrow<ParameterVector>>(
    weights: FusionWeights,
    contributions: &[P],
) -> Result<ParameterVector> {
    let FusionWeights::Uniform = weights;
    let first = contributions.first().ok_or(Error::EmptyFusion)?.borrow();
    for (i, c) in contributions.iter().enumerate().skip(1) {
        if c.borrow().manifest() != first.manifest() {
            return Err(Error::FusionShape(format!(
                "contribution {i} has a different manifest than contribution 0"
            )));
        }
    }
    let n = contributions.len();
    let inv = n as f64;
    let mut column = vec![0.0f64; n];
    let mut out = Vec::with_capacity(first.len());
    for j in 0..first.len() {
        for (slot, c) in column.iter_mut().zip(contributions) {
            *slot = c.borrow().values()[j];
        }
        column.sort_unstable_by(f64::total_cmp);
        let sum: f64 = column.iter().sum();
        let (lo, hi) = (column[0], column[n - 1]);
        let mean = sum / inv;
        out.push(if mean.is_nan() { mean } else { mean.clamp(lo, hi) });
    }
    ParameterVector::new(first.manifest().clone(), out)
}

/// One contributor's finetuned body for a given iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub contributor_id: String,
    pub iteration: u64,
    pub task_id: String,
    pub body: ParameterVector,
    pub train_examples_seen: u64,
    pub wall_time_ms: u64,
}

impl Contribution {
    /// Hash over identity and parameters; timing is excluded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.contributor_id.as_bytes());
        h.update([0]);
        h.update(self.iteration.to_le_bytes());
        h.update(self.task_id.as_bytes());
        h.update([0]);
        h.update(self.train_examples_seen.to_le_bytes());
        h.update(self.body.to_bytes());
        hex::encode(h.finalize())
    }
}

/// Finetunes `base` with a fresh head on `data` and packages the body as a contribution.
pub fn contribute_local(
    base: &ParameterVector,
    arch: &ModelArch,
    data: &TaskDataset,
    cfg: &TrainConfig,
    contributor_id: &str,
    iteration: u64,
) -> Result<Contribution> {
    let started = Instant::now();
    let start = Model::with_fresh_head(arch, base.clone(), data.n_classes())?;
    let (tuned, seen) = finetune_counted(&start, data, cfg)?;
    let (body, _head) = tuned.into_parts();
    Ok(Contribution {
        contributor_id: contributor_id.to_string(),
        iteration,
        task_id: data.task_id().to_string(),
        body,
        train_examples_seen: seen as u64,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

/// Contribution acceptance rules beyond manifest equality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationPolicy {
    /// Reject bodies farther than this (L2) from the current base.
    pub max_update_norm: f64,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        Self {
            max_update_norm: f64::INFINITY,
        }
    }
}

/// One fused iteration in the append-only history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub cohort: Vec<String>,
    pub contribution_hashes: Vec<String>,
    pub fused_hash: String,
    /// Hash linking this record to the previous one (or to the initial base).
    pub chain_hash: String,
}

fn chain_link(prev: &str, iteration: u64, cohort: &[String], hashes: &[String], fused: &str) -> String {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(iteration.to_le_bytes());
    for (c, x) in cohort.iter().zip(hashes) {
        h.update(c.as_bytes());
        h.update([0]);
        h.update(x.as_bytes());
    }
    h.update(fused.as_bytes());
    hex::encode(h.finalize())
}

/// Result of a successful submission.
#[derive(Debug, Clone, PartialEq)]
pub enum SubmitOutcome {
    /// Recorded; `received` of `cohort_size` contributions are in.
    Recorded { received: usize, cohort_size: usize },
    /// Identical resubmission of an already recorded contribution.
    AlreadyRecorded { received: usize, cohort_size: usize },
    /// The cohort completed and was fused into a new base.
    Fused(HistoryRecord),
}

/// Repository state machine for synchronous fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct RepositoryState {
    base: ParameterVector,
    iteration: u64,
    cohort_size: usize,
    expected_cohort: BTreeSet<String>,
    received: BTreeMap<String, Contribution>,
    history: Vec<HistoryRecord>,
    genesis_hash: String,
    policy: ValidationPolicy,
}

impl RepositoryState {
    pub fn new(base: ParameterVector) -> Self {
        Self::with_policy(base, ValidationPolicy::default())
    }

    pub fn with_policy(base: ParameterVector, policy: ValidationPolicy) -> Self {
        Self {
            genesis_hash: base.content_hash(),
            base,
            iteration: 0,
            cohort_size: 0,
            expected_cohort: BTreeSet::new(),
            received: BTreeMap::new(),
            history: Vec::new(),
            policy,
        }
    }

    pub fn base(&self) -> &ParameterVector {
        &self.base
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn cohort_size(&self) -> usize {
        self.cohort_size
    }

    pub fn expected_cohort(&self) -> &BTreeSet<String> {
        &self.expected_cohort
    }

    pub fn received(&self) -> &BTreeMap<String, Contribution> {
        &self.received
    }

    pub fn history(&self) -> &[HistoryRecord] {
        &self.history
    }

    pub fn genesis_hash(&self) -> &str {
        &self.genesis_hash
    }

    pub fn policy(&self) -> &ValidationPolicy {
        &self.policy
    }

    /// Sets the cohort size of the current iteration; no contributions may be pending.
    pub fn open_iteration(&mut self, cohort_size: usize) -> Result<()> {
        if cohort_size == 0 {
            return Err(Error::Config("cohort size must be positive".into()));
        }
        if !self.received.is_empty() {
            return Err(Error::Config(format!(
                "iteration {} already has pending contributions",
                self.iteration
            )));
        }
        self.cohort_size = cohort_size;
        self.expected_cohort.clear();
        Ok(())
    }

    /// Admits `contributor_id` into the cohort if there is room. Idempotent.
    pub fn admit(&mut self, contributor_id: &str) -> Result<()> {
        if self.expected_cohort.contains(contributor_id) {
            return Ok(());
        }
        if self.expected_cohort.len() >= self.cohort_size {
            return Err(Error::NotInCohort(contributor_id.to_string()));
        }
        self.expected_cohort.insert(contributor_id.to_string());
        Ok(())
    }

    /// Opens the iteration with exactly `ids` as its cohort.
    pub fn open_cohort<S: AsRef<str>>(&mut self, ids: &[S]) -> Result<()> {
        let mut next = self.clone();
        next.open_iteration(ids.len())?;
        for id in ids {
            if next.expected_cohort.contains(id.as_ref()) {
                return Err(Error::Duplicate(id.as_ref().to_string()));
            }
            next.admit(id.as_ref())?;
        }
        *self = next;
        Ok(())
    }

    /// Drops pending contributions and the cohort; base, iteration and history stay.
    pub fn abort_iteration(&mut self) {
        self.received.clear();
        self.expected_cohort.clear();
    }

    /// Checks a contribution without mutating state.
    pub fn validate(&self, c: &Contribution) -> Result<Option<SubmitOutcome>> {
        if c.iteration != self.iteration {
            return Err(Error::Stale {
                claimed: c.iteration,
                current: self.iteration,
            });
        }
        if !self.expected_cohort.contains(&c.contributor_id) {
            return Err(Error::NotInCohort(c.contributor_id.clone()));
        }
        if let Some(prev) = self.received.get(&c.contributor_id) {
            if prev.content_hash() == c.content_hash() {
                return Ok(Some(SubmitOutcome::AlreadyRecorded {
                    received: self.received.len(),
                    cohort_size: self.cohort_size,
                }));
            }
            return Err(Error::Duplicate(c.contributor_id.clone()));
        }
        if c.body.manifest() != self.base.manifest() {
            return Err(Error::FusionShape(format!(
                "contribution from {} does not match the base manifest",
                c.contributor_id
            )));
        }
        if !c.body.is_finite() {
            return Err(Error::NonFinite(format!("contributor {}", c.contributor_id)));
        }
        if self.policy.max_update_norm.is_finite() {
            let norm = c.body.l2_distance(&self.base)?;
            if norm > self.policy.max_update_norm {
                return Err(Error::NormExceeded {
                    contributor: c.contributor_id.clone(),
                    norm,
                    limit: self.policy.max_update_norm,
                });
            }
        }
        Ok(None)
    }

    /// Records a contribution; fuses when the full cohort has submitted.
    ///
    /// Rejected submissions leave the state unchanged.
    pub fn submit(&mut self, c: Contribution) -> Result<SubmitOutcome> {
        if let Some(outcome) = self.validate(&c)? {
            return Ok(outcome);
        }
        self.received.insert(c.contributor_id.clone(), c);
        if self.received.len() == self.cohort_size && self.expected_cohort.len() == self.cohort_size {
            return self.fuse_pending().map(SubmitOutcome::Fused);
        }
        Ok(SubmitOutcome::Recorded {
            received: self.received.len(),
            cohort_size: self.cohort_size,
        })
    }

    fn fuse_pending(&mut self) -> Result<HistoryRecord> {
        let bodies: Vec<&ParameterVector> = self.received.values().map(|c| &c.body).collect();
        let fused = fuse(&bodies)?;
        let cohort: Vec<String> = self.received.keys().cloned().collect();
        let hashes: Vec<String> = self.received.values().map(Contribution::content_hash).collect();
        let fused_hash = fused.content_hash();
        let prev = self
            .history
            .last()
            .map_or(self.genesis_hash.as_str(), |r| r.chain_hash.as_str());
        let record = HistoryRecord {
            iteration: self.iteration,
            chain_hash: chain_link(prev, self.iteration, &cohort, &hashes, &fused_hash),
            cohort,
            contribution_hashes: hashes,
            fused_hash,
        };
        self.base = fused;
        self.iteration += 1;
        self.received.clear();
        self.expected_cohort.clear();
        self.history.push(record.clone());
        Ok(record)
    }

    /// Recomputes the hash chain and checks it ends at the current base.
    pub fn verify_history(&self) -> bool {
        verify_chain(&self.genesis_hash, &self.history, &self.base)
    }
}

/// Checks a history chain from `genesis_hash` and that its last record names `final_base`.
pub fn verify_chain(genesis_hash: &str, history: &[HistoryRecord], final_base: &ParameterVector) -> bool {
    let mut prev = genesis_hash.to_string();
    for (i, r) in history.iter().enumerate() {
        if r.iteration != i as u64 || r.cohort.len() != r.contribution_hashes.len() {
            return false;
        }
        let link = chain_link(&prev, r.iteration, &r.cohort, &r.contribution_hashes, &r.fused_hash);
        if link != r.chain_hash {
            return false;
        }
        prev = link;
    }
    match history.last() {
        Some(r) => r.fused_hash == final_base.content_hash(),
        None => genesis_hash == final_base.content_hash(),
    }
}

/// Task datasets addressable by id.
#[derive(Debug, Clone, Default)]
pub struct TaskRegistry {
    tasks: BTreeMap<String, TaskDataset>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tasks<I: IntoIterator<Item = TaskDataset>>(tasks: I) -> Self {
        let mut r = Self::new();
        for t in tasks {
            r.insert(t);
        }
        r
    }

    pub fn insert(&mut self, task: TaskDataset) {
        self.tasks.insert(task.task_id().to_string(), task);
    }

    pub fn get(&self, id: &str) -> Result<&TaskDataset> {
        self.tasks.get(id).ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// One contributor's assignment for an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub contributor_id: String,
    pub task_id: String,
    pub cfg: TrainConfig,
}

/// Standard cohort: one contributor per task, named after the task, with a
/// finetuning seed derived from `(run_seed, iteration, task)`.
pub fn cohort_for<S: AsRef<str>>(
    task_ids: &[S],
    cfg: &TrainConfig,
    run_seed: u64,
    iteration: u64,
) -> Vec<CohortEntry> {
    task_ids
        .iter()
        .map(|t| {
            let t = t.as_ref();
            CohortEntry {
                contributor_id: t.to_string(),
                task_id: t.to_string(),
                cfg: cfg.with_seed(derive_seed(run_seed, &[6, iteration, tag(t)])),
            }
        })
        .collect()
}

/// Runs one full iteration: every cohort member finetunes the current base
/// with a fresh head, and the bodies are fused into the next base.
///
/// The input state is never modified; any failure returns an error and no new state.
pub fn run_iteration(
    state: &RepositoryState,
    cohort: &[CohortEntry],
    registry: &TaskRegistry,
    arch: &ModelArch,
) -> Result<RepositoryState> {
    let mut next = state.clone();
    let ids: Vec<&str> = cohort.iter().map(|e| e.contributor_id.as_str()).collect();
    next.open_cohort(&ids)?;
    let datasets = cohort
        .iter()
        .map(|e| registry.get(&e.task_id))
        .collect::<Result<Vec<_>>>()?;
    let contributions = cohort
        .par_iter()
        .zip(datasets.par_iter())
        .map(|(e, data)| contribute_local(state.base(), arch, data, &e.cfg, &e.contributor_id, state.iteration()))
        .collect::<Vec<_>>();
    let mut fused = false;
    for c in contributions {
        if let SubmitOutcome::Fused(_) = next.submit(c?)? {
            fused = true;
        }
    }
    if !fused {
        return Err(Error::Config("cohort did not complete".into()));
    }
    Ok(next)
}

/// Executes iterations on behalf of a caller that only needs the resulting
/// state. `run_key` names the run so that remote repositories can keep
/// independent runs apart.
pub trait IterationDriver: Sync {
    fn run_iteration(
        &self,
        run_key: &str,
        state: &RepositoryState,
        cohort: &[CohortEntry],
        registry: &TaskRegistry,
        arch: &ModelArch,
    ) -> Result<RepositoryState>;
}

/// Runs every iteration in this process via [`run_iteration`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InProcess;

impl IterationDriver for InProcess {
    fn run_iteration(
        &self,
        _run_key: &str,
        state: &RepositoryState,
        cohort: &[CohortEntry],
        registry: &TaskRegistry,
        arch: &ModelArch,
    ) -> Result<RepositoryState> {
        run_iteration(state, cohort, registry, arch)
    }
}

/// Runs `n_iterations` iterations from `initial`, returning every snapshot
/// (the initial state first).
pub fn run_protocol(
    initial: &RepositoryState,
    schedule: &[Vec<CohortEntry>],
    n_iterations: usize,
    registry: &TaskRegistry,
    arch: &ModelArch,
) -> Result<Vec<RepositoryState>> {
    if schedule.len() < n_iterations {
        return Err(Error::Config(format!(
            "schedule covers {} iterations, {n_iterations} requested",
            schedule.len()
        )));
    }
    let mut snapshots = Vec::with_capacity(n_iterations + 1);
    snapshots.push(initial.clone());
    for cohort in &schedule[..n_iterations] {
        let current = snapshots.last().expect("nonempty");
        let next = run_iteration(current, cohort, registry, arch).map_err(|e| Error::Iteration {
            iteration: current.iteration(),
            source: Box::new(e),
        })?;
        snapshots.push(next);
    }
    Ok(snapshots)
}
