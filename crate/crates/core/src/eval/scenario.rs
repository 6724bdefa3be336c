use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{AccuracyRow, EvalReport, Regime};
use super::{baseline_fuse_once, baseline_multitask, finetuned_accuracy, frozen_accuracy};
use crate::error::{Error, Result};
use crate::nn::{init_model, Model, ModelArch};
use crate::params::ParameterVector;
use crate::protocol::{cohort_for, CohortEntry, IterationDriver, RepositoryState, TaskRegistry};
use crate::seed::{derive_seed, tag};
use crate::task::{make_folds, sample_cohort, subsample, TaskDataset};
use crate::train::{accuracy, finetune, TrainConfig};

/// The experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Main,
    SeenUnseen,
    FewShot,
    CohortSweep,
    FederatedFlow,
    SizeSweep,
    ContributorSweep,
    FixedTotal,
    DatasetCount,
    FixedExamples,
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::Main,
        Scenario::SeenUnseen,
        Scenario::FewShot,
        Scenario::CohortSweep,
        Scenario::FederatedFlow,
        Scenario::SizeSweep,
        Scenario::ContributorSweep,
        Scenario::FixedTotal,
        Scenario::DatasetCount,
        Scenario::FixedExamples,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Main => "main",
            Scenario::SeenUnseen => "seen_unseen",
            Scenario::FewShot => "few_shot",
            Scenario::CohortSweep => "cohort_sweep",
            Scenario::FederatedFlow => "federated_flow",
            Scenario::SizeSweep => "size_sweep",
            Scenario::ContributorSweep => "contributor_sweep",
            Scenario::FixedTotal => "fixed_total",
            Scenario::DatasetCount => "dataset_count",
            Scenario::FixedExamples => "fixed_examples",
        }
    }

    /// Analyses that spread one task across several contributors.
    pub fn is_single_task(self) -> bool {
        matches!(
            self,
            Scenario::FederatedFlow | Scenario::SizeSweep | Scenario::ContributorSweep | Scenario::FixedTotal
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

/// Parameters shared by all scenarios; each scenario reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    /// Seed of the initial base, shared by every run seed.
    pub init_seed: u64,
    pub iterations: usize,
    /// Contributors sampled per iteration in multi-task scenarios.
    pub cohort_size: usize,
    /// Contributor finetuning settings; evaluation uses the same except budget.
    /// Supplied by the surrounding experiment document, not this section.
    #[serde(skip)]
    pub train: TrainConfig,
    /// Evaluation budget in examples; defaults to `train.max_examples`.
    pub eval_budget: Option<usize>,
    pub n_folds: usize,
    pub few_shot_n: usize,
    pub cohort_sizes: Vec<usize>,
    /// Size of the fixed evaluation set in the cohort sweep.
    pub test_tasks: usize,
    /// Whether evaluation tasks may also be sampled as contributors.
    pub test_tasks_overlap: bool,
    pub dataset_counts: Vec<usize>,
    /// Per-finetune example cap in `fixed_examples`.
    pub fixed_examples: usize,
    /// Task index used by the single-task analyses.
    pub single_task: usize,
    /// Contributors in `federated_flow` and `size_sweep`.
    pub contributors: usize,
    /// Fresh examples drawn per contributor per iteration in `federated_flow`.
    pub draw_size: usize,
    pub per_contributor_sizes: Vec<usize>,
    pub contributor_counts: Vec<usize>,
    /// Shard size per contributor in `contributor_sweep`.
    pub contributor_data: usize,
    pub total_examples: usize,
    pub fixed_total_counts: Vec<usize>,
    /// Passes over its own shard each contributor makes per iteration.
    pub local_epochs: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Main,
            seeds: vec![0, 1, 2],
            init_seed: 0,
            iterations: 15,
            cohort_size: 4,
            train: TrainConfig::default(),
            eval_budget: None,
            n_folds: 3,
            few_shot_n: 100,
            cohort_sizes: vec![2, 4, 8],
            test_tasks: 4,
            test_tasks_overlap: true,
            dataset_counts: vec![3, 6, 12],
            fixed_examples: 1000,
            single_task: 0,
            contributors: 5,
            draw_size: 250,
            per_contributor_sizes: vec![125, 250, 500, 1000],
            contributor_counts: vec![2, 5, 10, 20],
            contributor_data: 250,
            total_examples: 8000,
            fixed_total_counts: vec![2, 4, 8],
            local_epochs: 25,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("seeds: {} listed twice", w[0]));
        }
        if self.cohort_size == 0 {
            return bad("cohort_size must be positive".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be positive".into());
        }
        self.train.validate()?;
        let nonzero = |name: &str, xs: &[usize]| -> Result<()> {
            if xs.is_empty() || xs.contains(&0) {
                return Err(Error::Config(format!("{name} must be a nonempty list of positive values")));
            }
            Ok(())
        };
        match self.scenario {
            Scenario::CohortSweep => nonzero("cohort_sizes", &self.cohort_sizes)?,
            Scenario::DatasetCount => nonzero("dataset_counts", &self.dataset_counts)?,
            Scenario::SizeSweep => nonzero("per_contributor_sizes", &self.per_contributor_sizes)?,
            Scenario::ContributorSweep => nonzero("contributor_counts", &self.contributor_counts)?,
            Scenario::FixedTotal => nonzero("fixed_total_counts", &self.fixed_total_counts)?,
            Scenario::FederatedFlow if self.contributors == 0 || self.draw_size == 0 => {
                return bad("contributors and draw_size must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }

    fn eval_cfg(&self) -> TrainConfig {
        self.train.with_budget(self.eval_budget.unwrap_or(self.train.max_examples))
    }
}

/// An evaluation target: the row id it reports under and the data it trains on.
struct EvalTask {
    id: String,
    data: TaskDataset,
}

struct EvalSet {
    label: String,
    tasks: Vec<EvalTask>,
}

/// Which rows an evaluation pass emits.
#[derive(Clone, Copy)]
struct Regimes {
    cold: Regime,
    frozen: Regime,
}

const COLD: Regimes = Regimes {
    cold: Regime::Cold,
    frozen: Regime::Frozen,
};
const PRETRAINED: Regimes = Regimes {
    cold: Regime::BaselinePretrained,
    frozen: Regime::BaselinePretrainedFrozen,
};
const FUSE: Regimes = Regimes {
    cold: Regime::BaselineFuse,
    frozen: Regime::BaselineFuseFrozen,
};
const MULTITASK: Regimes = Regimes {
    cold: Regime::BaselineMultitask,
    frozen: Regime::BaselineMultitaskFrozen,
};

struct Runner<'a> {
    cfg: &'a ScenarioConfig,
    arch: &'a ModelArch,
    tasks: &'a [TaskDataset],
    driver: &'a dyn IterationDriver,
    theta0: ParameterVector,
    eval: TrainConfig,
}

/// Runs the configured scenario over `tasks`, driving every fusion iteration
/// through `driver`. Identical inputs give identical reports.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    arch: &ModelArch,
    tasks: &[TaskDataset],
    driver: &dyn IterationDriver,
) -> Result<EvalReport> {
    cfg.validate()?;
    arch.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("scenario needs at least one task".into()));
    }
    if let Some(t) = tasks.iter().find(|t| t.input_dim() != arch.input_dim) {
        return Err(Error::Config(format!(
            "task {} has input_dim {}, model expects {}",
            t.task_id(),
            t.input_dim(),
            arch.input_dim
        )));
    }
    let runner = Runner {
        cfg,
        arch,
        tasks,
        driver,
        theta0: init_model(arch, 1, cfg.init_seed)?.into_parts().0,
        eval: cfg.eval_cfg(),
    };
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        match cfg.scenario {
            Scenario::Main => runner.main(seed, &mut rows)?,
            Scenario::SeenUnseen => runner.seen_unseen(seed, false, &mut rows)?,
            Scenario::FewShot => runner.seen_unseen(seed, true, &mut rows)?,
            Scenario::CohortSweep => runner.cohort_sweep(seed, &mut rows)?,
            Scenario::DatasetCount => runner.dataset_count(seed, &mut rows)?,
            Scenario::FixedExamples => runner.fixed_examples(seed, &mut rows)?,
            Scenario::FederatedFlow => runner.federated_flow(seed, &mut rows)?,
            Scenario::SizeSweep => {
                for &s in &cfg.per_contributor_sizes {
                    runner.sharded(seed, &format!("size_sweep/n={s}"), cfg.contributors, s, &mut rows)?;
                }
            }
            Scenario::ContributorSweep => {
                for &c in &cfg.contributor_counts {
                    let label = format!("contributor_sweep/c={c}");
                    runner.sharded(seed, &label, c, cfg.contributor_data, &mut rows)?;
                }
            }
            Scenario::FixedTotal => {
                for &c in &cfg.fixed_total_counts {
                    let label = format!("fixed_total/c={c}");
                    runner.sharded(seed, &label, c, cfg.total_examples / c, &mut rows)?;
                }
            }
        }
    }
    Ok(EvalReport::new(cfg.scenario, cfg.seeds.clone(), rows))
}

impl Runner<'_> {
    fn ids(tasks: &[TaskDataset]) -> Vec<String> {
        tasks.iter().map(|t| t.task_id().to_string()).collect()
    }

    fn eval_set(label: impl Into<String>, prefix: &str, tasks: &[&TaskDataset]) -> EvalSet {
        EvalSet {
            label: label.into(),
            tasks: tasks
                .iter()
                .map(|t| EvalTask {
                    id: format!("{prefix}{}", t.task_id()),
                    data: (*t).clone(),
                })
                .collect(),
        }
    }

    fn by_ids(&self, ids: &[String]) -> Vec<&TaskDataset> {
        ids.iter()
            .map(|id| self.tasks.iter().find(|t| t.task_id() == id).expect("id from family"))
            .collect()
    }

    fn single(&self) -> Result<&TaskDataset> {
        self.tasks.get(self.cfg.single_task).ok_or_else(|| {
            Error::Config(format!(
                "single_task {} out of range for {} tasks",
                self.cfg.single_task,
                self.tasks.len()
            ))
        })
    }

    /// Cold and frozen accuracy of `base` on every evaluation task.
    fn evaluate(
        &self,
        base: &ParameterVector,
        seed: u64,
        iteration: u64,
        regimes: Regimes,
        sets: &[EvalSet],
        rows: &mut Vec<AccuracyRow>,
    ) -> Result<()> {
        let jobs: Vec<(&EvalSet, &EvalTask)> = sets.iter().flat_map(|s| s.tasks.iter().map(move |t| (s, t))).collect();
        let results = jobs
            .par_iter()
            .map(|(_, t)| {
                // Same seed at every iteration so curves compare like with like.
                let cfg = self.eval.with_seed(derive_seed(seed, &[7, tag(&t.id)]));
                Ok((
                    finetuned_accuracy(base, self.arch, &t.data, &cfg)?,
                    frozen_accuracy(base, self.arch, &t.data, &cfg)?,
                ))
            })
            .collect::<Vec<Result<(f64, f64)>>>();
        for ((set, task), r) in jobs.iter().zip(results) {
            let (cold, frozen) = r?;
            for (regime, accuracy) in [(regimes.cold, cold), (regimes.frozen, frozen)] {
                rows.push(AccuracyRow {
                    scenario: set.label.clone(),
                    seed,
                    iteration,
                    task_id: task.id.clone(),
                    regime,
                    accuracy,
                });
            }
        }
        Ok(())
    }

    /// Iterates the protocol from the initial base and evaluates after each iteration.
    fn cold_run(
        &self,
        run_key: String,
        seed: u64,
        mut plan: impl FnMut(u64) -> Result<(Vec<CohortEntry>, TaskRegistry)>,
        sets: &[EvalSet],
        rows: &mut Vec<AccuracyRow>,
    ) -> Result<()> {
        let mut state = RepositoryState::new(self.theta0.clone());
        for i in 0..self.cfg.iterations as u64 {
            let (cohort, registry) = plan(i)?;
            state = self
                .driver
                .run_iteration(&run_key, &state, &cohort, &registry, self.arch)
                .map_err(|e| Error::Iteration {
                    iteration: i,
                    source: Box::new(e),
                })?;
            self.evaluate(state.base(), seed, i + 1, COLD, sets, rows)?;
        }
        Ok(())
    }

    /// Repeated sampling of `k` tasks from `pool`.
    fn sampled_plan<'p>(
        &'p self,
        pool: &'p [String],
        registry: &'p TaskRegistry,
        k: usize,
        seed: u64,
    ) -> impl FnMut(u64) -> Result<(Vec<CohortEntry>, TaskRegistry)> + 'p {
        move |i| {
            let chosen = sample_cohort(pool, k, seed, i)?;
            Ok((cohort_for(&chosen, &self.cfg.train, seed, i), registry.clone()))
        }
    }

    fn main(&self, seed: u64, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let pool = Self::ids(self.tasks);
        let all: Vec<&TaskDataset> = self.tasks.iter().collect();
        let sets = [Self::eval_set("main", "", &all)];
        self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;
        let fused = baseline_fuse_once(self.tasks, &self.theta0, self.arch, &self.cfg.train, seed)?;
        self.evaluate(&fused, seed, 0, FUSE, &sets, rows)?;
        let mt_cfg = self.cfg.train.with_seed(derive_seed(seed, &[15]));
        let multitask = baseline_multitask(&self.theta0, self.tasks, self.arch, &mt_cfg)?;
        self.evaluate(&multitask, seed, 0, MULTITASK, &sets, rows)?;
        let registry = TaskRegistry::from_tasks(self.tasks.iter().cloned());
        let k = self.cfg.cohort_size;
        self.cold_run(format!("main/seed={seed}"), seed, self.sampled_plan(&pool, &registry, k, seed), &sets, rows)
    }

    fn seen_unseen(&self, seed: u64, few_shot: bool, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let plan = make_folds(&Self::ids(self.tasks), self.cfg.n_folds, self.cfg.init_seed)?;
        for (f, fold) in plan.folds.iter().enumerate() {
            let prefix = format!("fold{f}/");
            let seen = self.by_ids(&fold.seen);
            let unseen = self.by_ids(&fold.unseen);
            let sets = if few_shot {
                let tasks = unseen
                    .iter()
                    .map(|t| {
                        let id = format!("{prefix}{}", t.task_id());
                        let data = subsample(t, self.cfg.few_shot_n, derive_seed(seed, &[8, tag(&id)]), 0)?;
                        Ok(EvalTask { id, data })
                    })
                    .collect::<Result<Vec<_>>>()?;
                vec![EvalSet {
                    label: "few_shot/unseen".into(),
                    tasks,
                }]
            } else {
                vec![
                    Self::eval_set("seen_unseen/seen", &prefix, &seen),
                    Self::eval_set("seen_unseen/unseen", &prefix, &unseen),
                ]
            };
            self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;
            let registry = TaskRegistry::from_tasks(seen.iter().map(|t| (*t).clone()));
            let k = self.cfg.cohort_size.min(fold.seen.len());
            let key = format!("{}/fold{f}/seed={seed}", self.cfg.scenario);
            self.cold_run(key, seed, self.sampled_plan(&fold.seen, &registry, k, seed), &sets, rows)?;
        }
        Ok(())
    }

    /// Task ids in a fixed order drawn from the initial seed.
    fn permuted_ids(&self, stream: u64) -> Vec<String> {
        let mut ids = Self::ids(self.tasks);
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.init_seed, &[stream])));
        ids
    }

    fn cohort_sweep(&self, seed: u64, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let order = self.permuted_ids(9);
        if self.cfg.test_tasks == 0 || self.cfg.test_tasks > order.len() {
            return Err(Error::Config(format!(
                "test_tasks must be in 1..={}, got {}",
                order.len(),
                self.cfg.test_tasks
            )));
        }
        let (test, rest) = order.split_at(self.cfg.test_tasks);
        let pool: Vec<String> = if self.cfg.test_tasks_overlap { order.clone() } else { rest.to_vec() };
        let registry = TaskRegistry::from_tasks(self.by_ids(&pool).into_iter().cloned());
        let test_tasks = self.by_ids(test);
        for &k in &self.cfg.cohort_sizes {
            if k > pool.len() {
                return Err(Error::Cohort { k, pool: pool.len() });
            }
            let label = format!("cohort_sweep/k={k}");
            let sets = [Self::eval_set(label.as_str(), "", &test_tasks)];
            self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;
            let key = format!("{label}/seed={seed}");
            self.cold_run(key, seed, self.sampled_plan(&pool, &registry, k, seed), &sets, rows)?;
        }
        Ok(())
    }

    fn dataset_count(&self, seed: u64, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let order = self.permuted_ids(10);
        let all: Vec<&TaskDataset> = self.tasks.iter().collect();
        for &m in &self.cfg.dataset_counts {
            if m > order.len() {
                return Err(Error::Config(format!("dataset count {m} exceeds {} tasks", order.len())));
            }
            let pool = order[..m].to_vec();
            let registry = TaskRegistry::from_tasks(self.by_ids(&pool).into_iter().cloned());
            let label = format!("dataset_count/m={m}");
            let sets = [Self::eval_set(label.as_str(), "", &all)];
            self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;
            let k = self.cfg.cohort_size.min(m);
            let key = format!("{label}/seed={seed}");
            self.cold_run(key, seed, self.sampled_plan(&pool, &registry, k, seed), &sets, rows)?;
        }
        Ok(())
    }

    fn fixed_examples(&self, seed: u64, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let pool = Self::ids(self.tasks);
        let all: Vec<&TaskDataset> = self.tasks.iter().collect();
        let sets = [Self::eval_set("fixed_examples", "", &all)];
        self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;
        let cap = self.cfg.fixed_examples;
        let plan = |i: u64| {
            let chosen = sample_cohort(&pool, self.cfg.cohort_size, seed, i)?;
            let mut registry = TaskRegistry::new();
            for t in self.by_ids(&chosen) {
                let n = cap.min(t.train().len());
                registry.insert(subsample(t, n, derive_seed(seed, &[11, i, tag(t.task_id())]), 0)?);
            }
            Ok((cohort_for(&chosen, &self.cfg.train, seed, i), registry))
        };
        self.cold_run(format!("fixed_examples/seed={seed}"), seed, plan, &sets, rows)
    }

    /// Contributors `c0..` with fixed finetuning seeds per iteration.
    fn contributor_cohort(&self, n: usize, cfg: &TrainConfig, seed: u64, i: u64, task: &str) -> Vec<CohortEntry> {
        (0..n)
            .map(|c| CohortEntry {
                contributor_id: format!("c{c}"),
                task_id: format!("{task}/shard{c}"),
                cfg: cfg.with_seed(derive_seed(seed, &[6, i, c as u64])),
            })
            .collect()
    }

    fn federated_flow(&self, seed: u64, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let task = self.single()?;
        let (c, s) = (self.cfg.contributors, self.cfg.draw_size);
        let needed = c * s * self.cfg.iterations;
        if needed > task.train().len() {
            return Err(Error::Subsample {
                requested: s,
                draw: needed / s.max(1),
                available: task.train().len(),
            });
        }
        let eval_data = subsample(task, s, derive_seed(seed, &[13]), 0)?;
        let sets = [EvalSet {
            label: "federated_flow".into(),
            tasks: vec![EvalTask {
                id: task.task_id().to_string(),
                data: eval_data,
            }],
        }];
        self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;
        let draw_seed = derive_seed(seed, &[12]);
        let local = self.cfg.train.with_budget(self.cfg.local_epochs * s);
        let plan = |i: u64| {
            let mut registry = TaskRegistry::new();
            for j in 0..c {
                let draw = subsample(task, s, draw_seed, i as usize * c + j)?;
                registry.insert(draw.renamed(format!("{}/shard{j}", task.task_id())));
            }
            Ok((self.contributor_cohort(c, &local, seed, i, task.task_id()), registry))
        };
        self.cold_run(format!("federated_flow/seed={seed}"), seed, plan, &sets, rows)
    }

    /// `n` contributors, each holding the same disjoint shard of `s` training
    /// examples at every iteration, compared with training on the union.
    fn sharded(&self, seed: u64, label: &str, n: usize, s: usize, rows: &mut Vec<AccuracyRow>) -> Result<()> {
        let task = self.single()?;
        if s == 0 {
            return Err(Error::Config(format!("{label}: empty shards")));
        }
        let shard_seed = derive_seed(seed, &[14]);
        let mut registry = TaskRegistry::new();
        let mut first = None;
        for j in 0..n {
            let shard = subsample(task, s, shard_seed, j)?.renamed(format!("{}/shard{j}", task.task_id()));
            first.get_or_insert_with(|| shard.clone());
            registry.insert(shard);
        }
        // Heads are trained on the first contributor's data only.
        let first = first.expect("n > 0");
        let sets = [EvalSet {
            label: label.to_string(),
            tasks: vec![EvalTask {
                id: task.task_id().to_string(),
                data: first.renamed(task.task_id()),
            }],
        }];
        self.evaluate(&self.theta0, seed, 0, PRETRAINED, &sets, rows)?;

        // The union of the shards is the first block of `n * s` in the same permutation.
        let union = subsample(task, n * s, shard_seed, 0)?;
        // Same recipe as one contributor: `local_epochs` passes over its data.
        let budget = self.cfg.local_epochs * n * s;
        let central_cfg = self.cfg.train.with_budget(budget).with_seed(derive_seed(seed, &[16]));
        let start = Model::with_fresh_head(self.arch, self.theta0.clone(), union.n_classes())?;
        let central = finetune(&start, &union, &central_cfg)?;
        let eval_cfg = self.eval.with_seed(derive_seed(seed, &[7, tag(task.task_id())]));
        let probe = frozen_accuracy(central.body(), self.arch, &sets[0].tasks[0].data, &eval_cfg)?;
        for (regime, acc) in [
            (Regime::BaselineCentralized, accuracy(&central, task, task.test())),
            (Regime::BaselineCentralizedFrozen, probe),
        ] {
            rows.push(AccuracyRow {
                scenario: label.to_string(),
                seed,
                iteration: 0,
                task_id: task.task_id().to_string(),
                regime,
                accuracy: acc,
            });
        }

        let local = self.cfg.train.with_budget(self.cfg.local_epochs * s);
        let plan = |i: u64| Ok((self.contributor_cohort(n, &local, seed, i, task.task_id()), registry.clone()));
        self.cold_run(format!("{label}/seed={seed}"), seed, plan, &sets, rows)
    }
}
