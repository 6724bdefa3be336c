//! Synthetic classification task families and the sampling utilities built on them.
//!
//! Features are standard normal. Each task's class logits mix a readout of
//! shared nonlinear features (rectified projections onto a low-rank subspace
//! common to the family) with a task-private linear readout of the raw input.
//! The mixing weight `transfer_strength` is the dial that controls how much one
//! task's representation helps another.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Parameters of a synthetic task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFamilySpec {
    pub n_tasks: usize,
    pub input_dim: usize,
    pub shared_rank: usize,
    /// Class count per task; cycled when shorter than `n_tasks`.
    pub classes_per_task: Vec<usize>,
    pub examples_per_task: usize,
    pub label_noise: f64,
    pub transfer_strength: f64,
    pub seed: u64,
}

impl Default for TaskFamilySpec {
    fn default() -> Self {
        Self {
            n_tasks: 12,
            input_dim: 32,
            shared_rank: 8,
            classes_per_task: vec![2, 3, 4],
            examples_per_task: 4000,
            label_noise: 0.05,
            transfer_strength: 0.7,
            seed: 0,
        }
    }
}

impl TaskFamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidSpec { field, reason });
        if self.n_tasks == 0 {
            return bad("n_tasks", "must be positive".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim", "must be positive".into());
        }
        if self.shared_rank == 0 {
            return bad("shared_rank", "must be positive".into());
        }
        if self.shared_rank > self.input_dim {
            return bad(
                "shared_rank",
                format!(
                    "{} exceeds input_dim {}",
                    self.shared_rank, self.input_dim
                ),
            );
        }
        if self.classes_per_task.is_empty() || self.classes_per_task.iter().any(|&k| k < 2) {
            return bad("classes_per_task", "needs at least one entry, each >= 2".into());
        }
        if self.examples_per_task < 20 {
            return bad("examples_per_task", "must be at least 20".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return bad("label_noise", format!("{} not in [0, 1)", self.label_noise));
        }
        if !(0.0..=1.0).contains(&self.transfer_strength) {
            return bad(
                "transfer_strength",
                format!("{} not in [0, 1]", self.transfer_strength),
            );
        }
        Ok(())
    }

    pub fn classes_for(&self, task: usize) -> usize {
        self.classes_per_task[task % self.classes_per_task.len()]
    }
}

/// Labeled examples for one task with train/dev/test index splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    task_id: String,
    n_classes: usize,
    input_dim: usize,
    features: Arc<[f64]>,
    labels: Arc<[u32]>,
    train: Vec<usize>,
    dev: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl TaskDataset {
    /// Builds a dataset whose splits must partition every example.
    pub fn new(
        task_id: impl Into<String>,
        n_classes: usize,
        input_dim: usize,
        features: Vec<f64>,
        labels: Vec<u32>,
        train: Vec<usize>,
        dev: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let data = Self {
            task_id: task_id.into(),
            n_classes,
            input_dim,
            features: features.into(),
            labels: labels.into(),
            train,
            dev,
            test,
        };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        let shape = |m: String| Err(Error::Shape(format!("task {}: {m}", self.task_id)));
        let n = self.labels.len();
        if self.input_dim == 0 || self.features.len() != n * self.input_dim {
            return shape("feature matrix does not match label count".into());
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y as usize >= self.n_classes) {
            return shape(format!("label {y} outside {} classes", self.n_classes));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.dev).chain(&self.test) {
            if i >= n || seen[i] {
                return shape(format!("split index {i} out of range or repeated"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return shape("splits do not cover every example".into());
        }
        let mut present = vec![false; self.n_classes];
        for &i in &self.train {
            present[self.labels[i] as usize] = true;
        }
        if let Some(c) = present.iter().position(|p| !p) {
            return shape(format!("class {c} absent from train split"));
        }
        Ok(())
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn dev(&self) -> &[usize] {
        &self.dev
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    /// Same examples and splits under a new id.
    pub fn renamed(&self, task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            ..self.clone()
        }
    }

    /// Copy of the dataset with a replaced train split; other splits untouched.
    pub fn with_train(&self, train: Vec<usize>) -> Self {
        Self {
            train,
            ..self.clone()
        }
    }

    /// Copies features for the given examples into a dense row-major buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<u32>) {
        let mut x = Vec::with_capacity(indices.len() * self.input_dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Orthonormal `rank × dim` basis via Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rank: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while rows.len() < rank {
        let mut v = gaussian(rng, dim);
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

/// Per-task readout: one row per class over the shared features and one over
/// the raw input, each row unit-norm and centered across classes.
struct Readout {
    shared: Vec<Vec<f64>>,
    private: Vec<Vec<f64>>,
}

fn centered_unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let mut v = gaussian(rng, dim);
            normalize(&mut v);
            v
        })
        .collect();
    // Centering keeps classes roughly balanced under zero-mean features.
    let mean: Vec<f64> = (0..dim)
        .map(|j| out.iter().map(|r| r[j]).sum::<f64>() / rows as f64)
        .collect();
    for r in &mut out {
        r.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    out
}

impl Readout {
    fn draw(rng: &mut ChaCha8Rng, rank: usize, input_dim: usize, classes: usize) -> Self {
        Self {
            shared: centered_unit_rows(rng, classes, rank),
            private: centered_unit_rows(rng, classes, input_dim),
        }
    }
}

// Moments of max(u, 0) for u ~ N(0, 1).
const RELU_MEAN: f64 = 0.398_942_280_401_432_7;
const RELU_STD: f64 = 0.583_819_370_103_548_9;

/// Shared nonlinear features: standardized `max(u_j, 0)` of the projection `u = S x`.
fn shared_features(basis: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    for (o, b) in out.iter_mut().zip(basis) {
        let u: f64 = b.iter().zip(x).map(|(p, q)| p * q).sum();
        *o = (u.max(0.0) - RELU_MEAN) / RELU_STD;
    }
}

/// Generates `spec.n_tasks` datasets named `task00`, `task01`, ...
pub fn generate_family(spec: &TaskFamilySpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut root = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let basis = orthonormal_rows(&mut root, spec.shared_rank, spec.input_dim);
    (0..spec.n_tasks)
        .map(|t| generate_task(spec, &basis, t))
        .collect()
}

fn generate_task(spec: &TaskFamilySpec, basis: &[Vec<f64>], t: usize) -> Result<TaskDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, t as u64]));
    let k = spec.classes_for(t);
    let d = spec.input_dim;
    let n = spec.examples_per_task;
    let readout = Readout::draw(&mut rng, basis.len(), d, k);
    let strength = spec.transfer_strength;
    let features = gaussian(&mut rng, n * d);
    let mut logits = vec![0.0; k];
    let mut phi = vec![0.0; basis.len()];
    let labels: Vec<u32> = features
        .chunks_exact(d)
        .map(|x| {
            shared_features(basis, x, &mut phi);
            for (c, l) in logits.iter_mut().enumerate() {
                let s: f64 = readout.shared[c].iter().zip(&phi).map(|(a, b)| a * b).sum();
                let p: f64 = readout.private[c].iter().zip(x).map(|(a, b)| a * b).sum();
                *l = strength * s + (1.0 - strength) * p;
            }
            let clean = crate::nn::argmax(&logits) as u32;
            if rng.gen::<f64>() < spec.label_noise {
                rng.gen_range(0..k as u32)
            } else {
                clean
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_dev = n * 15 / 100;
    let mut train = order[..n_train].to_vec();
    let mut dev = order[n_train..n_train + n_dev].to_vec();
    let mut test = order[n_train + n_dev..].to_vec();
    train.sort_unstable();
    dev.sort_unstable();
    test.sort_unstable();
    TaskDataset::new(format!("task{t:02}"), k, d, features, labels, train, dev, test)
}

/// Draws `k` distinct ids, uniformly without replacement, for one iteration.
pub fn sample_cohort(pool: &[String], k: usize, seed: u64, iteration: u64) -> Result<Vec<String>> {
    if k > pool.len() {
        return Err(Error::Cohort { k, pool: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, iteration]));
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Seen/unseen split of a task pool for cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

/// Partitions `pool` into `n_folds` unseen groups; each fold sees everything else.
pub fn make_folds(pool: &[String], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds == 0 || !pool.len().is_multiple_of(n_folds) || n_folds > pool.len() {
        return Err(Error::Fold {
            pool: pool.len(),
            folds: n_folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let size = pool.len() / n_folds;
    let folds = order
        .chunks(size)
        .map(|chunk| {
            let mut unseen_idx = chunk.to_vec();
            unseen_idx.sort_unstable();
            let unseen = unseen_idx.iter().map(|&i| pool[i].clone()).collect();
            let seen = (0..pool.len())
                .filter(|i| !unseen_idx.contains(i))
                .map(|i| pool[i].clone())
                .collect();
            Fold { seen, unseen }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Reduces the train split to `n` examples.
///
/// The train split is permuted once per `seed`; draw `j` takes block `j` of that
/// permutation, so distinct draws are disjoint. Selected examples keep their
/// original relative order, which makes `n == train size, draw 0` the identity.
pub fn subsample(data: &TaskDataset, n: usize, seed: u64, draw: usize) -> Result<TaskDataset> {
    let available = data.train.len();
    let end = (draw + 1).checked_mul(n);
    if end.is_none_or(|e| e > available) {
        return Err(Error::Subsample {
            requested: n,
            draw,
            available,
        });
    }
    let mut positions: Vec<usize> = (0..available).collect();
    if !(n == available && draw == 0) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
        positions.shuffle(&mut rng);
    }
    let mut chosen = positions[draw * n..(draw + 1) * n].to_vec();
    chosen.sort_unstable();
    Ok(data.with_train(chosen.into_iter().map(|p| data.train[p]).collect()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskMeta {
    task_id: String,
    n_classes: usize,
    n_examples: usize,
    input_dim: usize,
    train: Vec<usize>,
    dev: Vec<usize>,
    test: Vec<usize>,
}

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.f64";
pub const LABELS_FILE: &str = "labels.i32";

/// Writes one directory per task: `meta.json`, `features.f64` and `labels.i32`.
pub fn save_dataset(dir: &Path, data: &TaskDataset) -> Result<()> {
    let task_dir = dir.join(&data.task_id);
    fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
    let meta = TaskMeta {
        task_id: data.task_id.clone(),
        n_classes: data.n_classes,
        n_examples: data.n_examples(),
        input_dim: data.input_dim,
        train: data.train.clone(),
        dev: data.dev.clone(),
        test: data.test.clone(),
    };
    let meta_path = task_dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;

    let mut raw = Vec::with_capacity(data.features.len() * 8);
    for v in data.features.iter() {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    let path = task_dir.join(FEATURES_FILE);
    fs::write(&path, raw).map_err(|e| Error::io(&path, e))?;

    let mut raw = Vec::with_capacity(data.labels.len() * 4);
    for &y in data.labels.iter() {
        raw.extend_from_slice(&(y as i32).to_le_bytes());
    }
    let path = task_dir.join(LABELS_FILE);
    fs::write(&path, raw).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(task_dir: &Path) -> Result<TaskDataset> {
    let corrupt = |m: &str| Error::Codec(format!("{}: {m}", task_dir.display()));
    let meta_path = task_dir.join(META_FILE);
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TaskMeta =
        serde_json::from_slice(&text).map_err(|e| corrupt(&format!("meta.json: {e}")))?;

    let path = task_dir.join(FEATURES_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if raw.len() != meta.n_examples * meta.input_dim * 8 {
        return Err(corrupt("feature file size does not match metadata"));
    }
    let features = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let path = task_dir.join(LABELS_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if raw.len() != meta.n_examples * 4 {
        return Err(corrupt("label file size does not match metadata"));
    }
    let labels = raw
        .chunks_exact(4)
        .map(|c| {
            let y = i32::from_le_bytes(c.try_into().unwrap());
            u32::try_from(y).map_err(|_| corrupt("negative label"))
        })
        .collect::<Result<Vec<u32>>>()?;

    TaskDataset::new(
        meta.task_id,
        meta.n_classes,
        meta.input_dim,
        features,
        labels,
        meta.train,
        meta.dev,
        meta.test,
    )
}

/// Loads every task subdirectory of `dir`, sorted by name.
pub fn load_family(dir: &Path) -> Result<Vec<TaskDataset>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().join(META_FILE).is_file() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_dataset(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskFamilySpec {
        TaskFamilySpec {
            n_tasks: 6,
            input_dim: 8,
            shared_rank: 3,
            classes_per_task: vec![2, 3],
            examples_per_task: 300,
            label_noise: 0.1,
            transfer_strength: 0.5,
            seed: 11,
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn family_is_deterministic() {
        let a = generate_family(&small_spec()).unwrap();
        let b = generate_family(&small_spec()).unwrap();
        assert_eq!(a, b);
        let bits = |d: &TaskDataset| d.features().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert!(a.iter().zip(&b).all(|(x, y)| bits(x) == bits(y)));
        let other = generate_family(&TaskFamilySpec {
            seed: 12,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a[0].features(), other[0].features());
    }

    #[test]
    fn splits_partition_examples() {
        for d in generate_family(&small_spec()).unwrap() {
            let mut all: Vec<usize> = d.train().iter().chain(d.dev()).chain(d.test()).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..d.n_examples()).collect::<Vec<_>>());
            assert_eq!(d.train().len(), 210);
            assert_eq!(d.dev().len(), 45);
        }
    }

    #[test]
    fn heterogeneous_label_spaces() {
        let fam = generate_family(&small_spec()).unwrap();
        let ks: Vec<usize> = fam.iter().map(|d| d.n_classes()).collect();
        assert_eq!(ks, vec![2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn rank_above_dim_is_rejected() {
        let spec = TaskFamilySpec {
            shared_rank: 9,
            ..small_spec()
        };
        assert!(matches!(
            generate_family(&spec),
            Err(Error::InvalidSpec {
                field: "shared_rank",
                ..
            })
        ));
    }

    #[test]
    fn full_cohort_is_a_permutation() {
        let pool = ids(7);
        let mut c = sample_cohort(&pool, 7, 3, 0).unwrap();
        c.sort();
        let mut p = pool.clone();
        p.sort();
        assert_eq!(c, p);
        assert_eq!(
            sample_cohort(&pool, 3, 5, 9).unwrap(),
            sample_cohort(&pool, 3, 5, 9).unwrap()
        );
        assert!(matches!(
            sample_cohort(&pool, 8, 0, 0),
            Err(Error::Cohort { k: 8, pool: 7 })
        ));
    }

    #[test]
    fn cohort_inclusion_is_uniform() {
        // Binomial oracle: each id is included with p = k / pool.
        let pool = ids(10);
        let trials = 10_000u64;
        let mut counts = vec![0u32; 10];
        for it in 0..trials {
            for id in sample_cohort(&pool, 3, 42, it).unwrap() {
                counts[id[1..].parse::<usize>().unwrap()] += 1;
            }
        }
        let p = 0.3;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn folds_cover_pool_once() {
        let pool = ids(12);
        let plan = make_folds(&pool, 3, 1).unwrap();
        assert_eq!(plan, make_folds(&pool, 3, 1).unwrap());
        let mut unseen: Vec<String> = Vec::new();
        for f in &plan.folds {
            assert_eq!(f.seen.len(), 8);
            assert_eq!(f.unseen.len(), 4);
            assert!(f.seen.iter().all(|s| !f.unseen.contains(s)));
            unseen.extend(f.unseen.iter().cloned());
        }
        unseen.sort();
        let mut p = pool;
        p.sort();
        assert_eq!(unseen, p);
        assert!(matches!(make_folds(&ids(10), 3, 0), Err(Error::Fold { .. })));
    }

    #[test]
    fn subsample_contract() {
        let d = &generate_family(&small_spec()).unwrap()[1];
        let n = d.train().len();
        assert_eq!(&subsample(d, n, 5, 0).unwrap(), d);

        let a = subsample(d, 50, 5, 0).unwrap();
        let b = subsample(d, 50, 5, 1).unwrap();
        assert_eq!(a.train().len(), 50);
        assert!(a.train().iter().all(|i| !b.train().contains(i)));
        assert_eq!(a.dev(), d.dev());
        assert_eq!(a.test(), d.test());
        assert_eq!(a, subsample(d, 50, 5, 0).unwrap());
        assert!(matches!(
            subsample(d, n + 1, 5, 0),
            Err(Error::Subsample { .. })
        ));
        assert!(subsample(d, 100, 5, 2).is_err());
    }

    #[test]
    fn half_subsample_preserves_class_balance() {
        // Hypergeometric oracle: sd of a class share under a 50% draw is tiny
        // relative to 10 points at these sizes.
        let spec = TaskFamilySpec {
            examples_per_task: 2000,
            ..small_spec()
        };
        for d in generate_family(&spec).unwrap() {
            let half = subsample(&d, d.train().len() / 2, 9, 0).unwrap();
            for c in 0..d.n_classes() as u32 {
                let share = |idx: &[usize]| {
                    idx.iter().filter(|&&i| d.labels()[i] == c).count() as f64 / idx.len() as f64
                };
                assert!((share(d.train()) - share(half.train())).abs() < 0.10);
            }
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fam = generate_family(&small_spec()).unwrap();
        for d in &fam {
            save_dataset(dir.path(), d).unwrap();
        }
        assert_eq!(load_family(dir.path()).unwrap(), fam);
    }
}
