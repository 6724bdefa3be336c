//! Minibatch SGD with linear learning-rate decay and dev-set early stopping.
//!
//! One loop serves plain finetuning, head-only probing and joint multitask
//! training: a shared body plus one head per task, stepped round-robin. With a
//! single task the schedule degenerates to ordinary finetuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embed, Gradients, Model, ModelArch, Net, Target, Workspace};
use crate::params::ParameterVector;
use crate::seed::derive_seed;
use crate::task::TaskDataset;

/// Optimization settings for one finetuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Subtracted from the learning rate after every step.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Training budget in examples.
    pub max_examples: usize,
    pub early_stop_delta: f64,
    /// Examples between dev-set checks.
    pub early_stop_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_decay: 0.0,
            batch_size: 32,
            max_examples: 10_000,
            early_stop_delta: 0.0,
            early_stop_window: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings from the original large-model recipe, kept for reference.
    pub fn reference_recipe() -> Self {
        Self {
            learning_rate: 5e-5,
            lr_decay: 0.0,
            batch_size: 256,
            max_examples: 256_000,
            early_stop_delta: 0.001,
            early_stop_window: 256_000,
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.max_examples.div_ceil(self.batch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay {} must be >= 0", self.lr_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.early_stop_window == 0 {
            return bad("early_stop_window must be positive".into());
        }
        if !(self.early_stop_delta >= 0.0) {
            return bad("early_stop_delta must be >= 0".into());
        }
        // The schedule must stay nonnegative over the whole budget.
        let steps = self.total_steps().saturating_sub(1) as f64;
        if self.learning_rate - self.lr_decay * steps < -1e-12 {
            return bad(format!(
                "learning rate decays below zero within {} steps",
                self.total_steps()
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_budget(&self, max_examples: usize) -> Self {
        Self {
            max_examples,
            ..self.clone()
        }
    }

    fn rate_at(&self, step: usize) -> f64 {
        (self.learning_rate - self.lr_decay * step as f64).max(0.0)
    }
}

/// Endless stream of shuffled training positions, reshuffled every epoch.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    /// Sampler for task stream `stream` of a run seeded with `seed`.
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5, stream]));
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    /// Next `size` positions in `0..len`; wraps into a fresh epoch as needed.
    pub fn next_batch(&mut self, size: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// Borrowed training inputs for one task.
struct TaskView<'a> {
    features: &'a [f64],
    width: usize,
    labels: &'a [u32],
    n_classes: usize,
    train: &'a [usize],
    dev: &'a [usize],
}

impl<'a> TaskView<'a> {
    fn of(data: &'a TaskDataset) -> Self {
        Self {
            features: data.features(),
            width: data.input_dim(),
            labels: data.labels(),
            n_classes: data.n_classes(),
            train: data.train(),
            dev: data.dev(),
        }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

/// Outcome of a training run.
pub(crate) struct Trained {
    pub body: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
    /// Examples consumed per task.
    pub seen: usize,
}

/// Round-robin SGD over `tasks` with a shared body.
///
/// Each round takes one batch from every task in order; the learning rate
/// decays per round. Early stopping compares the mean dev accuracy every
/// `early_stop_window` examples per task.
fn train_rounds(
    arch: &ModelArch,
    mut body: Vec<f64>,
    mut heads: Vec<Vec<f64>>,
    tasks: &[TaskView<'_>],
    cfg: &TrainConfig,
    update_body: bool,
) -> Trained {
    let mut samplers: Vec<EpochSampler> = tasks
        .iter()
        .enumerate()
        .map(|(j, t)| EpochSampler::new(t.train.len(), cfg.seed, j as u64))
        .collect();
    let mut workspaces: Vec<Workspace> = tasks
        .iter()
        .map(|t| Workspace::new(arch, t.n_classes))
        .collect();
    let mut grads: Vec<Gradients> = heads
        .iter()
        .map(|h| Gradients::new(body.len(), h.len()))
        .collect();

    let dev_accuracy = |body: &[f64], heads: &[Vec<f64>], ws: &mut [Workspace]| -> Option<f64> {
        let mut total = 0.0;
        let mut counted = 0usize;
        for (j, t) in tasks.iter().enumerate() {
            if t.dev.is_empty() {
                continue;
            }
            let net = Net {
                arch,
                n_classes: t.n_classes,
                body,
                head: &heads[j],
            };
            let hits = t
                .dev
                .iter()
                .filter(|&&i| ws[j].predict(net, t.row(i)) == t.labels[i])
                .count();
            total += hits as f64 / t.dev.len() as f64;
            counted += 1;
        }
        (counted > 0).then(|| total / counted as f64)
    };

    let mut last_check = if cfg.early_stop_window < cfg.max_examples {
        dev_accuracy(&body, &heads, &mut workspaces)
    } else {
        None
    };
    let mut next_check = cfg.early_stop_window;
    let mut seen = 0usize;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut round = 0usize;

    while seen < cfg.max_examples {
        let size = cfg.batch_size.min(cfg.max_examples - seen);
        let lr = cfg.rate_at(round);
        for (j, t) in tasks.iter().enumerate() {
            samplers[j].next_batch(size, &mut batch);
            let g = &mut grads[j];
            g.clear();
            let scale = 1.0 / size as f64;
            {
                let net = Net {
                    arch,
                    n_classes: t.n_classes,
                    body: &body,
                    head: &heads[j],
                };
                for &p in &batch {
                    let i = t.train[p];
                    workspaces[j].backprop(net, t.row(i), Target::Hard(t.labels[i]), scale, g, update_body);
                }
            }
            for (w, d) in heads[j].iter_mut().zip(&g.head) {
                *w -= lr * d;
            }
            if update_body {
                for (w, d) in body.iter_mut().zip(&g.body) {
                    *w -= lr * d;
                }
            }
        }
        seen += size;
        round += 1;

        if seen >= next_check && seen < cfg.max_examples {
            next_check += cfg.early_stop_window;
            if let (Some(prev), Some(now)) = (last_check, dev_accuracy(&body, &heads, &mut workspaces)) {
                if now - prev < cfg.early_stop_delta {
                    break;
                }
                last_check = Some(now);
            }
        }
    }
    Trained { body, heads, seen }
}

fn check_label_space(model_classes: usize, data: &TaskDataset) -> Result<()> {
    if model_classes != data.n_classes() {
        return Err(Error::LabelSpace {
            head: model_classes,
            data: data.n_classes(),
        });
    }
    Ok(())
}

fn check_width(arch: &ModelArch, data: &TaskDataset) -> Result<()> {
    if arch.input_dim != data.input_dim() {
        return Err(Error::Shape(format!(
            "task {} has {} features, model expects {}",
            data.task_id(),
            data.input_dim(),
            arch.input_dim
        )));
    }
    Ok(())
}

/// Finetunes body and head of `start` on the train split of `data`.
pub fn finetune(start: &Model, data: &TaskDataset, cfg: &TrainConfig) -> Result<Model> {
    finetune_counted(start, data, cfg).map(|(m, _)| m)
}

/// [`finetune`] that also reports how many training examples were consumed.
pub fn finetune_counted(start: &Model, data: &TaskDataset, cfg: &TrainConfig) -> Result<(Model, usize)> {
    cfg.validate()?;
    check_label_space(start.n_classes(), data)?;
    check_width(start.arch(), data)?;
    if cfg.max_examples == 0 || cfg.learning_rate == 0.0 || data.train().is_empty() {
        return Ok((start.clone(), 0));
    }
    let Trained { body, heads, seen } = train_rounds(
        start.arch(),
        start.body().values().to_vec(),
        vec![start.head().values().to_vec()],
        &[TaskView::of(data)],
        cfg,
        true,
    );
    let body = ParameterVector::new(start.body().manifest().clone(), body)?;
    let head = ParameterVector::new(
        start.head().manifest().clone(),
        heads.into_iter().next().expect("one head"),
    )?;
    if !body.is_finite() || !head.is_finite() {
        return Err(Error::NonFinite(format!("finetune on {}", data.task_id())));
    }
    let model = Model::from_parts(start.arch().clone(), start.n_classes(), body, head)?;
    Ok((model, seen))
}

/// Trains a fresh linear head on frozen body features; returns the head and its dev accuracy.
pub fn linear_probe(
    body: &ParameterVector,
    arch: &ModelArch,
    data: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<(ParameterVector, f64)> {
    cfg.validate()?;
    arch.validate()?;
    check_width(arch, data)?;
    if body.manifest() != &arch.body_manifest() {
        return Err(Error::Shape("body manifest does not match architecture".into()));
    }
    let k = data.n_classes();
    let feature_dim = arch.feature_dim();
    let embedded = embed(arch, body, data.features())?;
    let linear = ModelArch {
        input_dim: feature_dim,
        hidden_dims: Vec::new(),
        activation: arch.activation,
    };
    let view = TaskView {
        features: &embedded,
        width: feature_dim,
        labels: data.labels(),
        n_classes: k,
        train: data.train(),
        dev: data.dev(),
    };
    let zero_head = vec![0.0; arch.head_param_count(k)];
    let head_values = if cfg.max_examples == 0 || cfg.learning_rate == 0.0 || data.train().is_empty() {
        zero_head
    } else {
        let trained = train_rounds(&linear, Vec::new(), vec![zero_head], &[view], cfg, false);
        trained.heads.into_iter().next().expect("one head")
    };
    let head = ParameterVector::new(arch.head_manifest(k), head_values)?;
    if !head.is_finite() {
        return Err(Error::NonFinite(format!("probe on {}", data.task_id())));
    }

    let mut ws = Workspace::new(&linear, k);
    let net = Net {
        arch: &linear,
        n_classes: k,
        body: &[],
        head: head.values(),
    };
    let dev = data.dev();
    let dev_accuracy = if dev.is_empty() {
        0.0
    } else {
        let row = |i: usize| &embedded[i * feature_dim..(i + 1) * feature_dim];
        dev.iter()
            .filter(|&&i| ws.predict(net, row(i)) == data.labels()[i])
            .count() as f64
            / dev.len() as f64
    };
    Ok((head, dev_accuracy))
}

/// Jointly trains one shared body with a dedicated zero-initialized head per task.
///
/// The budget is `cfg.max_examples` per task. Returns the body and the heads in task order.
pub fn train_multitask(
    body: &ParameterVector,
    arch: &ModelArch,
    tasks: &[TaskDataset],
    cfg: &TrainConfig,
) -> Result<(ParameterVector, Vec<ParameterVector>)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("multitask training needs at least one task".into()));
    }
    if body.manifest() != &arch.body_manifest() {
        return Err(Error::Shape("body manifest does not match architecture".into()));
    }
    for t in tasks {
        check_width(arch, t)?;
    }
    let heads: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| vec![0.0; arch.head_param_count(t.n_classes())])
        .collect();
    let views: Vec<TaskView<'_>> = tasks.iter().map(TaskView::of).collect();
    let trained = if cfg.max_examples == 0 || cfg.learning_rate == 0.0 {
        Trained {
            body: body.values().to_vec(),
            heads,
            seen: 0,
        }
    } else {
        train_rounds(arch, body.values().to_vec(), heads, &views, cfg, true)
    };
    let body = ParameterVector::new(body.manifest().clone(), trained.body)?;
    if !body.is_finite() {
        return Err(Error::NonFinite("multitask training".into()));
    }
    let heads = trained
        .heads
        .into_iter()
        .zip(tasks)
        .map(|(h, t)| ParameterVector::new(arch.head_manifest(t.n_classes()), h))
        .collect::<Result<Vec<_>>>()?;
    Ok((body, heads))
}

/// Top-1 accuracy of `model` on the given examples.
pub fn accuracy(model: &Model, data: &TaskDataset, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let mut ws = Workspace::new(model.arch(), model.n_classes());
    let net = model.net();
    let hits = indices
        .iter()
        .filter(|&&i| ws.predict(net, data.row(i)) == data.labels()[i])
        .count();
    hits as f64 / indices.len() as f64
}
