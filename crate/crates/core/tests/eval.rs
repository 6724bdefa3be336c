use coldfuse::eval::{
    baseline_fuse_once, baseline_multitask, eval_base_model, eval_frozen, finetuned_accuracy, frozen_accuracy,
};
use coldfuse::seed::{derive_seed, tag};
use coldfuse::train::EpochSampler;
use coldfuse::{
    cohort_for, finetune, generate_family, init_model, run_iteration, run_scenario, Activation, Batch, InProcess,
    Model, ModelArch, ParameterVector, Regime, RepositoryState, Scenario, ScenarioConfig, TaskDataset,
    TaskFamilySpec, TaskRegistry, TrainConfig,
};

fn arch(d: usize) -> ModelArch {
    ModelArch {
        input_dim: d,
        hidden_dims: vec![16],
        activation: Activation::Relu,
    }
}

fn family(n: usize, strength: f64, seed: u64) -> Vec<TaskDataset> {
    generate_family(&TaskFamilySpec {
        n_tasks: n,
        input_dim: 16,
        shared_rank: 6,
        examples_per_task: 1000,
        transfer_strength: strength,
        seed,
        ..TaskFamilySpec::default()
    })
    .unwrap()
}

fn cfg(budget: usize) -> TrainConfig {
    TrainConfig {
        max_examples: budget,
        ..TrainConfig::default()
    }
}

fn theta0(seed: u64) -> ParameterVector {
    init_model(&arch(16), 1, seed).unwrap().into_parts().0
}

fn bits(p: &ParameterVector) -> Vec<u64> {
    p.values().iter().map(|v| v.to_bits()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn zero_budget_predicts_the_first_class() {
    let tasks = family(3, 0.7, 0);
    for (t, acc) in tasks.iter().zip(eval_base_model(&theta0(0), &arch(16), &tasks, &cfg(0))) {
        let zeros = t.test().iter().filter(|&&i| t.labels()[i] == 0).count();
        assert_eq!(acc.unwrap(), zeros as f64 / t.test().len() as f64);
    }
}

#[test]
fn evaluation_leaves_the_base_alone_and_is_repeatable() {
    let tasks = family(2, 0.7, 1);
    let base = theta0(1);
    let before = base.to_bytes();
    let a: Vec<f64> = eval_frozen(&base, &arch(16), &tasks, &cfg(2000)).into_iter().map(Result::unwrap).collect();
    let b: Vec<f64> = eval_frozen(&base, &arch(16), &tasks, &cfg(2000)).into_iter().map(Result::unwrap).collect();
    eval_base_model(&base, &arch(16), &tasks, &cfg(2000));
    assert_eq!(a, b);
    assert_eq!(base.to_bytes(), before);
}

#[test]
fn frozen_never_beats_finetuned_from_a_fresh_base() {
    let tasks = family(4, 0.7, 2);
    let (mut cold, mut frozen) = (vec![vec![]; 4], vec![vec![]; 4]);
    for seed in 0..5 {
        let base = theta0(seed);
        let c = cfg(5000).with_seed(seed);
        for (j, t) in tasks.iter().enumerate() {
            cold[j].push(finetuned_accuracy(&base, &arch(16), t, &c).unwrap());
            frozen[j].push(frozen_accuracy(&base, &arch(16), t, &c).unwrap());
        }
    }
    for j in 0..4 {
        assert!(mean(&frozen[j]) <= mean(&cold[j]) + 0.02, "task {j}: {frozen:?} vs {cold:?}");
    }
}

#[test]
fn probing_a_converged_body_nearly_matches_finetuning() {
    let tasks = family(1, 0.7, 3);
    let t = &tasks[0];
    let trained = finetune(&init_model(&arch(16), t.n_classes(), 0).unwrap(), t, &cfg(30_000)).unwrap();
    let body = trained.body().clone();
    let probe = frozen_accuracy(&body, &arch(16), t, &cfg(10_000)).unwrap();
    let full = finetuned_accuracy(&body, &arch(16), t, &cfg(10_000)).unwrap();
    assert!((probe - full).abs() <= 0.03, "probe {probe} vs finetune {full}");
}

#[test]
fn fused_siblings_transfer_to_a_held_out_task() {
    let (mut fused_acc, mut fresh_acc) = (vec![], vec![]);
    for seed in 0..5 {
        let tasks = family(5, 1.0, 10 + seed);
        let (siblings, held_out) = tasks.split_at(4);
        let registry = TaskRegistry::from_tasks(siblings.to_vec());
        let ids = registry.ids();
        let mut state = RepositoryState::new(theta0(seed));
        for i in 0..5 {
            state = run_iteration(&state, &cohort_for(&ids, &cfg(5000), seed, i), &registry, &arch(16)).unwrap();
        }
        let eval = cfg(1000).with_seed(seed);
        fused_acc.push(finetuned_accuracy(state.base(), &arch(16), &held_out[0], &eval).unwrap());
        fresh_acc.push(finetuned_accuracy(&theta0(seed), &arch(16), &held_out[0], &eval).unwrap());
    }
    let gain = mean(&fused_acc) - mean(&fresh_acc);
    assert!(gain > 0.03, "fused {fused_acc:?} vs fresh {fresh_acc:?}");
}

#[test]
fn fuse_once_is_one_full_iteration() {
    let tasks = family(3, 0.7, 4);
    let c = cfg(800);
    let once = baseline_fuse_once(&tasks, &theta0(0), &arch(16), &c, 21).unwrap();
    let registry = TaskRegistry::from_tasks(tasks.clone());
    let ids: Vec<&str> = tasks.iter().map(|t| t.task_id()).collect();
    let cohort = cohort_for(&ids, &c, 21, 0);
    let next = run_iteration(&RepositoryState::new(theta0(0)), &cohort, &registry, &arch(16)).unwrap();
    assert_eq!(bits(&once), bits(next.base()));

    // External oracle: average of independently finetuned bodies.
    let bodies: Vec<ParameterVector> = tasks
        .iter()
        .zip(&cohort)
        .map(|(t, e)| {
            let start = Model::with_fresh_head(&arch(16), theta0(0), t.n_classes()).unwrap();
            finetune(&start, t, &e.cfg).unwrap().into_parts().0
        })
        .collect();
    for j in 0..once.len() {
        let m = bodies.iter().map(|b| b.values()[j]).sum::<f64>() / 3.0;
        assert!((once.values()[j] - m).abs() < 1e-12);
    }
    let single = baseline_fuse_once(&tasks[..1], &theta0(0), &arch(16), &c, 21).unwrap();
    assert_eq!(bits(&single), bits(&bodies[0]));
}

#[test]
fn multitask_with_zero_rate_keeps_the_body() {
    let tasks = family(3, 0.7, 5);
    let zero = TrainConfig {
        learning_rate: 0.0,
        ..cfg(1000)
    };
    let body = baseline_multitask(&theta0(0), &tasks, &arch(16), &zero).unwrap();
    assert_eq!(bits(&body), bits(&theta0(0)));
}

#[test]
fn multitask_on_two_copies_follows_the_interleaved_schedule() {
    let task = family(1, 0.7, 6).remove(0);
    let copies = vec![task.clone(), task.renamed("copy")];
    let c = TrainConfig {
        early_stop_window: 1_000_000,
        ..cfg(640)
    };
    let joint = baseline_multitask(&theta0(0), &copies, &arch(16), &c).unwrap();

    // Oracle: alternate SGD steps on one shared body with one head per copy,
    // copy j drawing its batches from sampler stream j.
    let k = task.n_classes();
    let mut body = theta0(0);
    let mut heads = vec![init_model(&arch(16), k, 0).unwrap().head().clone(); 2];
    let mut samplers: Vec<EpochSampler> = (0..2).map(|j| EpochSampler::new(task.train().len(), c.seed, j)).collect();
    let mut picks = Vec::new();
    for _ in 0..c.max_examples / c.batch_size {
        for j in 0..2 {
            samplers[j].next_batch(c.batch_size, &mut picks);
            let rows: Vec<usize> = picks.iter().map(|&p| task.train()[p]).collect();
            let (x, y) = task.gather(&rows);
            let model = Model::from_parts(arch(16), k, body.clone(), heads[j].clone()).unwrap();
            let (gb, gh) = model.gradient(Batch { features: &x, labels: &y }).unwrap();
            for (w, g) in heads[j].values_mut().iter_mut().zip(gh.values()) {
                *w -= c.learning_rate * g;
            }
            for (w, g) in body.values_mut().iter_mut().zip(gb.values()) {
                *w -= c.learning_rate * g;
            }
        }
    }
    for (a, b) in joint.values().iter().zip(body.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn small_scenario(scenario: Scenario) -> ScenarioConfig {
    ScenarioConfig {
        scenario,
        seeds: vec![0, 1],
        iterations: 2,
        cohort_size: 2,
        n_folds: 2,
        train: cfg(300),
        ..ScenarioConfig::default()
    }
}

#[test]
fn few_shot_with_the_full_train_split_is_the_unseen_arm() {
    let tasks = family(4, 0.7, 7);
    let full = tasks[0].train().len();
    assert!(tasks.iter().all(|t| t.train().len() == full));
    let unseen = run_scenario(&small_scenario(Scenario::SeenUnseen), &arch(16), &tasks, &InProcess).unwrap();
    let few = run_scenario(
        &ScenarioConfig {
            few_shot_n: full,
            ..small_scenario(Scenario::FewShot)
        },
        &arch(16),
        &tasks,
        &InProcess,
    )
    .unwrap();
    let strip = |rows: Vec<_>| -> Vec<(u64, u64, String, Regime, u64)> {
        rows.into_iter()
            .map(|r: coldfuse::eval::AccuracyRow| (r.seed, r.iteration, r.task_id, r.regime, r.accuracy.to_bits()))
            .collect()
    };
    let arm: Vec<_> = unseen.rows.iter().filter(|r| r.scenario == "seen_unseen/unseen").cloned().collect();
    assert!(!arm.is_empty());
    assert_eq!(strip(few.rows.clone()), strip(arm));
}

#[test]
fn pretrained_rows_come_from_plain_evaluation() {
    let tasks = family(4, 0.7, 8);
    let sc = ScenarioConfig {
        iterations: 0,
        ..small_scenario(Scenario::Main)
    };
    let report = run_scenario(&sc, &arch(16), &tasks, &InProcess).unwrap();
    let base = init_model(&arch(16), 1, sc.init_seed).unwrap().into_parts().0;
    for r in report.rows.iter().filter(|r| r.regime == Regime::BaselinePretrained) {
        let t = tasks.iter().find(|t| t.task_id() == r.task_id).unwrap();
        let c = sc.train.with_seed(derive_seed(r.seed, &[7, tag(&r.task_id)]));
        assert_eq!(r.accuracy, finetuned_accuracy(&base, &arch(16), t, &c).unwrap());
    }
}

#[test]
fn reports_are_byte_reproducible() {
    let tasks = family(4, 0.7, 9);
    for scenario in [Scenario::Main, Scenario::FederatedFlow] {
        let sc = ScenarioConfig {
            contributors: 2,
            draw_size: 100,
            ..small_scenario(scenario)
        };
        let a = run_scenario(&sc, &arch(16), &tasks, &InProcess).unwrap();
        let b = run_scenario(&sc, &arch(16), &tasks, &InProcess).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
        a.check_consistency().unwrap();
    }
}
