//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use coldfuse::eval::baseline_fuse_once;
use coldfuse::{
    cohort_for, finetune, fuse, generate_family, init_model, run_iteration, run_protocol, run_scenario,
    sample_cohort, Activation, Batch, Contribution, EvalReport, InProcess, IterationDriver, Manifest, Model,
    ModelArch, ParameterVector, Regime, RepositoryState, Scenario, TaskDataset, TaskFamilySpec,
    TaskRegistry, TensorSpec, TrainConfig,
};
use coldfuse_cli::{cmd_generate, cmd_report, cmd_run, ExperimentConfig, RunOptions};
use coldfuse_hub::wire::DEFAULT_MAX_PAYLOAD;
use coldfuse_hub::{ClientOptions, ErrorCode, Hub, HubClient, HubConfig, HubDriver, Message, WireMessage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits(p: &ParameterVector) -> Vec<u64> {
    p.values().iter().map(|v| v.to_bits()).collect()
}

fn pv(values: Vec<f64>) -> ParameterVector {
    let m = Manifest::new(vec![TensorSpec::new("w", vec![values.len()])]);
    ParameterVector::new(m, values).unwrap()
}

fn pts(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn fusion_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let fused = fuse(&inputs.iter().cloned().map(pv).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for j in 0..500 {
        let mut acc = 0.0;
        for v in &inputs {
            acc += v[j];
        }
        worst = worst.max((fused.values()[j] - acc / 8.0).abs());
    }
    let mut order: Vec<usize> = (0..8).collect();
    let mut stable = true;
    for _ in 0..20 {
        order.shuffle(&mut rng);
        let permuted: Vec<ParameterVector> = order.iter().map(|&i| pv(inputs[i].clone())).collect();
        stable &= bits(&fuse(&permuted).unwrap()) == bits(&fused);
    }
    check(
        worst < 1e-12 && stable,
        format!("max |fused - oracle| = {worst:.1e}, permutations bit-identical: {stable}"),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..20 {
        let arch = ModelArch {
            input_dim: rng.gen_range(2..6),
            hidden_dims: (0..rng.gen_range(1..3)).map(|_| rng.gen_range(2..6)).collect(),
            activation: if i % 2 == 0 { Activation::Tanh } else { Activation::Relu },
        };
        let k = rng.gen_range(2..5);
        let (mut body, mut head) = init_model(&arch, k, 0).unwrap().into_parts();
        for v in body.values_mut().iter_mut().chain(head.values_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..8 * arch.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<u32> = (0..8).map(|_| rng.gen_range(0..k as u32)).collect();
        let batch = Batch { features: &x, labels: &y };
        let model = Model::from_parts(arch.clone(), k, body.clone(), head.clone()).unwrap();
        let (gb, gh) = model.gradient(batch).unwrap();
        let loss = |b: &ParameterVector, h: &ParameterVector| {
            Model::from_parts(arch.clone(), k, b.clone(), h.clone()).unwrap().loss(batch).unwrap()
        };
        let step = 1e-4;
        let mut compare = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * step);
            total += 1;
            if (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6) < 1e-3 {
                agree += 1;
            }
        };
        for j in 0..body.len() {
            let (mut p, mut m) = (body.clone(), body.clone());
            p.values_mut()[j] += step;
            m.values_mut()[j] -= step;
            compare(gb.values()[j], loss(&p, &head), loss(&m, &head));
        }
        for j in 0..head.len() {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.values_mut()[j] += step;
            m.values_mut()[j] -= step;
            compare(gh.values()[j], loss(&body, &p), loss(&body, &m));
        }
    }
    let frac = agree as f64 / total as f64;
    check(frac >= 0.99, format!("{agree}/{total} coordinates within 1e-3 ({:.2}%)", 100.0 * frac))
}

fn small_family() -> Vec<TaskDataset> {
    generate_family(&TaskFamilySpec {
        n_tasks: 6,
        examples_per_task: 1000,
        ..TaskFamilySpec::default()
    })
    .unwrap()
}

fn default_arch() -> ModelArch {
    ExperimentConfig::default().arch
}

fn degeneration_identities() -> Outcome {
    let tasks = small_family();
    let arch = default_arch();
    let registry = TaskRegistry::from_tasks(tasks.clone());
    let theta0 = init_model(&arch, 1, 0).unwrap().into_parts().0;
    let state = RepositoryState::new(theta0.clone());
    let cfg = TrainConfig::default();

    let one = cohort_for(&["task03"], &cfg, 4, 0);
    let after = run_iteration(&state, &one, &registry, &arch).map_err(|e| e.to_string())?;
    let start = Model::with_fresh_head(&arch, theta0.clone(), tasks[3].n_classes()).unwrap();
    let alone = finetune(&start, &tasks[3], &one[0].cfg).unwrap();
    let single = bits(after.base()) == bits(alone.body());

    let zero = TrainConfig {
        learning_rate: 0.0,
        ..cfg.clone()
    };
    let ids = registry.ids();
    let after = run_iteration(&state, &cohort_for(&ids, &zero, 4, 0), &registry, &arch).unwrap();
    let identity = bits(after.base()) == bits(&theta0);

    let once = baseline_fuse_once(&tasks, &theta0, &arch, &cfg, 4).unwrap();
    let full = run_iteration(&state, &cohort_for(&ids, &cfg, 4, 0), &registry, &arch).unwrap();
    let fuse_once = bits(&once) == bits(full.base());
    check(
        single && identity && fuse_once,
        format!("cohort of one: {single}, zero rate: {identity}, fuse-once: {fuse_once}"),
    )
}

fn transport_transparency() -> Outcome {
    let tasks = small_family();
    let arch = default_arch();
    let registry = TaskRegistry::from_tasks(tasks);
    let ids = registry.ids();
    let cfg = TrainConfig::default();
    let schedule: Vec<_> = (0..5)
        .map(|i| cohort_for(&sample_cohort(&ids, 3, 8, i).unwrap(), &cfg, 8, i))
        .collect();
    let theta0 = init_model(&arch, 1, 0).unwrap().into_parts().0;
    let initial = RepositoryState::new(theta0.clone());
    let local = run_protocol(&initial, &schedule, 5, &registry, &arch).map_err(|e| e.to_string())?;

    let hub = Hub::bind(HubConfig::default(), theta0)
        .map_err(|e| e.to_string())?
        .spawn();
    let driver = HubDriver::new(hub.addr().to_string());
    let mut state = initial;
    let mut same = true;
    for (i, cohort) in schedule.iter().enumerate() {
        state = driver
            .run_iteration("acceptance", &state, cohort, &registry, &arch)
            .map_err(|e| e.to_string())?;
        same &= bits(state.base()) == bits(local[i + 1].base());
    }
    let served = hub.state("acceptance").ok_or("hub lost the run")?;
    same &= bits(served.base()) == bits(local[5].base()) && served.history() == local[5].history();
    check(same, format!("5 iterations x 3 contributors, fused sequence bit-identical: {same}"))
}

/// Default experiment with a scenario override.
fn experiment(scenario: Scenario) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario.scenario = scenario;
    cfg
}

/// One task with enough examples for the single-dataset analyses.
fn single_task_experiment(scenario: Scenario) -> ExperimentConfig {
    let mut cfg = experiment(scenario);
    cfg.family = TaskFamilySpec {
        n_tasks: 1,
        classes_per_task: vec![4],
        examples_per_task: 30_000,
        ..TaskFamilySpec::default()
    };
    cfg
}

fn run(cfg: &ExperimentConfig) -> Result<EvalReport, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let tasks = generate_family(&cfg.family).map_err(|e| e.to_string())?;
    let report = run_scenario(&cfg.scenario_config(), &cfg.arch, &tasks, &InProcess).map_err(|e| e.to_string())?;
    report.check_consistency().map_err(|e| e.to_string())?;
    Ok(report)
}

fn final_mean(report: &EvalReport, label: &str, regime: Regime) -> Result<f64, String> {
    let last = report.final_iteration(label).ok_or(format!("no rows for {label}"))?;
    report
        .mean(label, regime, last)
        .ok_or(format!("no {regime} cell for {label} at {last}"))
}

fn baseline(report: &EvalReport, label: &str, regime: Regime) -> Result<f64, String> {
    report.mean(label, regime, 0).ok_or(format!("no {regime} baseline for {label}"))
}

fn main_trend() -> Outcome {
    let r = run(&experiment(Scenario::Main))?;
    let cold = final_mean(&r, "main", Regime::Cold)?;
    let pretrained = baseline(&r, "main", Regime::BaselinePretrained)?;
    let fused = baseline(&r, "main", Regime::BaselineFuse)?;
    check(
        cold - pretrained >= 0.02 && cold > fused,
        format!(
            "final ColD {} vs pretrained {} (+{} pts) vs fuse-once {}",
            pts(cold),
            pts(pretrained),
            pts(cold - pretrained),
            pts(fused)
        ),
    )
}

/// Cold gain over pretrained on unseen tasks at the final iteration, and the frozen seen/unseen pair.
fn seen_unseen_numbers() -> Result<(f64, f64, f64), String> {
    let r = run(&experiment(Scenario::SeenUnseen))?;
    let seen = final_mean(&r, "seen_unseen/seen", Regime::Frozen)?;
    let unseen = final_mean(&r, "seen_unseen/unseen", Regime::Frozen)?;
    let gain = final_mean(&r, "seen_unseen/unseen", Regime::Cold)?
        - baseline(&r, "seen_unseen/unseen", Regime::BaselinePretrained)?;
    Ok((seen, unseen, gain))
}

fn seen_unseen(numbers: &Result<(f64, f64, f64), String>) -> Outcome {
    let &(seen, unseen, gain) = numbers.as_ref().map_err(Clone::clone)?;
    check(
        seen >= unseen && gain >= 0.01,
        format!(
            "frozen seen {} vs unseen {}; unseen ColD over pretrained +{} pts",
            pts(seen),
            pts(unseen),
            pts(gain)
        ),
    )
}

fn few_shot(full_gain: &Result<(f64, f64, f64), String>) -> Outcome {
    let &(_, _, full) = full_gain.as_ref().map_err(Clone::clone)?;
    let r = run(&experiment(Scenario::FewShot))?;
    let gain = final_mean(&r, "few_shot/unseen", Regime::Cold)?
        - baseline(&r, "few_shot/unseen", Regime::BaselinePretrained)?;
    check(
        gain > full,
        format!("few-shot margin +{} pts vs full-data margin +{} pts", pts(gain), pts(full)),
    )
}

fn federated_flow() -> Outcome {
    let r = run(&single_task_experiment(Scenario::FederatedFlow))?;
    let label = "federated_flow";
    let first = r.mean(label, Regime::Frozen, 1).ok_or("no iteration 1")?;
    let last = final_mean(&r, label, Regime::Frozen)?;
    check(
        last - first >= 0.02,
        format!("frozen {} at iteration 1 -> {} at the end (+{} pts)", pts(first), pts(last), pts(last - first)),
    )
}

fn size_sweep() -> Outcome {
    let cfg = single_task_experiment(Scenario::SizeSweep);
    let r = run(&cfg)?;
    let mut gaps = Vec::new();
    for s in &cfg.scenario.per_contributor_sizes {
        let label = format!("size_sweep/n={s}");
        let central = baseline(&r, &label, Regime::BaselineCentralizedFrozen)?;
        gaps.push(central - final_mean(&r, &label, Regime::Frozen)?);
    }
    let rises: Vec<f64> = gaps.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.005);
    let shown: Vec<String> = gaps.iter().map(|&g| pts(g)).collect();
    check(ok, format!("gap to centralized (pts) by size {:?}: [{}]", cfg.scenario.per_contributor_sizes, shown.join(", ")))
}

/// First iteration whose mean is within one point of the final value.
fn converged_at(curve: &[(u64, f64)]) -> Option<u64> {
    let &(_, last) = curve.last()?;
    curve.iter().find(|(i, m)| *i >= 1 && *m >= last - 0.01).map(|&(i, _)| i)
}

fn fixed_total() -> Outcome {
    let mut cfg = single_task_experiment(Scenario::FixedTotal);
    cfg.scenario.fixed_total_counts = vec![2, 4];
    let r = run(&cfg)?;
    let curve = |c: usize| -> Vec<(u64, f64)> {
        r.curve(&format!("fixed_total/c={c}"), Regime::Frozen)
            .into_iter()
            .filter(|&(i, _)| i >= 1)
            .collect()
    };
    let (two, four) = (curve(2), curve(4));
    let (t2, t4) = (converged_at(&two).ok_or("empty curve")?, converged_at(&four).ok_or("empty curve")?);
    let (f2, f4) = (two.last().unwrap().1, four.last().unwrap().1);
    check(
        t4 > t2 && (f2 - f4).abs() < 0.015,
        format!(
            "converged at iteration {t2} (2 contributors) vs {t4} (4); finals {} vs {} ({} pts apart)",
            pts(f2),
            pts(f4),
            pts((f2 - f4).abs())
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

fn pipeline(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.family.n_tasks = 4;
    cfg.family.examples_per_task = 600;
    cfg.scenario.seeds = vec![0, 1];
    cfg.scenario.iterations = 3;
    cfg.scenario.cohort_size = 2;
    cfg.data_dir = root.join("data");
    cfg.output_dir = root.join("reports");
    let e = |e: coldfuse_cli::CliError| e.to_string();
    cmd_generate(&cfg, None).map_err(e)?;
    cmd_run(&cfg, &RunOptions::default()).map_err(e)?;
    cmd_report(&cfg.output_dir, None).map_err(e)?;
    Ok(tree(root))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, tb) = (pipeline(a.path())?, pipeline(b.path())?);
    let reproducible = ta == tb && ta.keys().any(|k| k.ends_with("summary.csv"));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params_exact = true;
    let mut wire_exact = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..300);
        let v: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.gen::<u64>() >> 2)).collect();
        let p = pv(v);
        params_exact &= ParameterVector::from_bytes(&p.to_bytes()).map(|q| bits(&q) == bits(&p)).unwrap_or(false);
        let frame = Message::Fused {
            iteration: rng.gen(),
            base: p.clone(),
        }
        .to_wire()
        .encode();
        wire_exact &= match WireMessage::decode(&frame, DEFAULT_MAX_PAYLOAD).map(|(m, _)| Message::from_wire(&m)) {
            Ok(Ok(Message::Fused { base, .. })) => bits(&base) == bits(&p),
            _ => false,
        };
    }

    // Every base the pipeline emitted is finite, and the hub refuses a NaN body.
    let arch = default_arch();
    let theta0 = init_model(&arch, 1, 0).unwrap().into_parts().0;
    let hub = Hub::bind(
        HubConfig {
            cohort_size: 1,
            ..HubConfig::default()
        },
        theta0.clone(),
    )
    .map_err(|e| e.to_string())?
    .spawn();
    let mut client = HubClient::new(hub.addr().to_string(), ClientOptions::default());
    let (iteration, base) = client.fetch_base("nan", "c", 0).map_err(|e| e.to_string())?;
    let mut body = base.clone();
    body.values_mut()[0] = f64::NAN;
    let bad = Contribution {
        contributor_id: "c".into(),
        iteration,
        task_id: "t".into(),
        body,
        train_examples_seen: 1,
        wall_time_ms: 0,
    };
    let refused = client.submit("nan", &bad).err().and_then(|e| e.code()) == Some(ErrorCode::NonFinite);
    let finite = base.is_finite() && hub.state("nan").is_some_and(|s| s.base().is_finite());

    check(
        reproducible && params_exact && wire_exact && refused && finite,
        format!(
            "pipeline bytes identical: {reproducible}, CFPV exact: {params_exact}, \
             frames exact: {wire_exact}, NaN body refused: {refused}"
        ),
    )
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let started = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let took = started.elapsed();
    let note = format!(" [{:.1} s, limit {} s]", took.as_secs_f64(), limit.as_secs());
    match result {
        Ok(d) if took <= limit => Ok(d + &note),
        Ok(d) => Err(d + &note + " too slow"),
        Err(d) => Err(d + &note),
    }
}

fn main() -> ExitCode {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    let secs = Duration::from_secs;
    let mut failed = 0;
    let mut report = |n: usize, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("criterion {n}: PASS {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL {d}");
            }
        }
    };
    if wanted(1) {
        report(1, timed(secs(1), fusion_exactness));
    }
    if wanted(2) {
        report(2, timed(secs(30), gradient_correctness));
    }
    if wanted(3) {
        report(3, timed(secs(60), degeneration_identities));
    }
    if wanted(4) {
        report(4, timed(secs(120), transport_transparency));
    }
    if wanted(5) {
        report(5, timed(secs(600), main_trend));
    }
    let mut full_data = None;
    if wanted(6) {
        report(
            6,
            timed(secs(900), || {
                let numbers = seen_unseen_numbers();
                full_data = Some(numbers.clone());
                seen_unseen(&numbers)
            }),
        );
    }
    if wanted(7) {
        let numbers = full_data.unwrap_or_else(seen_unseen_numbers);
        report(7, timed(secs(600), || few_shot(&numbers)));
    }
    if wanted(8) {
        report(8, timed(secs(600), federated_flow));
    }
    if wanted(9) {
        report(9, timed(secs(900), size_sweep));
    }
    if wanted(10) {
        report(10, timed(secs(900), fixed_total));
    }
    if wanted(11) {
        report(11, timed(secs(600), determinism));
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
