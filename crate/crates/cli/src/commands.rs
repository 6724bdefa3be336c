use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coldfuse::eval::{parse_csv, SummaryRow};
use coldfuse::seed::{derive_seed, tag};
use coldfuse::task::{load_family, save_dataset};
use coldfuse::{
    generate_family, init_model, run_scenario, EvalReport, InProcess, IterationDriver, ParameterVector, Scenario,
    TaskDataset, TaskFamilySpec, ValidationPolicy,
};
use coldfuse_hub::{contribute, ClientOptions, ContributeRequest, Hub, HubConfig, HubDriver};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::fsutil::{replace_dir_atomic, verify_manifest, write_atomic, write_manifest};

pub const FAMILY_FILE: &str = "family.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "scenario,regime,iteration,n_seeds,n_tasks,mean,std,sem_seeds,sem_tasks";

#[derive(Debug, Clone)]
pub struct Generated {
    pub dir: PathBuf,
    pub manifest_hash: String,
}

/// Writes the configured task family plus a `MANIFEST` of file hashes.
pub fn cmd_generate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Generated, CliError> {
    let dir = out.unwrap_or(&cfg.data_dir).to_path_buf();
    let tasks = generate_family(&cfg.family)?;
    let mut hash = String::new();
    replace_dir_atomic(&dir, |tmp| {
        let spec = serde_json::to_string_pretty(&cfg.family).expect("spec serializes") + "\n";
        write_atomic(&tmp.join(FAMILY_FILE), spec.as_bytes())?;
        for t in &tasks {
            save_dataset(tmp, t)?;
        }
        hash = write_manifest(tmp)?;
        Ok(())
    })?;
    Ok(Generated {
        dir,
        manifest_hash: hash,
    })
}

/// Loads the family from the data directory after checking its manifest and spec.
pub fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<TaskDataset>, CliError> {
    let dir = dir.unwrap_or(&cfg.data_dir);
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "{}: no dataset directory; run `coldfuse generate` first",
            dir.display()
        )));
    }
    verify_manifest(dir)?;
    let spec_path = dir.join(FAMILY_FILE);
    let text = fs::read_to_string(&spec_path).map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let spec: TaskFamilySpec =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    if spec != cfg.family {
        return Err(CliError::Config(format!(
            "{} was generated from a different family spec than the config",
            dir.display()
        )));
    }
    Ok(load_family(dir)?)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub scenario: Option<Scenario>,
    pub seed_offset: u64,
    /// Drive iterations through the hub at this address.
    pub hub: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
}

/// The initial base every run and every hub session starts from.
pub fn initial_base(cfg: &ExperimentConfig) -> Result<ParameterVector, CliError> {
    Ok(init_model(&cfg.arch, 1, cfg.scenario.init_seed)?.into_parts().0)
}

pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut sc = cfg.scenario_config();
    if let Some(s) = opts.scenario {
        sc.scenario = s;
    }
    for s in &mut sc.seeds {
        *s = s.wrapping_add(opts.seed_offset);
    }
    sc.validate()?;
    let tasks = load_data(cfg, opts.data_dir.as_deref())?;
    let report = match &opts.hub {
        None => run_scenario(&sc, &cfg.arch, &tasks, &InProcess)?,
        Some(addr) => {
            let nonce = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
            let driver = HubDriver::new(addr.clone()).with_prefix(format!("{}-{nonce}/", std::process::id()));
            run_scenario(&sc, &cfg.arch, &tasks, &driver as &dyn IterationDriver)?
        }
    };
    report.check_consistency()?;
    let out = opts.out.as_deref().unwrap_or(&cfg.output_dir);
    let json_path = out.join(format!("{}.json", sc.scenario));
    let csv_path = out.join(format!("{}.csv", sc.scenario));
    write_atomic(&json_path, report.to_json().as_bytes())?;
    write_atomic(&csv_path, report.to_csv().as_bytes())?;
    Ok(RunOutcome {
        report,
        json_path,
        csv_path,
    })
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub table: String,
    pub summary_csv: String,
    pub summary_path: PathBuf,
}

fn summary_line(s: &SummaryRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        s.scenario,
        s.regime,
        s.iteration,
        s.per_seed.len(),
        s.n_tasks,
        s.mean,
        s.std,
        s.sem_seeds,
        s.sem_tasks
    )
}

/// Reads every `*.json` report in `dir`, checks it against its rows (and the
/// sibling CSV when present), prints mean ± std per iteration and writes a
/// tidy summary CSV.
pub fn cmd_report(dir: &Path, csv_out: Option<&Path>) -> Result<ReportOutcome, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no reports found", dir.display())));
    }
    let mut table = String::new();
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for path in &paths {
        let bad = |m: String| CliError::Data(format!("{}: {m}", path.display()));
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let report = EvalReport::from_json(&text).map_err(|e| bad(e.to_string()))?;
        report.check_consistency().map_err(|e| bad(e.to_string()))?;
        let csv_path = path.with_extension("csv");
        if csv_path.is_file() {
            let bad_csv = |m: String| CliError::Data(format!("{}: {m}", csv_path.display()));
            let raw = fs::read_to_string(&csv_path).map_err(|e| bad_csv(e.to_string()))?;
            let rows = parse_csv(&raw).map_err(|e| bad_csv(e.to_string()))?;
            if rows != report.rows {
                return Err(bad_csv("rows differ from the JSON report".into()));
            }
        }
        let _ = writeln!(table, "{} (seeds {:?})", report.scenario, report.seeds);
        for s in &report.summary {
            let _ = writeln!(
                table,
                "  {:<26} {:<28} {:>3}  {:.4} ± {:.4}",
                s.scenario,
                s.regime.as_str(),
                s.iteration,
                s.mean,
                s.std
            );
            csv.push_str(&summary_line(s));
        }
    }
    let summary_path = csv_out.map(Path::to_path_buf).unwrap_or_else(|| dir.join(SUMMARY_FILE));
    write_atomic(&summary_path, csv.as_bytes())?;
    Ok(ReportOutcome {
        table,
        summary_csv: csv,
        summary_path,
    })
}

/// Binds a hub whose runs start from the configured initial base.
pub fn bind_hub(cfg: &ExperimentConfig, bind: Option<&str>) -> Result<Hub, CliError> {
    let config = HubConfig {
        bind: bind.unwrap_or(&cfg.hub.bind).to_string(),
        cohort_size: cfg.hub.cohort_size.unwrap_or(cfg.scenario.cohort_size),
        deadline_ms: cfg.hub.deadline_ms,
        max_payload: cfg.hub.max_payload,
        policy: ValidationPolicy {
            max_update_norm: cfg.hub.max_update_norm.unwrap_or(f64::INFINITY),
        },
        history_log: cfg.hub.history_log.clone(),
    };
    Ok(Hub::bind(config, initial_base(cfg)?)?)
}

#[derive(Debug, Clone)]
pub struct ContributeOptions {
    pub task: String,
    pub contributor: Option<String>,
    pub hub: String,
    pub run_key: String,
    pub iterations: usize,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
}

/// Takes part in `iterations` consecutive iterations; returns the fused base hashes.
pub fn cmd_contribute(cfg: &ExperimentConfig, opts: &ContributeOptions) -> Result<Vec<String>, CliError> {
    let tasks = load_data(cfg, opts.data_dir.as_deref())?;
    let task = tasks
        .iter()
        .find(|t| t.task_id() == opts.task)
        .ok_or_else(|| CliError::Config(format!("unknown task {:?}", opts.task)))?;
    let id = opts.contributor.clone().unwrap_or_else(|| opts.task.clone());
    let mut hashes = Vec::with_capacity(opts.iterations);
    for i in 0..opts.iterations as u64 {
        let train = cfg.train.with_seed(derive_seed(opts.seed, &[6, i, tag(&opts.task)]));
        let req = ContributeRequest {
            run_key: &opts.run_key,
            contributor_id: &id,
            task,
            cfg: &train,
            arch: &cfg.arch,
            cohort_size: 0,
        };
        let out = contribute(&opts.hub, &req, &ClientOptions::default())?;
        log::info!("iteration {} fused: {}", out.iteration, out.fused.content_hash());
        hashes.push(out.fused.content_hash());
    }
    Ok(hashes)
}
