use std::fs;
use std::path::{Path, PathBuf};

use coldfuse::{Activation, Error as CoreError, ModelArch, ScenarioConfig, TaskFamilySpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Hub service settings used by `hub-serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HubSettings {
    pub bind: String,
    /// Defaults to the scenario cohort size.
    pub cohort_size: Option<usize>,
    pub deadline_ms: u64,
    pub max_payload: u32,
    pub max_update_norm: Option<f64>,
    /// JSON-lines log of fused iterations.
    pub history_log: Option<PathBuf>,
}

impl Default for HubSettings {
    fn default() -> Self {
        Self {
            bind: coldfuse_hub::client::DEFAULT_ADDR.into(),
            cohort_size: None,
            deadline_ms: 600_000,
            max_payload: coldfuse_hub::wire::DEFAULT_MAX_PAYLOAD,
            max_update_norm: None,
            history_log: None,
        }
    }
}

fn default_arch() -> ModelArch {
    ModelArch {
        input_dim: TaskFamilySpec::default().input_dim,
        hidden_dims: vec![64],
        activation: Activation::Relu,
    }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("reports")
}

/// The experiment document. Every section is optional and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub family: TaskFamilySpec,
    #[serde(default = "default_arch")]
    pub arch: ModelArch,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub hub: HubSettings,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            family: TaskFamilySpec::default(),
            arch: default_arch(),
            train: TrainConfig::default(),
            scenario: ScenarioConfig::default(),
            hub: HubSettings::default(),
            data_dir: default_data_dir(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    /// Scenario settings with the document's training section applied.
    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            train: self.train.clone(),
            ..self.scenario.clone()
        }
    }

    /// Paths in the document are relative to the document's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let log = self.hub.history_log.as_mut();
        for p in [&mut self.data_dir, &mut self.output_dir].into_iter().chain(log) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> coldfuse::Result<()> {
        self.family.validate()?;
        self.arch.validate()?;
        if self.arch.input_dim != self.family.input_dim {
            return Err(CoreError::InvalidSpec {
                field: "input_dim",
                reason: format!(
                    "arch.input_dim {} differs from family.input_dim {}",
                    self.arch.input_dim, self.family.input_dim
                ),
            });
        }
        self.scenario_config().validate()
    }

    /// Parses and validates the document at `path`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
        if let Err(e) = cfg.validate() {
            let line = field_of(&e).and_then(|f| line_of(text, f));
            let at = line.map(|l| format!(":{l}")).unwrap_or_default();
            return Err(CliError::Config(format!("{}{at}: {e}", path.display())));
        }
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }
}

/// The config key a validation error refers to, when it names one.
fn field_of(e: &CoreError) -> Option<&str> {
    match e {
        CoreError::InvalidSpec { field, .. } => Some(field),
        CoreError::InvalidArch(_) => Some("hidden_dims"),
        CoreError::InvalidTrainConfig(_) => Some("learning_rate"),
        CoreError::Config(m) => m.split_whitespace().next().map(|w| w.trim_end_matches(':')).filter(|w| w.chars().all(|c| c.is_ascii_lowercase() || c == '_')),
        _ => None,
    }
}

/// 1-based line of the first occurrence of `"key"` in the document.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1)
}
