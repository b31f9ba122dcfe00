use std::path::{Path, PathBuf};

use dsal_core::active::{PolicyKind, Protocol, QueryPolicy, TrainConfig};
use dsal_core::data::DatasetConfig;
use dsal_core::segnet::{AdamConfig, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Protocol constants of an experiment. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub policies: Vec<PolicyKind>,
    pub n_init: usize,
    pub k: usize,
    pub label_budget: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Epochs for the model trained on the whole annotated pool; 0 skips it.
    pub full_reference_epochs: usize,
    pub save_checkpoints: bool,
    pub adam: AdamConfig,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            policies: vec![PolicyKind::ConsistencyHigh, PolicyKind::Random],
            n_init: 10,
            k: 10,
            label_budget: 60,
            epochs_per_round: 20,
            batch_size: 8,
            seeds: vec![0, 1, 2, 3, 4],
            full_reference_epochs: 100,
            save_checkpoints: true,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Where `generate` writes and `run` reads the dataset; defaults to
    /// `<output_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.dataset.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let (h, w) = self.dataset.resolution;
        if (h, w) != self.model.input_size {
            return bad(format!(
                "dataset resolution {h}×{w} differs from model input {}×{}",
                self.model.input_size.0, self.model.input_size.1
            ));
        }
        let e = &self.experiment;
        if e.policies.is_empty() {
            return bad("experiment.policies is empty".into());
        }
        if e.seeds.is_empty() {
            return bad("experiment.seeds is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(p) = e.policies.iter().find(|p| !seen.insert(**p)) {
            return bad(format!("policy {p} is listed twice"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = e.seeds.iter().find(|s| !seen.insert(**s)) {
            return bad(format!("seed {s} is listed twice"));
        }
        if e.k == 0 {
            return bad("experiment.k must be at least 1".into());
        }
        if e.n_init == 0 || e.n_init > self.dataset.n_train {
            return bad(format!("experiment.n_init must lie in 1..={}", self.dataset.n_train));
        }
        if e.label_budget < e.n_init {
            return bad(format!(
                "experiment.label_budget {} is below n_init {}",
                e.label_budget, e.n_init
            ));
        }
        if e.batch_size == 0 {
            return bad("experiment.batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn protocol(&self) -> Protocol {
        let e = &self.experiment;
        Protocol {
            model: self.model.clone(),
            train: TrainConfig {
                epochs_per_round: e.epochs_per_round,
                batch_size: e.batch_size,
                adam: e.adam,
            },
            n_init: e.n_init,
            label_budget: e.label_budget,
        }
    }

    pub fn policy(&self, kind: PolicyKind) -> QueryPolicy {
        QueryPolicy {
            kind,
            k: self.experiment.k,
        }
    }

    /// Canonical TOML of the resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical config with its paths cleared, lowercase
    /// hex. Where a run is stored does not change what it computes.
    pub fn hash(&self) -> String {
        let content = Self {
            output_dir: PathBuf::new(),
            data_dir: None,
            ..self.clone()
        };
        Sha256::digest(content.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
