//! Run configuration, read from TOML, and the model registry.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::ensemble::VoteConfig;
use crate::gateway::SamplingParams;
use crate::search::{RexConfig, SearchBudget};
use crate::selfimprove::SelectionPolicy;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Ground-truth test outputs may be read for scoring and selection.
    #[default]
    Train,
    /// Only train pairs are visible; any truth read is a bug.
    TestTime,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupScope {
    /// Across every task's selected examples.
    #[default]
    Pooled,
    PerTask,
}

/// Which registry entry the next fine-tune starts from. Recorded in the
/// manifest; fine-tuning itself happens elsewhere.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneFrom {
    #[default]
    Base,
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub sampling: SelectionPolicy,
    /// Used instead of `sampling` in test-time mode.
    pub test_time_sampling: SelectionPolicy,
    pub refinement: SelectionPolicy,
    pub augment_shuffle: bool,
    pub dedup_threshold: f64,
    pub dedup_scope: DedupScope,
    /// Select from every iteration's candidates so far, not just this one's.
    pub pool_iterations: bool,
    pub finetune_from: FinetuneFrom,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            sampling: SelectionPolicy::sampling_default(),
            test_time_sampling: SelectionPolicy {
                strategy: "ttt-diverse".into(),
                ..SelectionPolicy::sampling_default()
            },
            refinement: SelectionPolicy::refinement_default(),
            augment_shuffle: true,
            dedup_threshold: 0.9,
            dedup_scope: DedupScope::Pooled,
            pool_iterations: true,
            finetune_from: FinetuneFrom::Base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// `mock` or `openai`.
    pub chat: String,
    /// `mock` or `openai`.
    pub embed: String,
    /// `mock` or `subprocess`.
    pub executor: String,
    /// Model tag to endpoint manifest; a one-entry registry built from
    /// `chat_url` and `chat_model` when absent.
    pub model_registry: Option<PathBuf>,
    pub chat_url: Option<String>,
    pub chat_model: Option<String>,
    pub embed_url: Option<String>,
    pub embed_model: String,
    pub rate_limit_per_sec: Option<f64>,
    pub send_min_p: bool,
    pub worker_command: Vec<String>,
    pub workers: usize,
    /// Fraction of mock completions that contain no code.
    pub mock_garbage_rate: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            chat: "mock".into(),
            embed: "mock".into(),
            executor: "mock".into(),
            model_registry: None,
            chat_url: None,
            chat_model: None,
            embed_url: None,
            embed_model: "text-embedding-3-small".into(),
            rate_limit_per_sec: None,
            send_min_p: true,
            worker_command: vec!["python3".into(), "-m".into(), "soar_worker".into()],
            workers: 4,
            mock_garbage_rate: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Task files or directories.
    pub tasks: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub iteration: u32,
    pub model_tag: String,
    pub seed: u64,
    /// Tasks searched concurrently.
    pub parallelism: usize,
    /// Concurrent executions within one task's search.
    pub search_parallelism: usize,
    pub timeout_ms: u64,
    pub budget: SearchBudget,
    pub rex: RexConfig,
    pub vote: VoteConfig,
    pub generation: SamplingParams,
    pub dataset: DatasetConfig,
    pub backends: BackendConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tasks: Vec::new(),
            output_dir: PathBuf::from("soar-run"),
            mode: Mode::Train,
            iteration: 0,
            model_tag: "base".into(),
            seed: 0,
            parallelism: 4,
            search_parallelism: 4,
            timeout_ms: crate::executor::DEFAULT_TIMEOUT_MS,
            budget: SearchBudget::default(),
            rex: RexConfig::default(),
            vote: VoteConfig::default(),
            generation: SamplingParams::default(),
            dataset: DatasetConfig::default(),
            backends: BackendConfig::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, OrchestratorError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        RunConfig::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn archive_path(&self) -> PathBuf {
        self.output_dir().join("archive.jsonl")
    }

    pub fn iteration_dir(&self) -> PathBuf {
        self.output_dir().join(format!("iter_{}", self.iteration))
    }

    pub fn sampling_policy(&self) -> &SelectionPolicy {
        match self.mode {
            Mode::Train => &self.dataset.sampling,
            Mode::TestTime => &self.dataset.test_time_sampling,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.tasks.is_empty() {
            return bad("no task paths given".into());
        }
        if self.parallelism == 0 || self.search_parallelism == 0 {
            return bad("parallelism must be positive".into());
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        self.budget.validate().map_err(OrchestratorError::Config)?;
        self.rex.validate().map_err(OrchestratorError::Config)?;
        self.vote
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.generation
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        for p in [
            &self.dataset.sampling,
            &self.dataset.test_time_sampling,
            &self.dataset.refinement,
        ] {
            if p.k_per_task == 0 {
                return bad(format!("k_per_task must be positive for `{}`", p.strategy));
            }
        }
        if !(0.0..=1.0).contains(&self.dataset.dedup_threshold) {
            return bad("dedup_threshold must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.backends.mock_garbage_rate) {
            return bad("mock_garbage_rate must be in [0, 1]".into());
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form, minus `output_dir`. Paths hash
    /// as written, so the same config file gives the same hash wherever it
    /// lives and wherever it writes.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("output_dir");
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    /// Base URL of an OpenAI-compatible server.
    pub endpoint: String,
    /// Served model name; defaults to the tag.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Tag this model was fine-tuned from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned_from: Option<String>,
}

/// Maps model tags to endpoints. Fine-tuning jobs register their output
/// here under a new tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub base: String,
    pub models: BTreeMap<String, ModelEntry>,
}

impl ModelRegistry {
    pub fn with_base(tag: &str, entry: ModelEntry) -> Self {
        ModelRegistry {
            base: tag.to_string(),
            models: BTreeMap::from([(tag.to_string(), entry)]),
        }
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let reg: ModelRegistry =
            serde_json::from_str(&text).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        if !reg.models.contains_key(&reg.base) {
            return Err(OrchestratorError::Config(format!(
                "base model `{}` is not registered",
                reg.base
            )));
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<(), OrchestratorError> {
        let text = serde_json::to_string_pretty(self).expect("registry serializes");
        std::fs::write(path, text + "\n").map_err(|e| OrchestratorError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Adds a fine-tuned model. Its parent must already be registered.
    pub fn register(&mut self, tag: &str, entry: ModelEntry) -> Result<(), OrchestratorError> {
        if let Some(parent) = &entry.finetuned_from {
            if !self.models.contains_key(parent) {
                return Err(OrchestratorError::Config(format!("unknown parent model `{parent}`")));
            }
        }
        self.models.insert(tag.to_string(), entry);
        Ok(())
    }

    pub fn resolve(&self, tag: &str) -> Result<&ModelEntry, OrchestratorError> {
        self.models.get(tag).ok_or_else(|| {
            OrchestratorError::Config(format!(
                "model tag `{tag}` is not registered (known: {})",
                self.models.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// The tag the next fine-tune should start from.
    pub fn finetune_source<'a>(&'a self, current: &'a str, from: FinetuneFrom) -> &'a str {
        match from {
            FinetuneFrom::Base => &self.base,
            FinetuneFrom::Previous => current,
        }
    }
}

/// The registry named in the config, or one built from `chat_url`.
pub fn model_registry(config: &RunConfig) -> Result<ModelRegistry, OrchestratorError> {
    match &config.backends.model_registry {
        Some(p) => ModelRegistry::load(&config.resolve(p)),
        None => Ok(ModelRegistry::with_base(
            &config.model_tag,
            ModelEntry {
                endpoint: config.backends.chat_url.clone().unwrap_or_default(),
                model: config.backends.chat_model.clone(),
                finetuned_from: None,
            },
        )),
    }
}
