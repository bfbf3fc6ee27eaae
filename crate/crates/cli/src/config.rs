//! Run configuration: one TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use annostance::annotate::BackendConfig;
use annostance::corpus::{Format, Split};
use annostance::decoder::DecoderConfig;
use annostance::metrics::TwoClassScheme;
use annostance::multitarget::SamplerConfig;
use annostance::prompt::{GridConfig, PromptAxes};
use annostance::student::{Hyperparams, DEFAULT_DIM};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

fn default_seed() -> u64 {
    13
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub strict: bool,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Response cache; `<out_dir>/cache.jsonl` when unset.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Extra column adapters layered over the built-in table.
    #[serde(default)]
    pub adapters: Option<PathBuf>,
    #[serde(default)]
    pub corpus: Vec<CorpusEntry>,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Backend chosen when `--backend` is not given.
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default)]
    pub mock: MockSection,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub sensitivity: SensitivitySection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub name: String,
    /// Column adapter id; `normalized` for the tool's own JSONL layout.
    #[serde(default = "default_adapter")]
    pub adapter: String,
    /// Inferred from each file's extension when unset.
    #[serde(default)]
    pub format: Option<Format>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub files: Vec<CorpusFile>,
}

fn default_adapter() -> String {
    "normalized".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub path: PathBuf,
    /// Split for rows without a split column.
    #[serde(default)]
    pub split: Option<Split>,
}

impl CorpusEntry {
    pub fn files(&self) -> Vec<CorpusFile> {
        let mut out: Vec<CorpusFile> = self.path.iter().map(|p| CorpusFile { path: p.clone(), split: None }).collect();
        out.extend(self.files.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    /// Template file replacing the built-in templates.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// Grid swept by `sensitivity`.
    #[serde(default)]
    pub grid: GridConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPhrases {
    #[default]
    Random,
    None,
}

/// Settings for backends of kind `mock`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockSection {
    #[serde(default)]
    pub noise_rate: f64,
    /// How the mock answers for targets other than an example's own.
    #[serde(default)]
    pub phrases: MockPhrases,
}

fn all_splits() -> Vec<Split> {
    Split::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    /// The prompt cell used for annotation.
    #[serde(default)]
    pub axes: PromptAxes,
    #[serde(default = "all_splits")]
    pub splits: Vec<Split>,
}

impl Default for AnnotateSection {
    fn default() -> Self {
        AnnotateSection { axes: PromptAxes::default(), splits: all_splits() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Macro3,
    #[default]
    Macro2,
}

fn test_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySection {
    #[serde(default = "test_split")]
    pub split: Split,
    #[serde(default)]
    pub metric: ScoreMetric,
    /// Corpora to sweep; all when empty.
    #[serde(default)]
    pub corpora: Vec<String>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        SensitivitySection { split: Split::Test, metric: ScoreMetric::default(), corpora: Vec::new() }
    }
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

/// Student hyperparameters; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub l2: Option<f64>,
    #[serde(default)]
    pub shuffle: Option<bool>,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection { dim: DEFAULT_DIM, lr: None, epochs: None, batch_size: None, l2: None, shuffle: None }
    }
}

impl StudentSection {
    pub fn hyperparams(&self, seed: u64) -> Hyperparams {
        let d = Hyperparams::default();
        Hyperparams {
            lr: self.lr.unwrap_or(d.lr),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            l2: self.l2.unwrap_or(d.l2),
            seed,
            shuffle: self.shuffle.unwrap_or(d.shuffle),
        }
    }
}

/// Where a student's training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainSource {
    #[serde(rename = "gold")]
    Gold,
    #[serde(rename = "machine")]
    Machine,
    /// Machine labels plus multi-target samples.
    #[serde(rename = "machine+mt")]
    MachineMultiTarget,
}

impl TrainSource {
    pub fn name(self) -> &'static str {
        match self {
            TrainSource::Gold => "gold",
            TrainSource::Machine => "machine",
            TrainSource::MachineMultiTarget => "machine+mt",
        }
    }
}

fn default_sources() -> Vec<TrainSource> {
    vec![TrainSource::Machine, TrainSource::MachineMultiTarget]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Corpora whose train split feeds a student; all when empty.
    #[serde(default)]
    pub corpora: Vec<String>,
    #[serde(default = "default_sources")]
    pub sources: Vec<TrainSource>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { corpora: Vec::new(), sources: default_sources() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default)]
    pub two_class: TwoClassScheme,
    /// Test sets; every corpus with test rows when empty.
    #[serde(default)]
    pub corpora: Vec<String>,
}

/// Flags that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strict: bool,
    pub backend: Option<String>,
    pub out_dir: Option<PathBuf>,
}

pub const BUILTIN_MOCK: &str = "mock";

/// A validated configuration with paths resolved.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub backend_id: String,
    pub backend: BackendConfig,
    pub digest: String,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

impl Resolved {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(RunConfig::from_toml(&text)?, base_dir, overrides)
    }

    pub fn from_config(mut config: RunConfig, base_dir: PathBuf, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        config.strict |= overrides.strict;
        if let Some(out) = &overrides.out_dir {
            // Command-line paths are relative to the working directory.
            config.out_dir = std::path::absolute(out).map_err(|e| CliError::Config(e.to_string()))?;
        }
        let backend_id = overrides
            .backend
            .clone()
            .or_else(|| config.backend.clone())
            .unwrap_or_else(|| BUILTIN_MOCK.to_string());
        let backend = match config.backends.get(&backend_id) {
            Some(b) => BackendConfig { backend_id: backend_id.clone(), ..b.clone() },
            None if backend_id == BUILTIN_MOCK => BackendConfig::default(),
            None => {
                let known: Vec<&str> = config.backends.keys().map(String::as_str).collect();
                return Err(CliError::Config(format!("unknown backend {backend_id:?}; configured: {known:?}")));
            }
        };
        let mut r = Resolved { config, base_dir, backend_id, backend, digest: String::new() };
        r.validate()?;
        r.digest = r.compute_digest();
        Ok(r)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }

    pub fn cache_path(&self) -> PathBuf {
        match &self.config.cache {
            Some(p) => self.resolve(p),
            None => self.out_dir().join("cache.jsonl"),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |m: String| Err(CliError::Config(m));
        if c.corpus.is_empty() {
            return bad("no [[corpus]] entries".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for entry in &c.corpus {
            if entry.name.is_empty() || entry.name.contains(['/', '\\']) {
                return bad(format!("corpus name {:?} must be non-empty and contain no path separators", entry.name));
            }
            if !names.insert(entry.name.as_str()) {
                return bad(format!("corpus {:?} is listed twice", entry.name));
            }
            let files = entry.files();
            if files.is_empty() {
                return bad(format!("corpus {:?} has neither path nor files", entry.name));
            }
            for f in &files {
                let p = self.resolve(&f.path);
                if !p.is_file() {
                    return bad(format!("corpus {:?}: file {} not found", entry.name, p.display()));
                }
            }
        }
        let known = |list: &[String], what: &str| -> Result<(), CliError> {
            for n in list {
                if !names.contains(n.as_str()) {
                    return Err(CliError::Config(format!("{what} names unknown corpus {n:?}")));
                }
            }
            Ok(())
        };
        known(&c.sensitivity.corpora, "sensitivity.corpora")?;
        known(&c.train.corpora, "train.corpora")?;
        known(&c.evaluate.corpora, "evaluate.corpora")?;
        for p in [&c.adapters, &c.prompt.templates, &c.sampler.sidecar].into_iter().flatten() {
            if !self.resolve(p).is_file() {
                return bad(format!("file {} not found", self.resolve(p).display()));
            }
        }
        if !(0.0..=1.0).contains(&c.mock.noise_rate) {
            return bad(format!("mock.noise_rate {} outside [0, 1]", c.mock.noise_rate));
        }
        if c.annotate.splits.is_empty() {
            return bad("annotate.splits is empty".into());
        }
        if c.train.sources.is_empty() {
            return bad("train.sources is empty".into());
        }
        if !c.student.dim.is_power_of_two() {
            return bad(format!("student.dim {} is not a power of two", c.student.dim));
        }
        if c.sampler.max_per_example == 0 {
            return bad("sampler.max_per_example must be at least 1".into());
        }
        self.backend.validate().map_err(|e| CliError::Config(e.to_string()))?;
        c.prompt.grid.cells().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of everything that shapes outputs.
    /// Output and cache locations are excluded; secrets never enter the
    /// config in the first place.
    fn compute_digest(&self) -> String {
        let mut c = self.config.clone();
        c.out_dir = PathBuf::new();
        c.cache = None;
        c.backend = Some(self.backend_id.clone());
        c.backends = BTreeMap::from([(self.backend_id.clone(), self.backend.clone())]);
        config_digest(&c)
    }

    pub fn corpus_names(&self) -> Vec<String> {
        self.config.corpus.iter().map(|c| c.name.clone()).collect()
    }

    pub fn selected(&self, list: &[String]) -> Vec<String> {
        if list.is_empty() {
            self.corpus_names()
        } else {
            list.to_vec()
        }
    }
}

/// Digest of a config after defaults are filled in. Keys are sorted, so the
/// value is independent of the order fields appear in the file.
pub fn config_digest(config: &RunConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
}
