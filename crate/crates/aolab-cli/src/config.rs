//! TOML run-config documents, one per command.
//!
//! Documents are strict (unknown keys are errors) and are re-serialized
//! in resolved form into the run directory, so the echoed file plus the
//! binary version fully determine a run. CLI flags override config keys;
//! defaults fill the rest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use aolab_core::corpus::{pack_corpus, PackedDataset, Vocabulary};
use aolab_core::model::{Family, Injection, ModelConfig};
use aolab_core::objectives::TrainConfig;
use aolab_core::sampler::{Engine, GenerationConfig};
use aolab_core::CoreError;

/// Model section: `ModelConfig` with the vocabulary size optional, since
/// character corpora only reveal it after the vocabulary is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub injection: Option<Injection>,
    #[serde(default)]
    pub target_pe_dim: Option<usize>,
}

impl ModelSection {
    /// Fills in the corpus vocabulary size and validates. A configured
    /// size must agree with the corpus.
    pub fn resolve(&mut self, vocab_size: usize) -> anyhow::Result<ModelConfig> {
        if let Some(v) = self.vocab_size {
            if v != vocab_size {
                return Err(CoreError::config(format!(
                    "config says vocab_size = {v} but the corpus has {vocab_size} symbols"
                ))
                .into());
            }
        }
        self.vocab_size = Some(vocab_size);
        let cfg = ModelConfig {
            family: self.family,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ctx_len: self.ctx_len,
            vocab_size,
            injection: self.injection.unwrap_or(Injection::AdaLn),
            target_pe_dim: self.target_pe_dim.unwrap_or(128),
        };
        cfg.validate()?;
        self.injection = Some(cfg.injection);
        self.target_pe_dim = Some(cfg.target_pe_dim);
        Ok(cfg)
    }

    /// Direct resolution for commands with no corpus (bench).
    pub fn resolve_standalone(&mut self) -> anyhow::Result<ModelConfig> {
        let v = self.vocab_size.ok_or_else(|| {
            CoreError::config("model.vocab_size is required without a corpus")
        })?;
        self.resolve(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// UTF-8 text file; the vocabulary is its distinct characters.
    pub corpus: PathBuf,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_val_frac() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDoc {
    #[serde(default)]
    pub run_name: Option<String>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    /// Optional order-policy sweep: one training run per entry, sharing
    /// everything but the order policy, in run directories suffixed with
    /// the entry name.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub name: String,
    pub policy: aolab_core::ordering::OrderPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMode {
    L2r,
    AnyOrder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDoc {
    #[serde(default)]
    pub run_name: Option<String>,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    #[serde(default = "default_dataset_tag")]
    pub dataset_tag: String,
    #[serde(default = "default_modes")]
    pub modes: Vec<BaseMode>,
    /// Each M adds an any_order_ensemble(M) row; decoders only.
    #[serde(default)]
    pub ensemble_sizes: Vec<usize>,
    #[serde(default = "default_num_orders")]
    pub num_orders: usize,
    /// Evaluation block length; 0 means the model context length.
    #[serde(default)]
    pub block_len: usize,
    /// Cap on evaluated blocks; 0 means all.
    #[serde(default = "default_max_blocks")]
    pub max_blocks: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also emit a ppl-vs-M chart when ensemble sizes are swept.
    #[serde(default)]
    pub svg: bool,
}

fn default_dataset_tag() -> String {
    String::from("val")
}

fn default_modes() -> Vec<BaseMode> {
    vec![BaseMode::AnyOrder]
}

fn default_num_orders() -> usize {
    8
}

fn default_max_blocks() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDoc {
    #[serde(default)]
    pub run_name: Option<String>,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    /// Write a per-step JSONL trace next to the samples.
    #[serde(default)]
    pub trace: bool,
    pub generation: GenerationConfig,
}

fn default_num_samples() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchDoc {
    #[serde(default)]
    pub run_name: Option<String>,
    /// Either a checkpoint or a model section with an init seed.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub init_seed: u64,
    pub seq_lens: Vec<usize>,
    #[serde(default)]
    pub extra_steps: Vec<usize>,
    pub engines: Vec<Engine>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_runs() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeDoc {
    #[serde(default)]
    pub run_name: Option<String>,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub corpus: PathBuf,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Probe block length; 0 means the model context length.
    #[serde(default)]
    pub block_len: usize,
    #[serde(default = "default_probe_blocks")]
    pub max_blocks: usize,
    #[serde(default)]
    pub seed: u64,
    /// Drop the prefix-length weight to demonstrate a failing probe.
    #[serde(default)]
    pub negative_control: bool,
}

fn default_budget() -> usize {
    10_000
}

fn default_probe_blocks() -> usize {
    4
}

pub fn load_doc<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let doc = toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    Ok(doc)
}

pub fn to_toml<T: Serialize>(doc: &T) -> anyhow::Result<String> {
    Ok(toml::to_string_pretty(doc)?)
}

/// Reads a corpus file and packs it under an existing vocabulary (the
/// checkpoint's), so ids line up with the model.
pub fn pack_with_vocab(
    corpus: &Path,
    vocab: &Vocabulary,
    block_len: usize,
) -> anyhow::Result<PackedDataset> {
    let text = fs::read_to_string(corpus)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    Ok(pack_corpus(&text, vocab, block_len)?)
}
