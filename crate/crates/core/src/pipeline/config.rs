//! Pipeline configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::ProductionEvalConfig;
use crate::rng::derive_seed;
use crate::synthworld::{CandidateConfig, SearchLogConfig, Source, WorldConfig};
use crate::trainer::{CrossTrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelsConfig {
    /// Recommender candidate pairs labeled both by the search-relevance
    /// score and by the judge.
    pub n_train_pairs: usize,
    pub sr_threshold: f64,
    pub judge_noise: f64,
    /// Judge-labeled pairs used to pick the classification threshold.
    pub n_val_pairs: usize,
    /// Held-out pairs scored against ground truth.
    pub n_test_pairs: usize,
    pub candidates: CandidateConfig,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        LabelsConfig {
            n_train_pairs: 10_000,
            sr_threshold: 0.5,
            judge_noise: 0.1,
            n_val_pairs: 2000,
            n_test_pairs: 4000,
            candidates: CandidateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiEncoderConfig {
    /// Token hashing width.
    pub vocab_size: usize,
    pub hidden: usize,
    pub dim: usize,
    /// Label sources the student trains on.
    pub sources: Vec<Source>,
}

impl Default for BiEncoderConfig {
    fn default() -> Self {
        BiEncoderConfig {
            vocab_size: 4096,
            hidden: 32,
            dim: 256,
            sources: vec![Source::Llm, Source::Ctr, Source::Kd],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossEncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
}

impl Default for CrossEncoderConfig {
    fn default() -> Self {
        CrossEncoderConfig {
            vocab_size: 4096,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub dim_prefix: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 20,
            dim_prefix: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Assistant score a retrieved pair needs to survive the filter.
    pub relevance_threshold: f64,
    pub judge_sample_size: usize,
    /// Items drawn for the production-style evaluation.
    pub item_sample_size: usize,
    pub grid_step: f64,
    /// Simulated other recall: the top keyphrases per item by
    /// search-relevance score.
    pub other_recall_per_item: usize,
    /// Replaces the simulated other recall when set.
    pub other_recall_path: Option<PathBuf>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            relevance_threshold: 0.5,
            judge_sample_size: 10_000,
            item_sample_size: 200,
            grid_step: 0.01,
            other_recall_per_item: 5,
            other_recall_path: None,
        }
    }
}

/// The label combinations compared by `ablate`.
pub fn default_label_sets() -> Vec<Vec<Source>> {
    use Source::*;
    vec![
        vec![Llm],
        vec![Kd],
        vec![Sr, Kd],
        vec![Llm, Kd],
        vec![Llm, Ctr, Kd],
        vec![Llm, Sr, Kd],
        vec![Llm, Sr, Ctr, Kd],
        vec![Ctr],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub label_sets: Vec<Vec<Source>>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            label_sets: default_label_sets(),
        }
    }
}

/// Every block of the pipeline. Block-level `seed` keys are rejected: all
/// randomness derives from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub search_logs: SearchLogConfig,
    pub labels: LabelsConfig,
    pub bi_encoder: BiEncoderConfig,
    pub cross_encoder: CrossEncoderConfig,
    pub trainer: TrainConfig,
    pub cross_trainer: CrossTrainConfig,
    pub retrieval: RetrievalConfig,
    pub evaluation: EvaluationConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = PipelineConfig {
            seed: 7,
            out_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            search_logs: SearchLogConfig::default(),
            labels: LabelsConfig::default(),
            bi_encoder: BiEncoderConfig::default(),
            cross_encoder: CrossEncoderConfig::default(),
            trainer: TrainConfig::default(),
            cross_trainer: CrossTrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            evaluation: EvaluationConfig::default(),
            ablation: AblationConfig::default(),
        };
        c.apply_seed(7);
        c
    }
}

const SEEDED_BLOCKS: [&str; 3] = ["world", "trainer", "cross_trainer"];

impl PipelineConfig {
    /// Parses TOML, rejecting unknown keys and block-level seeds. The
    /// result is not yet validated.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        for block in SEEDED_BLOCKS {
            if table.get(block).and_then(|b| b.get("seed")).is_some() {
                return Err(Error::config(
                    format!("{block}.seed"),
                    "block seeds are derived; set the top-level seed",
                ));
            }
        }
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| text[s].lines().next().unwrap_or("").trim().to_string())
                .unwrap_or_default();
            Error::config(
                if path.is_empty() {
                    "config".into()
                } else {
                    path
                },
                e.message().to_string(),
            )
        })?;
        let seed = cfg.seed;
        cfg.apply_seed(seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the top-level seed and every seed derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.trainer.seed = derive_seed(seed, "trainer", 0);
        self.cross_trainer.seed = derive_seed(seed, "cross_trainer", 0);
    }

    pub fn to_toml(&self) -> String {
        let mut value = toml::Table::try_from(self).expect("config serializes to a table");
        for block in SEEDED_BLOCKS {
            if let Some(toml::Value::Table(t)) = value.get_mut(block) {
                t.remove("seed");
            }
        }
        toml::to_string(&value).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| prefix("world", e))?;
        self.search_logs
            .validate()
            .map_err(|e| prefix("search_logs", e))?;
        self.trainer.validate()?;
        let l = &self.labels;
        if !(0.0..=1.0).contains(&l.sr_threshold) {
            return Err(Error::config("labels.sr_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..0.5).contains(&l.judge_noise) {
            return Err(Error::config("labels.judge_noise", "must lie in [0, 0.5)"));
        }
        l.candidates
            .validate()
            .map_err(|e| prefix("labels.candidates", e))?;
        let needed = l.n_train_pairs + l.n_val_pairs + l.n_test_pairs;
        let available = self.world.n_items * self.world.n_keyphrases;
        if needed > available / 2 {
            return Err(Error::config(
                "labels",
                format!("{needed} sampled pairs exceed half of the {available} pairs in the world"),
            ));
        }
        if l.n_val_pairs < 2 || l.n_test_pairs < 2 {
            return Err(Error::config(
                "labels.n_val_pairs",
                "validation and test need >= 2 pairs each",
            ));
        }
        let b = &self.bi_encoder;
        if b.vocab_size < 2 || b.hidden == 0 || b.dim == 0 {
            return Err(Error::config(
                "bi_encoder",
                "vocab_size >= 2, hidden >= 1 and dim >= 1 required",
            ));
        }
        if b.sources.is_empty() {
            return Err(Error::config(
                "bi_encoder.sources",
                "must name at least one label source",
            ));
        }
        for s in &b.sources {
            self.trainer.loss_spec(*s, b.dim)?;
        }
        for (i, set) in self.ablation.label_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::config(
                    format!("ablation.label_sets[{i}]"),
                    "empty label set",
                ));
            }
            for s in set {
                self.trainer.loss_spec(*s, b.dim)?;
            }
        }
        let c = &self.cross_encoder;
        if c.vocab_size < 2 || c.hidden == 0 {
            return Err(Error::config(
                "cross_encoder",
                "vocab_size >= 2 and hidden >= 1 required",
            ));
        }
        if self.cross_trainer.batch_size < 2 || !(self.cross_trainer.optimizer.lr > 0.0) {
            return Err(Error::config(
                "cross_trainer",
                "batch_size >= 2 and lr > 0 required",
            ));
        }
        let r = &self.retrieval;
        if r.k == 0 {
            return Err(Error::config("retrieval.k", "must be >= 1"));
        }
        if r.dim_prefix == 0 || r.dim_prefix > b.dim {
            return Err(Error::config(
                "retrieval.dim_prefix",
                format!("{} not in 1..={}", r.dim_prefix, b.dim),
            ));
        }
        let e = &self.evaluation;
        if !(0.0..=1.0).contains(&e.relevance_threshold) {
            return Err(Error::config(
                "evaluation.relevance_threshold",
                "must lie in [0, 1]",
            ));
        }
        if e.item_sample_size == 0 {
            return Err(Error::config("evaluation.item_sample_size", "must be >= 1"));
        }
        if !(e.grid_step > 0.0 && e.grid_step <= 2.0) {
            return Err(Error::config("evaluation.grid_step", "must be in (0, 2]"));
        }
        Ok(())
    }

    pub fn production_eval_config(&self) -> ProductionEvalConfig {
        ProductionEvalConfig {
            k: self.retrieval.k,
            relevance_threshold: self.evaluation.relevance_threshold,
            judge_sample_size: self.evaluation.judge_sample_size,
            judge_noise: self.labels.judge_noise,
            seed: derive_seed(self.seed, "evaluation", 0),
        }
    }
}

fn prefix(block: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{block}.{field}"),
            reason,
        },
        other => other,
    }
}

/// SHA-256 hex of the canonical JSON of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Name of a label set as `ablate` reports it, e.g. `LLM+CTR+KD`.
pub fn label_set_name(sources: &[Source]) -> String {
    sources
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join("+")
}
