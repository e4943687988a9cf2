//! Pipeline configuration, read from a JSON file.
//!
//! Every field has a default, so `{}` is a valid (if class-less) config.
//! Credentials are never part of the config; HTTP providers read them from
//! `DIVGEN_LLM_KEY` and `DIVGEN_GEN_KEY`.

use std::path::{Path, PathBuf};

use divgen_core::dataset::DEFAULT_SAMPLING_WEIGHT;
use divgen_core::prompt::{DEFAULT_CORPUS_TARGET, DEFAULT_PER_QUERY, DEFAULT_TEMPERATURE};
use divgen_core::trainer::DEFAULT_LAMBDA;
use divgen_core::{BnMode, CorpusOptions, Domain, GenerationParams, NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MEANINGS_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: String,
    /// Name used in LLM queries; defaults to `id`.
    #[serde(default)]
    pub name: Option<String>,
    /// Candidate meaning phrases of an ambiguous name.
    #[serde(default)]
    pub meanings: Vec<String>,
    /// Embedding-store keys of the class's reference images.
    #[serde(default)]
    pub images: Vec<String>,
}

impl ClassSpec {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            mode: LlmMode::Mock,
            base_url: String::new(),
            model: CorpusOptions::default().model,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: CorpusOptions::default().max_tokens,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    Mock,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    /// JSONL store, relative paths resolved against the config file.
    pub path: Option<PathBuf>,
    pub dim: usize,
    /// Image keys invented per class when a class lists none (mock mode).
    pub mock_images_per_class: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            mode: EmbeddingMode::Mock,
            path: None,
            dim: 64,
            mock_images_per_class: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenBackendConfig {
    pub mode: GenMode,
    pub base_url: String,
    pub max_concurrency: usize,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for GenBackendConfig {
    fn default() -> Self {
        GenBackendConfig {
            mode: GenMode::Stub,
            base_url: String::new(),
            max_concurrency: 4,
            max_attempts: 3,
            base_delay_ms: 500,
            timeout_secs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub target: usize,
    pub per_query: usize,
    pub max_queries: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            target: DEFAULT_CORPUS_TARGET,
            per_query: DEFAULT_PER_QUERY,
            max_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub hidden: Vec<usize>,
    pub bn_mode: BnMode,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampling_weight: f64,
    pub eval_bn_domain: Domain,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerConfig {
            hidden: vec![16, 16],
            bn_mode: BnMode::Dual,
            learning_rate: t.learning_rate,
            sgd_momentum: t.sgd_momentum,
            lambda: DEFAULT_LAMBDA,
            epochs: t.epochs,
            batch_size: t.batch_size,
            sampling_weight: DEFAULT_SAMPLING_WEIGHT,
            eval_bn_domain: Domain::Real,
        }
    }
}

/// Two-domain toy data standing in for image features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shift: f64,
    pub scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 2,
            train_per_class: 250,
            test_per_class: 500,
            shift: 2.0,
            scale: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    /// At most this many meaning candidates per class are considered.
    pub meanings_k: usize,
    pub llm: LlmConfig,
    pub embedding: EmbeddingConfig,
    pub generation: GenBackendConfig,
    pub corpus: CorpusConfig,
    pub quota_per_class: usize,
    pub params: GenerationParams,
    pub trainer: TrainerConfig,
    pub toy: ToyConfig,
    pub is_splits: usize,
    /// Directory that relative paths inside the config are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            classes: Vec::new(),
            meanings_k: DEFAULT_MEANINGS_K,
            llm: LlmConfig::default(),
            embedding: EmbeddingConfig::default(),
            generation: GenBackendConfig::default(),
            corpus: CorpusConfig::default(),
            quota_per_class: 20,
            params: GenerationParams::default(),
            trainer: TrainerConfig::default(),
            toy: ToyConfig::default(),
            is_splits: divgen_core::metrics::DEFAULT_IS_SPLITS,
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(message) => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.id.trim().is_empty() || c.id.contains(['/', '\\']) || c.id.starts_with('.') {
                return Err(Error::Config(format!(
                    "class id {:?} is not a valid path segment",
                    c.id
                )));
            }
            if !ids.insert(&c.id) {
                return Err(Error::Config(format!("duplicate class id {:?}", c.id)));
            }
        }
        if self.meanings_k == 0 {
            return Err(Error::Config("meanings_k must be at least 1".into()));
        }
        if self.generation.max_concurrency == 0 || self.generation.max_attempts == 0 {
            return Err(Error::Config(
                "max_concurrency and max_attempts must be at least 1".into(),
            ));
        }
        if self.embedding.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        self.params.validate()?;
        self.train_config()?.batch_plan()?;
        Ok(())
    }

    pub fn class(&self, id: &str) -> Result<&ClassSpec> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::UnknownClass(id.to_string()))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus_options(&self) -> CorpusOptions {
        CorpusOptions {
            target: self.corpus.target,
            per_query: self.corpus.per_query,
            max_queries: self.corpus.max_queries,
            model: self.llm.model.clone(),
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.trainer;
        if t.lambda.is_nan() || t.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        Ok(TrainConfig {
            learning_rate: t.learning_rate,
            sgd_momentum: t.sgd_momentum,
            lambda: t.lambda,
            epochs: t.epochs,
            batch_size: t.batch_size,
            sampling_weight: t.sampling_weight,
            eval_bn_domain: t.eval_bn_domain,
            seed: self.seed,
        })
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig::new(
            2,
            &self.trainer.hidden,
            self.toy.classes,
            self.trainer.bn_mode,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_published_defaults() {
        let c = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(c.params.guidance_scale, 2.0);
        assert_eq!(c.params.steps, 50);
        assert_eq!(
            (c.params.width, c.params.height, c.params.target_resolution),
            (1024, 1024, 256)
        );
        assert_eq!(c.corpus.target, 600);
        assert_eq!(c.corpus.per_query, 20);
        assert_eq!(c.llm.temperature, 0.75);
        assert_eq!(c.trainer.lambda, 0.6);
        assert_eq!(c.trainer.sampling_weight, 0.5);
        assert_eq!(c.trainer.bn_mode, BnMode::Dual);
        assert_eq!(c.meanings_k, 5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PipelineConfig::from_json(r#"{"classes":[{"id":"a"},{"id":"a"}]}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"classes":[{"id":"../x"}]}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"bogus":1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"trainer":{"lambda":-1}}"#).is_err());
        assert!(PipelineConfig::from_json(
            r#"{"params":{"guidance_scale":2.0,"steps":50,"width":1000,"height":1000,"target_resolution":256}}"#
        )
        .is_err());
    }
}
