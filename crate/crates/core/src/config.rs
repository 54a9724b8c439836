//! TOML run configuration shared by `train` and `evaluate`.
//!
//! ```toml
//! seed = 7                          # every other seed is derived from this
//!
//! [data]
//! corpus = "train.tsv"              # label<TAB>tokens, one document per line
//! embeddings = "vectors.bin"        # "" draws a random matrix instead
//! embedding_format = "binary"       # text | binary
//! embedding_dim = 300               # used only when embeddings = ""
//! groups = "groups.tsv"             # "" for no grouping resource
//! group_kind = "tsv"                # tsv | brown | mesh | sentilex
//! prefix_depth = 3                  # MeSH tree-number prefix length
//! vocab_order = "first_occurrence"  # first_occurrence | sorted
//!
//! [model]
//! filter_heights = [3, 4, 5]
//! filters_per_height = 100
//! dropout_rate = 0.5
//! channel2_mode = "group_init_share"  # p_only | random | group_init_no_share | group_init_share
//! signing_enabled = true
//! activation = "relu"               # relu | identity
//! rho = 0.95
//! eps = 1e-6
//!
//! [experiment]
//! folds = 10
//! replications = 5
//! epochs = 20
//! batch_size = 50
//! metric = "accuracy"               # accuracy | auc
//! downsample = false
//! stratified = true
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    load_pretrained, random_uniform_matrix, Dataset, EmbeddingFormat, EmbeddingMatrix, OovPolicy,
    RawCorpus, VocabOrder, Vocabulary,
};
use crate::eval::{ExperimentData, Metric, Protocol, Schedule};
use crate::groups::{build_groups, GroupTable, ResourceKind, DEFAULT_PREFIX_DEPTH};
use crate::model::{Channel2Mode, ModelConfig};
use crate::nnet::{Activation, AdadeltaConfig};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub corpus: String,
    pub embeddings: String,
    pub embedding_format: EmbeddingFormat,
    pub embedding_dim: usize,
    pub groups: String,
    pub group_kind: ResourceKind,
    pub prefix_depth: usize,
    pub vocab_order: VocabOrder,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: String::new(),
            embeddings: String::new(),
            embedding_format: EmbeddingFormat::Text,
            embedding_dim: 300,
            groups: String::new(),
            group_kind: ResourceKind::Tsv,
            prefix_depth: DEFAULT_PREFIX_DEPTH,
            vocab_order: VocabOrder::FirstOccurrence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub filter_heights: Vec<usize>,
    pub filters_per_height: usize,
    pub dropout_rate: f64,
    pub channel2_mode: Channel2Mode,
    pub signing_enabled: bool,
    pub activation: Activation,
    pub rho: f64,
    pub eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            filter_heights: m.filter_heights,
            filters_per_height: m.filters_per_height,
            dropout_rate: m.dropout_rate,
            channel2_mode: m.channel2_mode,
            signing_enabled: m.signing_enabled,
            activation: m.activation,
            rho: m.adadelta.rho,
            eps: m.adadelta.eps,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, num_classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            filter_heights: self.filter_heights.clone(),
            filters_per_height: self.filters_per_height,
            num_classes,
            dropout_rate: self.dropout_rate,
            channel2_mode: self.channel2_mode,
            signing_enabled: self.signing_enabled,
            seed,
            activation: self.activation,
            adadelta: AdadeltaConfig {
                rho: self.rho,
                eps: self.eps,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub folds: usize,
    pub replications: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub metric: Metric,
    pub downsample: bool,
    pub stratified: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let p = Protocol::default();
        ExperimentSection {
            folds: p.folds,
            replications: p.replications,
            epochs: p.epochs,
            batch_size: p.batch_size,
            metric: p.metric,
            downsample: p.downsample,
            stratified: p.stratified,
        }
    }
}

/// Corpus and resources loaded for a run.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub vocab: Vocabulary,
    pub data: ExperimentData,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves relative data paths against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.corpus, &mut cfg.data.embeddings, &mut cfg.data.groups] {
            if !p.is_empty() && Path::new(p.as_str()).is_relative() {
                *p = base.join(p.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    /// Canonical TOML with every key present.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.corpus.is_empty() {
            return Err(Error::Config("data.corpus is required".into()));
        }
        if self.data.embeddings.is_empty() && self.data.embedding_dim == 0 {
            return Err(Error::Config("data.embedding_dim must be positive".into()));
        }
        if self.model.channel2_mode.uses_groups() && self.data.groups.is_empty() {
            return Err(Error::Config(format!(
                "channel2_mode {} needs data.groups",
                self.model.channel2_mode.as_str()
            )));
        }
        self.model.to_model_config(2, self.seed).validate()?;
        self.protocol().validate()
    }

    pub fn protocol(&self) -> Protocol {
        let e = &self.experiment;
        Protocol {
            folds: e.folds,
            replications: e.replications,
            epochs: e.epochs,
            batch_size: e.batch_size,
            seed: self.seed,
            metric: e.metric,
            downsample: e.downsample,
            stratified: e.stratified,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.experiment.epochs,
            batch_size: self.experiment.batch_size,
            downsample: self.experiment.downsample,
        }
    }

    pub fn model_config(&self, num_classes: usize, seed: u64) -> ModelConfig {
        self.model.to_model_config(num_classes, seed)
    }

    /// Builds the vocabulary from the corpus, then loads embeddings and groups
    /// over it.
    pub fn load(&self) -> Result<LoadedData> {
        let raw = RawCorpus::read(&self.data.corpus)?;
        let vocab = Vocabulary::build(&raw.token_lists(), self.data.vocab_order)?;
        let dataset = Dataset::encode(&raw, &vocab)?;
        let pretrained = if self.data.embeddings.is_empty() {
            EmbeddingMatrix::new(random_uniform_matrix(
                vocab.len(),
                self.data.embedding_dim,
                OovPolicy::DEFAULT_SCALE,
                seed::derive(self.seed, "pretrained", &[]),
            ))?
        } else {
            let (m, stats) = load_pretrained(
                &self.data.embeddings,
                self.data.embedding_format,
                &vocab,
                OovPolicy::uniform(seed::derive(self.seed, "oov", &[])),
            )?;
            log::info!(
                "embeddings: {} entries, {} vocabulary words found, {} drawn at random",
                stats.file_entries,
                stats.found,
                stats.oov
            );
            m
        };
        let groups: Option<GroupTable> = if self.data.groups.is_empty() {
            None
        } else {
            Some(build_groups(self.data.group_kind, &self.data.groups, &vocab, self.data.prefix_depth)?)
        };
        Ok(LoadedData {
            vocab,
            data: ExperimentData {
                dataset,
                pretrained,
                groups,
            },
        })
    }
}
