use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vmsst::corpus::CorpusSpec;
use vmsst::evalkit::{EvalOptions, MarginOptions, MiningMethod};
use vmsst::model::ModelConfig;
use vmsst::trainer::TrainingConfig;
use vmsst::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Margin neighbourhood size.
    pub k_nn: usize,
    pub averaged_margin: bool,
    /// Mining methods whose per-language results are written to the report.
    pub methods: Vec<MiningMethod>,
    pub hubness_k: usize,
    /// Report file name inside the report directory.
    pub report: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_nn: 4,
            averaged_margin: false,
            methods: MiningMethod::ALL.to_vec(),
            hubness_k: 10,
            report: "report.json".into(),
        }
    }
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    /// `vocab_size` 0 means "derive from the corpus".
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

fn config_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// Prefixes the field of a configuration error with its section.
fn in_section(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => config_error(&format!("{section}.{field}"), message),
        Error::Spec(message) => config_error(section, message),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        serde_json::from_str(text).map_err(|e| config_error("config", e.to_string()).into())
    }

    /// Fills derived fields and checks every section and their agreement.
    pub fn finalize(&mut self) -> vmsst::Result<()> {
        self.corpus.validate().map_err(|e| in_section("corpus", e))?;
        let vocab = self.corpus.vocab().len();
        if self.model.vocab_size == 0 {
            self.model.vocab_size = vocab;
        }
        if self.model.vocab_size != vocab {
            return Err(config_error(
                "model.vocab_size",
                format!("{} but the corpus vocabulary has {vocab} tokens", self.model.vocab_size),
            ));
        }
        if self.model.n_languages != self.corpus.n_languages {
            return Err(config_error(
                "model.n_languages",
                format!(
                    "{} but the corpus has {} languages",
                    self.model.n_languages, self.corpus.n_languages
                ),
            ));
        }
        let longest = self.corpus.sentence_len.1 + 2;
        if self.model.max_len < longest {
            return Err(config_error(
                "model.max_len",
                format!(
                    "{} cannot hold a framed {}-word sentence",
                    self.model.max_len, self.corpus.sentence_len.1
                ),
            ));
        }
        self.model.validate().map_err(|e| in_section("model", e))?;
        self.training.validate().map_err(|e| in_section("training", e))?;
        if self.eval.k_nn == 0 {
            return Err(config_error("eval.k_nn", "must be at least 1"));
        }
        if self.eval.hubness_k == 0 {
            return Err(config_error("eval.hubness_k", "must be at least 1"));
        }
        if self.eval.report.is_empty() {
            return Err(config_error("eval.report", "empty file name"));
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            margin: self.margin_options(),
            hubness_k: self.eval.hubness_k,
            max_len: self.model.max_len,
        }
    }

    pub fn margin_options(&self) -> MarginOptions {
        MarginOptions {
            k_nn: self.eval.k_nn,
            averaged: self.eval.averaged_margin,
        }
    }

    /// SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }
}

/// A finalized configuration and the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

impl Loaded {
    /// Reads `path` (or takes the defaults), applies `seed` to both the corpus
    /// and the training run and any command-line `edit`, then finalizes.
    pub fn load(
        path: Option<&Path>,
        seed: Option<u64>,
        edit: impl FnOnce(&mut ExperimentConfig),
    ) -> anyhow::Result<Self> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let config = ExperimentConfig::from_json(&text)?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (config, base)
            }
            None => (ExperimentConfig::default(), PathBuf::from(".")),
        };
        if let Some(s) = seed {
            config.corpus.seed = s;
            config.training.seed = s;
        }
        edit(&mut config);
        config.finalize()?;
        Ok(Loaded { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus_dir)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.checkpoint_dir)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.report_dir)
    }
}
