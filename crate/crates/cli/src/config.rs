//! Versioned TOML configuration shared by every command.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use conceptlm::conceptset::{
    ExternalConfig, SupervisionProportion, DEFAULT_CANDIDATES, DEFAULT_SYNONYM_CAP,
};
use conceptlm::corpus::{CorpusConfig, Profile, VocabConfig};
use conceptlm::eval::{DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use conceptlm::model::ModelConfig;
use conceptlm::trainer::TrainConfig;
use conceptlm::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Master seed; every other seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub run_root: Option<PathBuf>,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub concepts: ConceptsSection,
    /// Post-training settings; `seed` and the concept weight are set per run.
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub n_domains: usize,
    pub concepts_per_domain: usize,
    pub tokens_per_concept: usize,
    pub n_function: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        let v = VocabConfig::default();
        Self {
            n_domains: v.n_domains,
            concepts_per_domain: v.concepts_per_domain,
            tokens_per_concept: v.tokens_per_concept,
            n_function: v.n_function,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub target_content_fraction: f64,
    pub pretrain_sequences: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub grammar: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            target_content_fraction: 0.28,
            pretrain_sequences: 4000,
            train_sequences: 2250,
            heldout_sequences: 1000,
            grammar: CorpusConfig::default(),
        }
    }
}

/// Next-token pretraining of the base model that proposes candidates and
/// initializes every post-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptsSection {
    pub provider: ProviderKind,
    pub candidates: usize,
    pub synonym_cap: usize,
    pub external: Option<ExternalConfig>,
}

impl Default for ConceptsSection {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Oracle,
            candidates: DEFAULT_CANDIDATES,
            synonym_cap: DEFAULT_SYNONYM_CAP,
            external: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Concepts,
    Noise,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Concepts => "concepts",
            Mode::Noise => "noise",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concepts" => Ok(Mode::Concepts),
            "noise" => Ok(Mode::Noise),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (concepts, noise)"
            ))),
        }
    }
}

/// One cartesian block of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub lambdas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub proportions: Vec<SupervisionProportion>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            modes: vec![Mode::Concepts],
            proportions: vec![SupervisionProportion::All],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub profiles: Vec<Profile>,
    pub model_sizes: Vec<String>,
    /// Blocks are unioned; duplicate points run once.
    pub grid: Vec<Grid>,
    /// Whether noise runs still count the original token in the concept
    /// mass. Off by default: the control replaces the whole set.
    pub noise_include_original: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            profiles: vec![Profile::A],
            model_sizes: vec!["desk".into()],
            grid: vec![Grid::default()],
            noise_include_original: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Sequences sampled for the clustering probe.
    pub cluster_sample: usize,
    pub bootstrap_resamples: usize,
    pub level: f64,
    /// Also score every model on the other profile's held-out corpus.
    pub ood: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            cluster_sample: 50,
            bootstrap_resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            ood: true,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            n_domains: self.vocab.n_domains,
            concepts_per_domain: self.vocab.concepts_per_domain,
            tokens_per_concept: self.vocab.tokens_per_concept,
            n_function: self.vocab.n_function,
            seed: conceptlm::rng::derive_seed_str(self.seed, "vocab"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.grammar.validate()?;
        let c = &self.corpus;
        if c.pretrain_sequences < 2 || c.train_sequences < 2 || c.heldout_sequences == 0 {
            return Err(Error::config(
                "need >= 2 pretrain and train sequences and >= 1 held-out",
            ));
        }
        if !(self.pretrain.learning_rate >= 0.0)
            || self.pretrain.epochs == 0
            || self.pretrain.batch_size == 0
        {
            return Err(Error::config(
                "pretrain needs learning_rate >= 0, epochs >= 1, batch_size >= 1",
            ));
        }
        if self.concepts.candidates == 0 {
            return Err(Error::config("concepts.candidates must be >= 1"));
        }
        match (self.concepts.provider, &self.concepts.external) {
            (ProviderKind::External, None) => {
                return Err(Error::config(
                    "provider = \"external\" needs a [concepts.external] table",
                ))
            }
            (ProviderKind::External, Some(ext)) => ext.validate()?,
            _ => {}
        }
        self.train.validate()?;
        let s = &self.sweep;
        if s.profiles.is_empty() || s.model_sizes.is_empty() || s.grid.is_empty() {
            return Err(Error::config(
                "sweep needs at least one profile, model size and grid block",
            ));
        }
        for size in &s.model_sizes {
            ModelConfig::preset(size, 2)?;
        }
        for g in &s.grid {
            if g.lambdas.is_empty() || g.modes.is_empty() || g.proportions.is_empty() {
                return Err(Error::config(
                    "every sweep grid block needs lambdas, modes and proportions",
                ));
            }
            if let Some(l) = g.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                return Err(Error::config(format!("lambda {l} outside [0, 1]")));
            }
        }
        if self.eval.cluster_sample < 2 {
            return Err(Error::config("eval.cluster_sample must be >= 2"));
        }
        if self.eval.bootstrap_resamples == 0 || !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            return Err(Error::config(
                "eval needs bootstrap_resamples >= 1 and level in (0, 1)",
            ));
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            run_root: None,
            vocab: VocabSection::default(),
            corpus: CorpusSection::default(),
            pretrain: PretrainSection::default(),
            concepts: ConceptsSection::default(),
            train: default_train(),
            sweep: SweepSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = PipelineConfig::parse("schema_version = 1\n").unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.sweep.grid.push(Grid {
            lambdas: vec![0.5],
            modes: vec![Mode::Noise],
            proportions: SupervisionProportion::ALL.to_vec(),
        });
        c.sweep.profiles.push(Profile::B);
        let back = PipelineConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejections() {
        assert!(PipelineConfig::parse("schema_version = 2").is_err());
        assert!(PipelineConfig::parse("schema_version = 1\nbogus = 3").is_err());
        assert!(
            PipelineConfig::parse("schema_version = 1\n[sweep]\nmodel_sizes = [\"huge\"]").is_err()
        );
        assert!(
            PipelineConfig::parse("schema_version = 1\n[[sweep.grid]]\nlambdas = [1.5]").is_err()
        );
        assert!(
            PipelineConfig::parse("schema_version = 1\n[concepts]\nprovider = \"external\"")
                .is_err()
        );
        assert!(PipelineConfig::parse("seed = 1").is_err());
    }
}
