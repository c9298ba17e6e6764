use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use conjunct_core::constraint::{ConstraintMode, ConstraintSpec};
use conjunct_core::decoder::DecodeConfig;
use conjunct_core::inlp::DEFAULT_L2_C;
use conjunct_core::lexicon::{Lexicon, LexiconError, OccupationSet};
use conjunct_core::lm::BundledLmConfig;
use conjunct_core::preference::BenchmarkConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::Strategy;

/// Problems found before any experiment work starts.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PromptOnly,
    Filter,
    CtrlgOr,
    CtrlgAnd,
    Sft,
    Dpo,
    Inlp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::PromptOnly,
        Method::Filter,
        Method::CtrlgOr,
        Method::CtrlgAnd,
        Method::Sft,
        Method::Dpo,
        Method::Inlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PromptOnly => "prompt_only",
            Method::Filter => "filter",
            Method::CtrlgOr => "ctrlg_or",
            Method::CtrlgAnd => "ctrlg_and",
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::Inlp => "inlp",
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            Method::PromptOnly => Strategy::PromptOnly,
            Method::Filter => Strategy::Filter,
            Method::CtrlgOr | Method::CtrlgAnd => Strategy::Ctrlg,
            Method::Sft => Strategy::Sft,
            Method::Dpo => Strategy::Dpo,
            Method::Inlp => Strategy::Inlp,
        }
    }

    /// Label that separates runs sharing a strategy.
    pub fn variant(self) -> &'static str {
        match self {
            Method::PromptOnly | Method::Filter => "ngram",
            Method::CtrlgOr => "or",
            Method::CtrlgAnd => "and",
            Method::Sft | Method::Dpo => "toy_policy",
            Method::Inlp => "low_rank",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown method {s:?}")))
    }
}

/// Which occupations the methods are prompted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Heldout,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthWindow {
    pub min_words: usize,
    pub max_words: usize,
    pub terminal: String,
}

impl Default for LengthWindow {
    fn default() -> Self {
        let spec = ConstraintSpec::new(ConstraintMode::And);
        Self {
            min_words: spec.min_words,
            max_words: spec.max_words,
            terminal: spec.terminal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCounts {
    /// Completions per occupation for every method.
    pub per_occupation: usize,
    /// Raw samples per occupation that generate-and-filter chooses from.
    pub filter_raw_per_occupation: usize,
    /// Draws allowed for a prompt-only completion to land in the length
    /// window before it is kept and flagged.
    pub length_attempts: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self {
            per_occupation: 50,
            filter_raw_per_occupation: 200,
            length_attempts: 3,
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InlpConfig {
    /// Rank of the factorized head whose hidden states are projected.
    pub rank: usize,
    pub l2_c: f64,
    pub max_iters: usize,
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            l2_c: DEFAULT_L2_C,
            max_iters: 20,
        }
    }
}

/// The fluency scorer: an n-gram model trained on its own corpus, drawn
/// with a fixed seed so that scores are comparable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceLmConfig {
    pub model: BundledLmConfig,
    pub seed: u64,
}

impl Default for ReferenceLmConfig {
    fn default() -> Self {
        Self {
            model: BundledLmConfig {
                order: 3,
                add_k: 0.1,
                corpus_size: 5000,
                ..BundledLmConfig::default()
            },
            seed: 20_240_601,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![42, 123, 456]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON lexicon file; the built-in lexicon when absent.
    pub lexicon: Option<PathBuf>,
    pub occupations: OccupationSet,
    pub eval_split: EvalSplit,
    pub length: LengthWindow,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub samples: SampleCounts,
    pub lm: BundledLmConfig,
    pub reference_lm: ReferenceLmConfig,
    pub decode: DecodeConfig,
    pub preference: BenchmarkConfig,
    pub inlp: InlpConfig,
    pub bootstrap_resamples: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lexicon: None,
            occupations: OccupationSet::default(),
            eval_split: EvalSplit::Heldout,
            length: LengthWindow::default(),
            methods: Method::ALL.to_vec(),
            seeds: default_seeds(),
            samples: SampleCounts::default(),
            lm: BundledLmConfig::default(),
            reference_lm: ReferenceLmConfig::default(),
            decode: DecodeConfig::default(),
            preference: BenchmarkConfig::default(),
            inlp: InlpConfig::default(),
            bootstrap_resamples: 1000,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.samples.per_occupation == 0 {
            return bad("samples.per_occupation must be positive");
        }
        if self.samples.length_attempts == 0 {
            return bad("samples.length_attempts must be positive");
        }
        if !(self.samples.top_p > 0.0 && self.samples.top_p <= 1.0) {
            return bad("samples.top_p must lie in (0, 1]");
        }
        if !(self.samples.temperature > 0.0) {
            return bad("samples.temperature must be positive");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be positive");
        }
        if self.decode.beam_width == 0 {
            return bad("decode.beam_width must be positive");
        }
        if self.inlp.rank == 0 {
            return bad("inlp.rank must be positive");
        }
        self.occupations.validate()?;
        if self.eval_occupations().is_empty() {
            return bad("the evaluation split has no occupations");
        }
        self.constraint(ConstraintMode::And)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.load_lexicon()?;
        Ok(())
    }

    pub fn load_lexicon(&self) -> Result<Lexicon, ConfigError> {
        match &self.lexicon {
            Some(path) => Ok(Lexicon::from_json_file(path)?),
            None => Ok(Lexicon::default()),
        }
    }

    pub fn eval_occupations(&self) -> Vec<String> {
        match self.eval_split {
            EvalSplit::Train => self.occupations.train.clone(),
            EvalSplit::Heldout => self.occupations.heldout.clone(),
            EvalSplit::All => self.occupations.all().cloned().collect(),
        }
    }

    pub fn constraint(&self, mode: ConstraintMode) -> ConstraintSpec {
        ConstraintSpec {
            mode,
            min_words: self.length.min_words,
            max_words: self.length.max_words,
            terminal: self.length.terminal.clone(),
            count_prompt_words: true,
        }
    }
}
