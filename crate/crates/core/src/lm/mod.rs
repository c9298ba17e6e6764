//! The language-model contract used by decoding and fluency scoring, plus
//! the bundled n-gram model and sampler.

mod corpus;
mod ngram;
mod sampler;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{build_corpus, corpus_vocabulary, train_bundled, BundledLmConfig, CorpusMix};
pub use ngram::{train_ngram, NGramModel, BOS_MARKER};
pub use sampler::{nucleus_distribution, sample_completion, Sampler, SamplerConfig};

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("token {token:?} at position {position} is not in the model vocabulary")]
    OutOfVocabulary { token: String, position: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("empty text")]
    EmptyText,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
}

/// A fixed, ordered token inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::new(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary; later duplicates of a token are dropped.
    pub fn new(tokens: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(tokens.len());
        let mut kept = Vec::with_capacity(tokens.len());
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), kept.len() as TokenId);
                kept.push(t);
            }
        }
        Self {
            tokens: kept,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, LmError> {
        tokens
            .iter()
            .enumerate()
            .map(|(position, t)| {
                self.id(t.as_ref()).ok_or_else(|| LmError::OutOfVocabulary {
                    token: t.as_ref().to_string(),
                    position,
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// Next-token distributions over a fixed vocabulary.
///
/// `next_log_probs` returns one natural-log probability per vocabulary
/// entry, indexed by token id; their exponentials sum to one.
pub trait LanguageModel: Sync {
    fn vocab(&self) -> &Vocab;

    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64>;
}

/// Sum of next-token log-probabilities of `continuation` after `prefix`.
pub fn continuation_log_prob<M: LanguageModel + ?Sized>(
    model: &M,
    prefix: &[TokenId],
    continuation: &[TokenId],
) -> f64 {
    let mut ctx = prefix.to_vec();
    let mut total = 0.0;
    for &t in continuation {
        total += model.next_log_probs(&ctx)[t as usize];
        ctx.push(t);
    }
    total
}

/// Per-token negative log-likelihoods of `text`, conditioned from its start.
pub fn token_nlls<M: LanguageModel + ?Sized, S: AsRef<str>>(
    model: &M,
    text: &[S],
) -> Result<Vec<f64>, LmError> {
    let ids = model.vocab().encode(text)?;
    Ok((0..ids.len())
        .map(|t| -model.next_log_probs(&ids[..t])[ids[t] as usize])
        .collect())
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity<M: LanguageModel + ?Sized, S: AsRef<str>>(
    model: &M,
    text: &[S],
) -> Result<f64, LmError> {
    if text.is_empty() {
        return Err(LmError::EmptyText);
    }
    let nlls = token_nlls(model, text)?;
    Ok((nlls.iter().sum::<f64>() / nlls.len() as f64).exp())
}

/// Every token equally likely in every context.
#[derive(Debug, Clone)]
pub struct UniformModel {
    vocab: Vocab,
}

impl UniformModel {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }
}

impl LanguageModel for UniformModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_log_probs(&self, _prefix: &[TokenId]) -> Vec<f64> {
        vec![-(self.vocab.len() as f64).ln(); self.vocab.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(ts: &[&str]) -> Vocab {
        Vocab::new(ts.iter().map(|s| s.to_string()).collect())
    }

    /// Always puts all mass on the token after the previous one (cyclically).
    struct Successor(Vocab);

    impl LanguageModel for Successor {
        fn vocab(&self) -> &Vocab {
            &self.0
        }
        fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
            let n = self.0.len();
            let next = prefix.last().map_or(0, |&t| (t as usize + 1) % n);
            (0..n)
                .map(|i| if i == next { 0.0 } else { f64::NEG_INFINITY })
                .collect()
        }
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let m = UniformModel::new(vocab(&["a", "b", "c", "d"]));
        let text = ["a", "b", "c", "d", "a", "a", "b", "d", "c", "a"];
        assert!((perplexity(&m, &text).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let m = Successor(vocab(&["a", "b", "c"]));
        assert_eq!(perplexity(&m, &["a", "b", "c", "a"]).unwrap(), 1.0);
    }

    #[test]
    fn perplexity_errors() {
        let m = UniformModel::new(vocab(&["a", "b"]));
        assert_eq!(
            perplexity(&m, &["a", "zzz"]),
            Err(LmError::OutOfVocabulary {
                token: "zzz".into(),
                position: 1
            })
        );
        assert_eq!(perplexity::<_, &str>(&m, &[]), Err(LmError::EmptyText));
    }

    #[test]
    fn vocab_dedups_and_roundtrips() {
        let v = vocab(&["x", "y", "x"]);
        assert_eq!(v.len(), 2);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["x","y"]"#);
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
