use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, TokenId, Vocab};

/// Context padding symbol used in serialized counts.
pub const BOS_MARKER: &str = "<s>";
const BOS: TokenId = TokenId::MAX;
const FORMAT_VERSION: u32 = 1;

/// Add-k smoothed n-gram model.
///
/// The first token of a sequence is conditioned on `order - 1` padding
/// symbols, which are never predicted and are not part of the vocabulary.
#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    add_k: f64,
    vocab: Vocab,
    counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>,
    rows: HashMap<Vec<TokenId>, Vec<f64>>,
    uniform: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    order: usize,
    add_k: f64,
    vocab: Vec<String>,
    counts: Vec<ContextCounts>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContextCounts {
    context: Vec<String>,
    next: BTreeMap<String, u64>,
}

/// Train on tokenized sentences. The vocabulary is every observed token
/// plus the terminal `"."`, sorted.
pub fn train_ngram<S: AsRef<str>>(
    corpus: &[Vec<S>],
    order: usize,
    add_k: f64,
) -> Result<NGramModel, LmError> {
    NGramModel::train(corpus, order, add_k, &[] as &[&str])
}

impl NGramModel {
    /// Train with `extra_vocab` added to the observed vocabulary, so that
    /// text from a disjoint corpus can still be scored.
    pub fn train<S: AsRef<str>, E: AsRef<str>>(
        corpus: &[Vec<S>],
        order: usize,
        add_k: f64,
        extra_vocab: &[E],
    ) -> Result<Self, LmError> {
        if corpus.is_empty() || corpus.iter().all(Vec::is_empty) {
            return Err(LmError::EmptyCorpus);
        }
        if order < 1 {
            return Err(LmError::InvalidModel("order must be at least 1".into()));
        }
        if !(add_k > 0.0 && add_k.is_finite()) {
            return Err(LmError::InvalidModel(format!("add_k must be positive, got {add_k}")));
        }
        let mut tokens: BTreeSet<String> = corpus
            .iter()
            .flatten()
            .map(|t| t.as_ref().to_string())
            .collect();
        tokens.extend(extra_vocab.iter().map(|t| t.as_ref().to_string()));
        tokens.insert(".".to_string());
        let vocab = Vocab::new(tokens.into_iter().collect());

        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
        for sentence in corpus {
            let ids = vocab.encode(sentence)?;
            let mut padded = vec![BOS; order - 1];
            padded.extend(&ids);
            for (i, &next) in ids.iter().enumerate() {
                let ctx = padded[i..i + order - 1].to_vec();
                *counts.entry(ctx).or_default().entry(next).or_default() += 1;
            }
        }
        Ok(Self::from_parts(order, add_k, vocab, counts))
    }

    fn from_parts(
        order: usize,
        add_k: f64,
        vocab: Vocab,
        counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>,
    ) -> Self {
        let v = vocab.len() as f64;
        let uniform = vec![-v.ln(); vocab.len()];
        let rows = counts
            .iter()
            .map(|(ctx, next)| {
                let total: u64 = next.values().sum();
                let denom = (total as f64 + add_k * v).ln();
                let mut row = vec![add_k.ln() - denom; vocab.len()];
                for (&t, &c) in next {
                    row[t as usize] = (c as f64 + add_k).ln() - denom;
                }
                (ctx.clone(), row)
            })
            .collect();
        Self {
            order,
            add_k,
            vocab,
            counts,
            rows,
            uniform,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    fn context(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let n = self.order - 1;
        let mut ctx = vec![BOS; n.saturating_sub(prefix.len())];
        ctx.extend(&prefix[prefix.len().saturating_sub(n)..]);
        ctx
    }

    pub fn prob(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        self.next_log_probs(prefix)[token as usize].exp()
    }

    pub fn to_json(&self) -> String {
        let name = |t: TokenId| {
            if t == BOS {
                BOS_MARKER.to_string()
            } else {
                self.vocab.token(t).to_string()
            }
        };
        let file = ModelFile {
            version: FORMAT_VERSION,
            order: self.order,
            add_k: self.add_k,
            vocab: self.vocab.tokens().to_vec(),
            counts: self
                .counts
                .iter()
                .map(|(ctx, next)| ContextCounts {
                    context: ctx.iter().map(|&t| name(t)).collect(),
                    next: next.iter().map(|(&t, &c)| (name(t), c)).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| LmError::InvalidModel(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(LmError::UnsupportedVersion(file.version));
        }
        if file.order < 1 || !(file.add_k > 0.0) {
            return Err(LmError::InvalidModel("bad order or add_k".into()));
        }
        let vocab = Vocab::new(file.vocab);
        let id = |t: &str| -> Result<TokenId, LmError> {
            if t == BOS_MARKER {
                Ok(BOS)
            } else {
                vocab.id(t).ok_or_else(|| {
                    LmError::InvalidModel(format!("count refers to unknown token {t:?}"))
                })
            }
        };
        let mut counts = BTreeMap::new();
        for cc in file.counts {
            if cc.context.len() != file.order - 1 {
                return Err(LmError::InvalidModel("context length does not match order".into()));
            }
            let ctx = cc.context.iter().map(|t| id(t)).collect::<Result<Vec<_>, _>>()?;
            let mut next = BTreeMap::new();
            for (t, c) in cc.next {
                next.insert(id(&t)?, c);
            }
            counts.insert(ctx, next);
        }
        Ok(Self::from_parts(file.order, file.add_k, vocab, counts))
    }
}

impl LanguageModel for NGramModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.rows
            .get(&self.context(prefix))
            .unwrap_or(&self.uniform)
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::perplexity;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn add_one_hand_count() {
        let m = train_ngram(&corpus(&["a b", "a c"]), 2, 1.0).unwrap();
        let v = m.vocab();
        assert_eq!(v.tokens(), &[".", "a", "b", "c"]);
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        // (1 + 1) / (2 + 4)
        assert!((m.prob(&[a], b) - 1.0 / 3.0).abs() < 1e-12);
        // First token: (2 + 1) / (2 + 4)
        assert!((m.prob(&[], a) - 0.5).abs() < 1e-12);
        // PPL("a b") = (1/2 * 1/3)^(-1/2)
        let ppl = perplexity(&m, &["a", "b"]).unwrap();
        assert!((ppl - 6f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn vanishing_smoothing_recovers_mle() {
        let m = train_ngram(&corpus(&["a b", "a b"]), 2, 1e-12).unwrap();
        let v = m.vocab();
        assert!((m.prob(&[v.id("a").unwrap()], v.id("b").unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distributions_normalize_everywhere() {
        let m = train_ngram(&corpus(&["x y z .", "y y x .", "z x"]), 3, 0.1).unwrap();
        let n = m.vocab().len() as TokenId;
        let mut prefixes = vec![vec![]];
        for a in 0..n {
            prefixes.push(vec![a]);
            for b in 0..n {
                prefixes.push(vec![a, b]);
            }
        }
        for p in prefixes {
            let s: f64 = m.next_log_probs(&p).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unigram_ignores_context() {
        let m = train_ngram(&corpus(&["a a b"]), 1, 1.0).unwrap();
        assert_eq!(m.next_log_probs(&[]), m.next_log_probs(&[1, 2, 1]));
    }

    #[test]
    fn errors() {
        assert_eq!(
            train_ngram::<String>(&[], 2, 0.1).unwrap_err(),
            LmError::EmptyCorpus
        );
        assert!(train_ngram(&corpus(&["a"]), 0, 0.1).is_err());
        assert!(train_ngram(&corpus(&["a"]), 2, 0.0).is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let m = NGramModel::train(&corpus(&["a b c .", "b c a ."]), 3, 0.1, &["zeta"]).unwrap();
        let text = m.to_json();
        let back = NGramModel::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back.vocab(), m.vocab());
        for p in [vec![], vec![0], vec![1, 2], vec![3, 1, 0]] {
            assert_eq!(back.next_log_probs(&p), m.next_log_probs(&p));
        }
        let bumped = text.replace("\"version\":1", "\"version\":9");
        assert_eq!(
            NGramModel::from_json(&bumped).unwrap_err(),
            LmError::UnsupportedVersion(9)
        );
    }
}
