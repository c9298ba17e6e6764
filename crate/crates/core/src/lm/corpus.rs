use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lexicon::{filler_templates, Lexicon, Template, TraitClass, NEUTRAL_ADJECTIVES};
use crate::text::tokenize;

use super::{LmError, NGramModel};

/// Relative weights of the three sentence kinds in a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMix {
    /// Template instantiations with one term of each class.
    pub balanced: f64,
    /// Template instantiations with one slot neutralized.
    pub single_trait: f64,
    /// Trait-free filler sentences.
    pub neutral: f64,
}

impl Default for CorpusMix {
    fn default() -> Self {
        Self {
            balanced: 0.4,
            single_trait: 0.3,
            neutral: 0.3,
        }
    }
}

fn fill_neutral(frame: &str, occupation: &str, rng: &mut ChaCha8Rng) -> String {
    let adj = NEUTRAL_ADJECTIVES.choose(rng).expect("non-empty");
    frame.replace("{occupation}", occupation).replace("{neutral}", adj)
}

/// Sample `n` sentences from the template bank and filler frames.
pub fn build_corpus(
    lexicon: &Lexicon,
    occupations: &[String],
    templates: &[Template],
    mix: CorpusMix,
    n: usize,
    seed: u64,
) -> Vec<String> {
    assert!(!occupations.is_empty() && !templates.is_empty());
    let total = mix.balanced + mix.single_trait + mix.neutral;
    assert!(total > 0.0, "corpus mix must have positive mass");
    let fillers = filler_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let occ = occupations.choose(&mut rng).expect("non-empty");
            let u = rng.random::<f64>() * total;
            if u < mix.balanced + mix.single_trait {
                let t = templates.choose(&mut rng).expect("non-empty");
                let ag = lexicon.agentic().choose(&mut rng).expect("non-empty");
                let com = lexicon.communal().choose(&mut rng).expect("non-empty");
                if u < mix.balanced {
                    t.instantiate(occ, ag, com)
                } else {
                    let replaced = if rng.random_bool(0.5) {
                        TraitClass::Agentic
                    } else {
                        TraitClass::Communal
                    };
                    let filler = NEUTRAL_ADJECTIVES.choose(&mut rng).expect("non-empty");
                    t.instantiate_with_neutral(occ, ag, com, replaced, filler)
                }
            } else {
                let frame = fillers.choose(&mut rng).expect("non-empty");
                fill_neutral(frame, occ, &mut rng)
            }
        })
        .collect()
}

/// Every token any corpus built from these inputs can contain, sorted.
pub fn corpus_vocabulary(
    lexicon: &Lexicon,
    occupations: &[String],
    templates: &[Template],
) -> Vec<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    let mut add = |s: &str| words.extend(tokenize(s));
    for t in templates {
        add(&t
            .pattern
            .replace("{occupation}", " ")
            .replace("{agentic}", " ")
            .replace("{communal}", " "));
        // Capitalized first word of patterns that open with a slot.
        add(&t.instantiate("x", "x", "x"));
    }
    for f in filler_templates() {
        add(&f.replace("{occupation}", " ").replace("{neutral}", " "));
    }
    for w in lexicon
        .agentic()
        .iter()
        .chain(lexicon.communal())
        .chain(occupations)
        .map(String::as_str)
        .chain(NEUTRAL_ADJECTIVES)
    {
        add(w);
    }
    words.remove("x");
    words.remove("X");
    words.into_iter().collect()
}

fn default_order() -> usize {
    2
}
fn default_add_k() -> f64 {
    0.01
}
fn default_corpus_size() -> usize {
    2000
}

/// How the bundled n-gram model is built from a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundledLmConfig {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_add_k")]
    pub add_k: f64,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    #[serde(default)]
    pub mix: CorpusMix,
}

impl Default for BundledLmConfig {
    fn default() -> Self {
        Self {
            order: default_order(),
            add_k: default_add_k(),
            corpus_size: default_corpus_size(),
            mix: CorpusMix::default(),
        }
    }
}

/// Train an n-gram model on a seeded synthetic corpus. Its vocabulary is
/// [`corpus_vocabulary`], so every template and filler word is scorable.
pub fn train_bundled(
    lexicon: &Lexicon,
    occupations: &[String],
    templates: &[Template],
    config: &BundledLmConfig,
    seed: u64,
) -> Result<NGramModel, LmError> {
    let corpus: Vec<Vec<String>> =
        build_corpus(lexicon, occupations, templates, config.mix, config.corpus_size, seed)
            .iter()
            .map(|s| tokenize(s))
            .collect();
    let extra = corpus_vocabulary(lexicon, occupations, templates);
    NGramModel::train(&corpus, config.order, config.add_k, &extra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{classify, ComplianceLabel};
    use crate::lexicon::{default_templates, load_default_lexicon, OccupationSet};

    #[test]
    fn corpus_is_seeded_and_mixed() {
        let lex = load_default_lexicon();
        let occ: Vec<String> = OccupationSet::default().all().cloned().collect();
        let ts = default_templates();
        let a = build_corpus(&lex, &occ, &ts, CorpusMix::default(), 2000, 5);
        assert_eq!(a, build_corpus(&lex, &occ, &ts, CorpusMix::default(), 2000, 5));
        let count = |l: ComplianceLabel| a.iter().filter(|s| classify(s, &lex) == l).count();
        let both = count(ComplianceLabel::Both) as f64 / 2000.0;
        let neither = count(ComplianceLabel::Neither) as f64 / 2000.0;
        assert!((both - 0.4).abs() < 0.05, "{both}");
        assert!((neither - 0.3).abs() < 0.05, "{neither}");
    }

    #[test]
    fn vocabulary_covers_corpus() {
        let lex = load_default_lexicon();
        let occ: Vec<String> = OccupationSet::default().all().cloned().collect();
        let ts = default_templates();
        let vocab: BTreeSet<String> = corpus_vocabulary(&lex, &occ, &ts).into_iter().collect();
        for s in build_corpus(&lex, &occ, &ts, CorpusMix::default(), 3000, 11) {
            for t in tokenize(&s) {
                assert!(vocab.contains(&t), "{t} from {s}");
            }
        }
    }
}
