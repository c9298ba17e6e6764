//! Constraint-satisfying generation: automaton-guided beam search and the
//! sample-then-filter baseline.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{ConstraintAutomaton, ConstraintError, ConstraintMode, ConstraintState};
use crate::lexicon::{prompt_stem, Lexicon, TraitClass};
use crate::lm::{LanguageModel, LmError, Sampler, SamplerConfig, TokenId};
use crate::constraint::TermRecognizer;
use crate::text::{detokenize, surface_piece, tokenize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
}

fn default_beam_width() -> usize {
    16
}
fn default_samples() -> usize {
    1
}
fn default_max_tokens() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    /// Outputs wanted per prompt from [`decode_samples`].
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
    /// Keep hypotheses the automaton has ruled out in the beam. They still
    /// never appear in the output.
    #[serde(default)]
    pub keep_infeasible: bool,
    /// Hard cap on generated tokens, since punctuation adds no words.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Rank by mean instead of summed log-probability.
    #[serde(default)]
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: default_beam_width(),
            samples_per_prompt: default_samples(),
            keep_infeasible: false,
            max_tokens: default_max_tokens(),
            length_normalize: false,
        }
    }
}

/// A generated continuation (prompt excluded) with its model score and the
/// automaton state after reading prompt and continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub cstate: ConstraintState,
}

impl BeamHypothesis {
    fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Why a search returned nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    /// No term of these classes can be spelled with the model vocabulary.
    UnrealizableClass(Vec<TraitClass>),
    /// Every class is spellable but no accepted string fits the budget.
    NoAcceptingPath,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnrealizableClass(classes) => {
                let names: Vec<&str> = classes.iter().map(|c| c.name()).collect();
                write!(
                    f,
                    "no {} term can be produced from the model vocabulary",
                    names.join(" or ")
                )
            }
            Diagnostic::NoAcceptingPath => {
                write!(f, "no accepted continuation within the length and token limits")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Accepted hypotheses, best first.
    pub hypotheses: Vec<BeamHypothesis>,
    /// Set exactly when `hypotheses` is empty.
    pub diagnostic: Option<Diagnostic>,
}

/// Trait classes none of whose terms the vocabulary can spell, either as one
/// token or as the tokenization of the term.
pub fn unrealizable_classes(lexicon: &Lexicon, vocab_tokens: &[String]) -> Vec<TraitClass> {
    let lower: std::collections::HashSet<String> =
        vocab_tokens.iter().map(|t| t.to_lowercase()).collect();
    [TraitClass::Agentic, TraitClass::Communal]
        .into_iter()
        .filter(|&class| {
            !lexicon.terms(class).iter().any(|term| {
                lower.contains(term) || tokenize(term).iter().all(|p| lower.contains(p))
            })
        })
        .collect()
}

/// Surface pieces of every vocabulary token, at the start of text and later.
struct Pieces {
    first: Vec<String>,
    rest: Vec<String>,
}

impl Pieces {
    fn new(tokens: &[String]) -> Self {
        Self {
            first: tokens.iter().map(|t| surface_piece(t, true)).collect(),
            rest: tokens.iter().map(|t| surface_piece(t, false)).collect(),
        }
    }

    fn get(&self, token: TokenId, first: bool) -> &str {
        if first {
            &self.first[token as usize]
        } else {
            &self.rest[token as usize]
        }
    }
}

fn rank(a: &BeamHypothesis, b: &BeamHypothesis, normalize: bool) -> Ordering {
    b.score(normalize)
        .total_cmp(&a.score(normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_prompt<M: LanguageModel + ?Sized>(model: &M, prompt: &[TokenId]) -> Result<(), LmError> {
    let n = model.vocab().len();
    match prompt.iter().position(|&t| t as usize >= n) {
        Some(position) => Err(LmError::OutOfVocabulary {
            token: format!("#{}", prompt[position]),
            position,
        }),
        None => Ok(()),
    }
}

struct Search<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    automaton: &'a ConstraintAutomaton,
    prompt: &'a [TokenId],
    config: &'a DecodeConfig,
    pieces: Pieces,
}

impl<M: LanguageModel + ?Sized> Search<'_, M> {
    fn root(&self) -> Result<BeamHypothesis, DecodeError> {
        let text = detokenize(self.model.vocab().decode(self.prompt).as_slice());
        Ok(BeamHypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            cstate: self.automaton.start_with_prompt(&text)?,
        })
    }

    /// Scored one-token extensions of `h` that survive pruning.
    fn expand(&self, h: &BeamHypothesis, out: &mut Vec<BeamHypothesis>) {
        let mut ctx = self.prompt.to_vec();
        ctx.extend(&h.tokens);
        let first = ctx.is_empty();
        let log_probs = self.model.next_log_probs(&ctx);
        for (t, &lp) in log_probs.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let Ok(cstate) = self.automaton.step(&h.cstate, self.pieces.get(t as TokenId, first))
            else {
                continue;
            };
            let keep = if cstate.terminated() {
                self.automaton.is_accepting(&cstate)
            } else {
                self.config.keep_infeasible || self.automaton.is_feasible(&cstate)
            };
            if keep {
                let mut tokens = h.tokens.clone();
                tokens.push(t as TokenId);
                out.push(BeamHypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    cstate,
                });
            }
        }
    }

    fn run(&self, mut live: Vec<BeamHypothesis>) -> Vec<BeamHypothesis> {
        let normalize = self.config.length_normalize;
        let mut finished = Vec::new();
        while !live.is_empty() {
            let mut candidates = Vec::new();
            for h in &live {
                if h.tokens.len() < self.config.max_tokens {
                    self.expand(h, &mut candidates);
                }
            }
            let (done, mut open): (Vec<_>, Vec<_>) =
                candidates.into_iter().partition(|h| h.cstate.terminated());
            finished.extend(done);
            open.sort_by(|a, b| rank(a, b, normalize));
            open.truncate(self.config.beam_width);
            live = open;
        }
        finished.sort_by(|a, b| rank(a, b, normalize));
        finished
    }

    fn diagnose(&self, lexicon: &Lexicon) -> Diagnostic {
        let mut missing = unrealizable_classes(lexicon, self.model.vocab().tokens());
        if self.automaton.spec().mode == ConstraintMode::Or && missing.len() < 2 {
            missing.clear();
        }
        if missing.is_empty() {
            Diagnostic::NoAcceptingPath
        } else {
            Diagnostic::UnrealizableClass(missing)
        }
    }
}

/// Beam search restricted to continuations the automaton can still accept.
///
/// Candidates are ranked by summed log-probability (ties broken by token
/// sequence); terminated candidates leave the beam and are collected.
/// The search ends once no open hypothesis remains.
pub fn constrained_beam_search<M: LanguageModel + ?Sized>(
    model: &M,
    automaton: &ConstraintAutomaton,
    lexicon: &Lexicon,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<SearchOutcome, DecodeError> {
    if config.beam_width == 0 {
        return Err(DecodeError::ZeroBeamWidth);
    }
    check_prompt(model, prompt)?;
    let search = Search {
        model,
        automaton,
        prompt,
        config,
        pieces: Pieces::new(model.vocab().tokens()),
    };
    let hypotheses = search.run(vec![search.root()?]);
    let diagnostic = hypotheses.is_empty().then(|| search.diagnose(lexicon));
    Ok(SearchOutcome {
        hypotheses,
        diagnostic,
    })
}

/// Up to `samples_per_prompt` distinct accepted outputs for one prompt.
///
/// The best `beam_width` feasible first tokens each seed their own beam
/// search; results are merged round-robin by rank (rank-0 outputs of every
/// branch first, best branch first) so that the batch is not dominated by
/// one opening.
pub fn decode_samples<M: LanguageModel + ?Sized>(
    model: &M,
    automaton: &ConstraintAutomaton,
    lexicon: &Lexicon,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> Result<SearchOutcome, DecodeError> {
    if config.beam_width == 0 {
        return Err(DecodeError::ZeroBeamWidth);
    }
    check_prompt(model, prompt)?;
    let search = Search {
        model,
        automaton,
        prompt,
        config,
        pieces: Pieces::new(model.vocab().tokens()),
    };
    let root = search.root()?;
    let mut openings = Vec::new();
    if config.max_tokens > 0 {
        search.expand(&root, &mut openings);
    }
    openings.sort_by(|a, b| rank(a, b, config.length_normalize));
    openings.truncate(config.beam_width);

    let branches: Vec<Vec<BeamHypothesis>> = openings
        .into_iter()
        .map(|h| {
            if h.cstate.terminated() {
                vec![h]
            } else {
                search.run(vec![h])
            }
        })
        .collect();
    let mut hypotheses = Vec::new();
    let deepest = branches.iter().map(Vec::len).max().unwrap_or(0);
    'merge: for r in 0..deepest {
        let mut layer: Vec<&BeamHypothesis> = branches.iter().filter_map(|b| b.get(r)).collect();
        layer.sort_by(|a, b| rank(a, b, config.length_normalize));
        for h in layer {
            if hypotheses.len() == config.samples_per_prompt {
                break 'merge;
            }
            hypotheses.push(h.clone());
        }
    }
    let diagnostic = hypotheses.is_empty().then(|| search.diagnose(lexicon));
    Ok(SearchOutcome {
        hypotheses,
        diagnostic,
    })
}

/// Token ids of the standard prompt stem for `occupation`.
pub fn prompt_tokens<M: LanguageModel + ?Sized>(
    model: &M,
    occupation: &str,
) -> Result<Vec<TokenId>, LmError> {
    model.vocab().encode(&tokenize(&prompt_stem(occupation)))
}

/// Full sentence text of prompt plus continuation.
pub fn render<M: LanguageModel + ?Sized>(model: &M, prompt: &[TokenId], tokens: &[TokenId]) -> String {
    let vocab = model.vocab();
    let mut all = vocab.decode(prompt);
    all.extend(vocab.decode(tokens));
    detokenize(&all)
}

/// A sampled completion rendered as text, with its log-probability under
/// the model it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub text: String,
    pub log_prob: f64,
}

/// `n` seeded nucleus samples continuing `prompt`, each stopping at `"."`
/// or after `max_tokens`.
pub fn sample_raw<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    n: usize,
    config: &SamplerConfig,
    max_tokens: usize,
) -> Result<Vec<Sample>, LmError> {
    check_prompt(model, prompt)?;
    let stop = model.vocab().id(".").unwrap_or(TokenId::MAX);
    let mut sampler = Sampler::new(*config);
    Ok((0..n)
        .map(|_| {
            let tokens = sampler.sample_completion(model, prompt, stop, max_tokens);
            Sample {
                text: render(model, prompt, &tokens),
                log_prob: crate::lm::continuation_log_prob(model, prompt, &tokens),
            }
        })
        .collect())
}

/// Keeps OR-compliant texts in their original order, at most `cap` of them.
pub fn filter_or<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    lexicon: &Lexicon,
    cap: usize,
) -> Vec<String> {
    let recognizer = TermRecognizer::new(lexicon);
    texts
        .into_iter()
        .filter(|t| recognizer.classify(t).is_or_compliant())
        .take(cap)
        .map(str::to_string)
        .collect()
}

/// Samples `n_raw` completions and keeps at most `cap` OR-compliant ones.
pub fn generate_and_filter<M: LanguageModel + ?Sized>(
    model: &M,
    lexicon: &Lexicon,
    prompt: &[TokenId],
    n_raw: usize,
    cap: usize,
    config: &SamplerConfig,
) -> Result<Vec<String>, LmError> {
    let raw = sample_raw(model, prompt, n_raw, config, default_max_tokens())?;
    Ok(filter_or(raw.iter().map(|s| s.text.as_str()), lexicon, cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{classify, ComplianceLabel, ConstraintSpec};
    use crate::lexicon::{default_templates, load_default_lexicon, OccupationSet};
    use crate::lm::{build_corpus, continuation_log_prob, corpus_vocabulary, CorpusMix, NGramModel, Vocab};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Bigram model over a small vocabulary where every token has a few
    /// allowed successors with random weights.
    struct SparseBigram {
        vocab: Vocab,
        rows: Vec<Vec<f64>>,
    }

    impl SparseBigram {
        fn random(tokens: &[&str], fanout: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = tokens.len();
            let rows = (0..=v)
                .map(|_| {
                    let mut w = vec![0.0; v];
                    for _ in 0..fanout {
                        w[rng.random_range(0..v)] += rng.random::<f64>() + 0.05;
                    }
                    let total: f64 = w.iter().sum();
                    w.iter().map(|x| (x / total).ln()).collect()
                })
                .collect();
            Self {
                vocab: Vocab::new(tokens.iter().map(|s| s.to_string()).collect()),
                rows,
            }
        }
    }

    impl LanguageModel for SparseBigram {
        fn vocab(&self) -> &Vocab {
            &self.vocab
        }
        fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
            let row = prefix.last().map_or(self.vocab.len(), |&t| t as usize);
            self.rows[row].clone()
        }
    }

    const TOY: [&str; 11] = [
        "the", "nurse", "was", "bold", "confident", "caring", "loyal", "and", "very", "busy", ".",
    ];

    fn toy_automaton(mode: ConstraintMode, max_words: usize) -> ConstraintAutomaton {
        let spec = ConstraintSpec {
            min_words: 3,
            max_words,
            ..ConstraintSpec::new(mode)
        };
        ConstraintAutomaton::compile(&spec, &load_default_lexicon()).unwrap()
    }

    /// Best accepted string by depth-first enumeration of every token
    /// sequence, judged by a plain word scan.
    fn brute_force_best(model: &SparseBigram, max_words: usize) -> Option<(Vec<TokenId>, f64)> {
        let lex = load_default_lexicon();
        let accepted = |toks: &[TokenId]| {
            let words: Vec<&str> = model
                .vocab()
                .decode(toks)
                .into_iter()
                .filter(|t| *t != ".")
                .collect();
            let ag = words.iter().any(|w| lex.agentic().iter().any(|t| t == w));
            let co = words.iter().any(|w| lex.communal().iter().any(|t| t == w));
            ag && co && (3..=max_words).contains(&words.len())
        };
        fn go(
            m: &SparseBigram,
            toks: &mut Vec<TokenId>,
            lp: f64,
            words: usize,
            max_words: usize,
            accepted: &dyn Fn(&[TokenId]) -> bool,
            best: &mut Option<(Vec<TokenId>, f64)>,
        ) {
            let stop = m.vocab().id(".").unwrap();
            for (t, &l) in m.next_log_probs(toks).iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let t = t as TokenId;
                toks.push(t);
                if t == stop {
                    if accepted(toks) && best.as_ref().is_none_or(|b| lp + l > b.1) {
                        *best = Some((toks.clone(), lp + l));
                    }
                } else if words < max_words {
                    go(m, toks, lp + l, words + 1, max_words, accepted, best);
                }
                toks.pop();
            }
        }
        let mut best = None;
        go(model, &mut Vec::new(), 0.0, 0, max_words, &accepted, &mut best);
        best
    }

    #[test]
    fn beam_matches_exhaustive_argmax() {
        let mut checked = 0;
        for seed in 0..12 {
            let model = SparseBigram::random(&TOY, 3, seed);
            let automaton = toy_automaton(ConstraintMode::And, 8);
            let config = DecodeConfig {
                beam_width: 1 << 20,
                ..DecodeConfig::default()
            };
            let out = constrained_beam_search(&model, &automaton, &load_default_lexicon(), &[], &config)
                .unwrap();
            match brute_force_best(&model, 8) {
                Some((tokens, lp)) => {
                    let top = &out.hypotheses[0];
                    assert_eq!(top.tokens, tokens, "seed {seed}");
                    assert!((top.log_prob - lp).abs() < 1e-9);
                    checked += 1;
                }
                None => assert!(out.hypotheses.is_empty()),
            }
        }
        assert!(checked >= 4, "too few instances had an accepted string");
    }

    #[test]
    fn hypotheses_are_consistent_and_sound() {
        let lex = load_default_lexicon();
        for seed in 0..6 {
            let model = SparseBigram::random(&TOY, 4, 100 + seed);
            for mode in [ConstraintMode::And, ConstraintMode::Or] {
                let automaton = toy_automaton(mode, 9);
                let config = DecodeConfig {
                    beam_width: 8,
                    ..DecodeConfig::default()
                };
                let out = constrained_beam_search(&model, &automaton, &lex, &[], &config).unwrap();
                assert_eq!(out.hypotheses.is_empty(), out.diagnostic.is_some());
                for w in out.hypotheses.windows(2) {
                    assert!(w[0].log_prob >= w[1].log_prob);
                }
                for h in &out.hypotheses {
                    assert!(automaton.is_accepting(&h.cstate));
                    let text = render(&model, &[], &h.tokens);
                    assert_eq!(automaton.run(&text).unwrap(), h.cstate);
                    let lp = continuation_log_prob(&model, &[], &h.tokens);
                    assert!((lp - h.log_prob).abs() < 1e-9);
                    let label = classify(&text, &lex);
                    match mode {
                        ConstraintMode::And => assert_eq!(label, ComplianceLabel::Both),
                        ConstraintMode::Or => assert!(label.is_or_compliant()),
                    }
                }
            }
        }
    }

    #[test]
    fn missing_class_is_diagnosed() {
        let tokens = ["the", "nurse", "was", "bold", "and", "busy", "."];
        let model = SparseBigram::random(&tokens, 7, 1);
        let lex = load_default_lexicon();
        let and = toy_automaton(ConstraintMode::And, 10);
        let out = constrained_beam_search(&model, &and, &lex, &[], &DecodeConfig::default()).unwrap();
        assert!(out.hypotheses.is_empty());
        assert_eq!(
            out.diagnostic,
            Some(Diagnostic::UnrealizableClass(vec![TraitClass::Communal]))
        );
        assert!(out.diagnostic.unwrap().to_string().contains("communal"));
        // OR mode can still succeed through the agentic side.
        let or = toy_automaton(ConstraintMode::Or, 10);
        let out = constrained_beam_search(&model, &or, &lex, &[], &DecodeConfig::default()).unwrap();
        assert!(out.diagnostic.is_none());
    }

    #[test]
    fn config_and_prompt_errors() {
        let model = SparseBigram::random(&TOY, 3, 0);
        let lex = load_default_lexicon();
        let a = toy_automaton(ConstraintMode::And, 10);
        let zero = DecodeConfig {
            beam_width: 0,
            ..DecodeConfig::default()
        };
        assert_eq!(
            constrained_beam_search(&model, &a, &lex, &[], &zero).unwrap_err(),
            DecodeError::ZeroBeamWidth
        );
        assert!(matches!(
            constrained_beam_search(&model, &a, &lex, &[99], &DecodeConfig::default()),
            Err(DecodeError::Lm(LmError::OutOfVocabulary { position: 0, .. }))
        ));
        let cfg: DecodeConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, DecodeConfig::default());
    }

    fn bundled() -> (NGramModel, Lexicon) {
        let lex = load_default_lexicon();
        let occ: Vec<String> = OccupationSet::default().all().cloned().collect();
        let ts = default_templates();
        let corpus: Vec<Vec<String>> = build_corpus(&lex, &occ, &ts, CorpusMix::default(), 2000, 3)
            .iter()
            .map(|s| tokenize(s))
            .collect();
        let extra = corpus_vocabulary(&lex, &occ, &ts);
        (NGramModel::train(&corpus, 2, 0.01, &extra).unwrap(), lex)
    }

    #[test]
    fn fan_out_on_bundled_model() {
        let (model, lex) = bundled();
        let and = ConstraintAutomaton::compile(&ConstraintSpec::new(ConstraintMode::And), &lex).unwrap();
        let prompt = prompt_tokens(&model, "nurse").unwrap();
        let config = DecodeConfig {
            samples_per_prompt: 20,
            ..DecodeConfig::default()
        };
        let out = decode_samples(&model, &and, &lex, &prompt, &config).unwrap();
        assert_eq!(out.hypotheses.len(), 20);
        let texts: std::collections::BTreeSet<String> =
            out.hypotheses.iter().map(|h| render(&model, &prompt, &h.tokens)).collect();
        assert_eq!(texts.len(), 20);
        for t in &texts {
            assert!(t.starts_with("The nurse was"));
            assert!(and.accepts(t), "{t}");
        }
    }

    #[test]
    fn filtering_only_selects() {
        let (model, lex) = bundled();
        let prompt = prompt_tokens(&model, "chef").unwrap();
        let cfg = SamplerConfig::with_seed(4);
        let raw = sample_raw(&model, &prompt, 300, &cfg, 32).unwrap();
        let kept = generate_and_filter(&model, &lex, &prompt, 300, 1000, &cfg).unwrap();
        let expected: Vec<String> = raw
            .iter()
            .filter(|s| classify(&s.text, &lex).is_or_compliant())
            .map(|s| s.text.clone())
            .collect();
        assert_eq!(kept, expected);
        let capped = generate_and_filter(&model, &lex, &prompt, 300, 5, &cfg).unwrap();
        assert_eq!(capped, expected[..5]);
        assert!(filter_or(["The chef was busy."], &lex, 10).is_empty());
    }
}
