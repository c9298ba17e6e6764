//! Supervised and pairwise-preference training of a small log-linear text
//! policy, plus the benchmark that contrasts the two objectives.
//!
//! The policy scores the next token from the last two tokens:
//! `logits = bigram[prev] + trigram[(prev2, prev)]`, where the trigram row
//! exists only for contexts registered when the policy was built. Both
//! losses are minimized by plain full-batch gradient descent, so every run
//! is deterministic.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{prompt_tokens, render};
use crate::lexicon::{
    generate_preference_pairs, generate_sft_dataset, Lexicon, LexiconError, OccupationSet,
    PreferencePair, Template, TrainingExample,
};
use crate::lm::{
    build_corpus, continuation_log_prob, corpus_vocabulary, CorpusMix, LanguageModel, LmError,
    Sampler, SamplerConfig, TokenId, Vocab, BOS_MARKER,
};
use crate::metrics::{ComplianceReport, MetricsError};
use crate::constraint::TermRecognizer;
use crate::text::tokenize;

const BOS: TokenId = TokenId::MAX;
const FORMAT_VERSION: u32 = 1;
/// Completions are cut here if no terminal has been drawn.
pub const MAX_SAMPLE_TOKENS: usize = 32;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no training data")]
    EmptyData,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("policy file: {0}")]
    Format(String),
    #[error("unsupported policy format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Trainable next-token policy.
///
/// The logits at a position add a row chosen by the previous token, a row
/// chosen by the token before it and, for registered contexts, a row
/// chosen by the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocab,
    pairs: Vec<(TokenId, TokenId)>,
    index: HashMap<(TokenId, TokenId), usize>,
    /// `2 * (V + 1)` rows of `V` logits (previous-token rows, then
    /// second-previous-token rows; row `V` of each block is sentence start)
    /// followed by one row per registered pair.
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    vocab: Vec<String>,
    pairs: Vec<[String; 2]>,
    params: Vec<f64>,
}

/// Contexts `(prev2, prev)` seen at each position of a sequence.
fn contexts_of(seq: &[TokenId]) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
    (0..seq.len()).map(move |i| {
        let p1 = if i >= 1 { seq[i - 1] } else { BOS };
        let p2 = if i >= 2 { seq[i - 2] } else { BOS };
        (p2, p1)
    })
}

fn n_params(v: usize, pairs: usize) -> usize {
    (2 * (v + 1) + pairs) * v
}

impl ToyPolicy {
    /// The all-zero, uniform policy with a pair row for every context of
    /// `sequences` that avoids the `shared` tokens. Contexts containing a
    /// shared token use only the single-token rows, so whatever is learned
    /// there carries over to every token of the shared set.
    pub fn new(vocab: Vocab, sequences: &[Vec<TokenId>], shared: &[TokenId]) -> Self {
        let mut pairs = Vec::new();
        let mut index = HashMap::new();
        for s in sequences {
            for c in contexts_of(s) {
                if c.1 == BOS || shared.contains(&c.0) || shared.contains(&c.1) {
                    continue;
                }
                index.entry(c).or_insert_with(|| {
                    pairs.push(c);
                    pairs.len() - 1
                });
            }
        }
        let n = n_params(vocab.len(), pairs.len());
        Self {
            vocab,
            pairs,
            index,
            params: vec![0.0; n],
        }
    }

    /// A uniform policy with single-token rows only.
    pub fn uniform(vocab: Vocab) -> Self {
        Self::new(vocab, &[], &[])
    }

    pub fn n_pair_rows(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Encode the tokens of `text`, checking the vocabulary.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        self.vocab.encode(&tokenize(text))
    }

    fn slot(&self, t: TokenId) -> usize {
        if t == BOS {
            self.vocab.len()
        } else {
            t as usize
        }
    }

    /// Parameter rows whose sum gives the logits at context `c`.
    fn rows(&self, c: (TokenId, TokenId)) -> Rows {
        let v = self.vocab.len();
        Rows {
            prev: self.slot(c.1),
            prev2: v + 1 + self.slot(c.0),
            pair: self.index.get(&c).map(|&i| 2 * (v + 1) + i),
        }
    }

    fn log_softmax_rows(&self, r: Rows) -> Vec<f64> {
        let v = self.vocab.len();
        let row = |i: usize| &self.params[i * v..(i + 1) * v];
        let mut z: Vec<f64> = row(r.prev).iter().zip(row(r.prev2)).map(|(x, y)| x + y).collect();
        if let Some(t) = r.pair {
            for (zi, ti) in z.iter_mut().zip(row(t)) {
                *zi += ti;
            }
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for x in &mut z {
            *x -= lse;
        }
        z
    }

    pub fn to_json(&self) -> String {
        let name = |t: TokenId| {
            if t == BOS {
                BOS_MARKER.to_string()
            } else {
                self.vocab.token(t).to_string()
            }
        };
        let file = PolicyFile {
            version: FORMAT_VERSION,
            vocab: self.vocab.tokens().to_vec(),
            pairs: self.pairs.iter().map(|&(a, b)| [name(a), name(b)]).collect(),
            params: self.params.clone(),
        };
        serde_json::to_string(&file).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PreferenceError> {
        let file: PolicyFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(PreferenceError::UnsupportedVersion(file.version));
        }
        let vocab = Vocab::new(file.vocab);
        let id = |t: &str| -> Result<TokenId, PreferenceError> {
            if t == BOS_MARKER {
                Ok(BOS)
            } else {
                vocab
                    .id(t)
                    .ok_or_else(|| PreferenceError::Format(format!("unknown context token {t:?}")))
            }
        };
        let mut pairs = Vec::with_capacity(file.pairs.len());
        let mut index = HashMap::new();
        for [a, b] in &file.pairs {
            let c = (id(a)?, id(b)?);
            if index.insert(c, pairs.len()).is_some() {
                return Err(PreferenceError::Format(format!("duplicate context {a:?} {b:?}")));
            }
            pairs.push(c);
        }
        let expected = n_params(vocab.len(), pairs.len());
        if file.params.len() != expected {
            return Err(PreferenceError::Format(format!(
                "expected {expected} parameters, found {}",
                file.params.len()
            )));
        }
        if file.params.iter().any(|p| !p.is_finite()) {
            return Err(PreferenceError::Format("non-finite parameter".into()));
        }
        Ok(Self {
            vocab,
            pairs,
            index,
            params: file.params,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Rows {
    prev: usize,
    prev2: usize,
    pair: Option<usize>,
}

impl LanguageModel for ToyPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let n = prefix.len();
        let p1 = if n >= 1 { prefix[n - 1] } else { BOS };
        let p2 = if n >= 2 { prefix[n - 2] } else { BOS };
        self.log_softmax_rows(self.rows((p2, p1)))
    }
}

/// `log pi(completion | prompt)` for string tokens.
pub fn sequence_log_prob<S: AsRef<str>>(
    policy: &ToyPolicy,
    prompt: &[S],
    completion: &[S],
) -> Result<f64, PreferenceError> {
    let p = policy.vocab.encode(prompt)?;
    let c = policy.vocab.encode(completion).map_err(|e| match e {
        LmError::OutOfVocabulary { token, position } => LmError::OutOfVocabulary {
            token,
            position: position + prompt.len(),
        },
        other => other,
    })?;
    Ok(continuation_log_prob(policy, &p, &c))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(x)` without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Pairwise preference loss of one pair. Chosen and rejected texts are
/// scored as whole sentences; the pair's instruction prompt is metadata.
pub fn dpo_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, PreferenceError> {
    let score = |p: &ToyPolicy, text: &str| -> Result<f64, PreferenceError> {
        Ok(continuation_log_prob(p, &[], &p.encode_text(text)?))
    };
    let pol = score(policy, &pair.chosen)? - score(policy, &pair.rejected)?;
    let rf = score(reference, &pair.chosen)? - score(reference, &pair.rejected)?;
    Ok(softplus_neg(beta * (pol - rf)))
}

/// Training sequences grouped by shared contexts, so a gradient pass costs
/// one softmax per distinct context.
struct Compiled {
    rows: Vec<Rows>,
    /// Per sequence: (distinct-context id, next token) at each position.
    seqs: Vec<Vec<(usize, TokenId)>>,
}

impl Compiled {
    fn new(policy: &ToyPolicy, seqs: &[Vec<TokenId>]) -> Self {
        let mut ids: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        let mut rows = Vec::new();
        let seqs = seqs
            .iter()
            .map(|s| {
                contexts_of(s)
                    .zip(s)
                    .map(|(c, &t)| {
                        let id = *ids.entry(c).or_insert_with(|| {
                            rows.push(policy.rows(c));
                            rows.len() - 1
                        });
                        (id, t)
                    })
                    .collect()
            })
            .collect();
        Self { rows, seqs }
    }

    /// Per parameter row: `units` divided by the number of training
    /// positions that read the row. Scaling each row's step by this keeps
    /// rare contexts from training orders of magnitude slower than common
    /// ones while leaving the curvature along every row bounded.
    fn row_scale(&self, policy: &ToyPolicy, units: f64) -> Vec<f64> {
        let n_rows = policy.params.len() / policy.vocab.len();
        let mut uses = vec![0usize; n_rows];
        for seq in &self.seqs {
            for &(c, _) in seq {
                let r = self.rows[c];
                uses[r.prev] += 1;
                uses[r.prev2] += 1;
                if let Some(t) = r.pair {
                    uses[t] += 1;
                }
            }
        }
        uses.iter()
            .map(|&u| if u == 0 { 0.0 } else { units / u as f64 })
            .collect()
    }

    fn log_probs(&self, policy: &ToyPolicy) -> Vec<Vec<f64>> {
        self.rows.iter().map(|&r| policy.log_softmax_rows(r)).collect()
    }

    fn seq_log_prob(&self, lp: &[Vec<f64>], i: usize) -> f64 {
        self.seqs[i].iter().map(|&(c, t)| lp[c][t as usize]).sum()
    }

    /// Gradient of `sum_i w_i log pi(seq_i)` with respect to the parameters.
    fn weighted_grad(&self, policy: &ToyPolicy, lp: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
        let v = policy.vocab.len();
        // Per context: target weight per token and total weight.
        let mut target = vec![vec![0.0; v]; self.rows.len()];
        let mut total = vec![0.0; self.rows.len()];
        for (seq, &w) in self.seqs.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for &(c, t) in seq {
                target[c][t as usize] += w;
                total[c] += w;
            }
        }
        let mut grad = vec![0.0; policy.params.len()];
        for (c, r) in self.rows.iter().enumerate() {
            for k in 0..v {
                let g = target[c][k] - total[c] * lp[c][k].exp();
                grad[r.prev * v + k] += g;
                grad[r.prev2 * v + k] += g;
                if let Some(t) = r.pair {
                    grad[t * v + k] += g;
                }
            }
        }
        grad
    }
}

fn encode_all<'a, I: IntoIterator<Item = &'a str>>(
    policy: &ToyPolicy,
    texts: I,
) -> Result<Vec<Vec<TokenId>>, PreferenceError> {
    texts
        .into_iter()
        .map(|t| policy.encode_text(t).map_err(PreferenceError::from))
        .collect()
}

/// Mean negative log-likelihood of `seqs` and its gradient.
pub fn sft_loss_and_grad(policy: &ToyPolicy, seqs: &[Vec<TokenId>]) -> (f64, Vec<f64>) {
    let c = Compiled::new(policy, seqs);
    sft_step(&c, policy)
}

fn sft_step(c: &Compiled, policy: &ToyPolicy) -> (f64, Vec<f64>) {
    let n = c.seqs.len() as f64;
    let lp = c.log_probs(policy);
    let loss = -(0..c.seqs.len()).map(|i| c.seq_log_prob(&lp, i)).sum::<f64>() / n;
    let mut grad = c.weighted_grad(policy, &lp, &vec![1.0; c.seqs.len()]);
    for g in &mut grad {
        *g = -*g / n;
    }
    (loss, grad)
}

/// Pairs encoded for repeated loss evaluation against a fixed reference.
pub struct DpoProblem {
    compiled: Compiled,
    ref_margins: Vec<f64>,
    beta: f64,
}

impl DpoProblem {
    /// `pairs[i] = (chosen, rejected)` token sequences.
    pub fn new(
        policy: &ToyPolicy,
        reference: &ToyPolicy,
        pairs: &[(Vec<TokenId>, Vec<TokenId>)],
        beta: f64,
    ) -> Self {
        let seqs: Vec<Vec<TokenId>> = pairs
            .iter()
            .flat_map(|(c, r)| [c.clone(), r.clone()])
            .collect();
        let compiled = Compiled::new(policy, &seqs);
        let ref_margins = pairs
            .iter()
            .map(|(c, r)| continuation_log_prob(reference, &[], c) - continuation_log_prob(reference, &[], r))
            .collect();
        Self {
            compiled,
            ref_margins,
            beta,
        }
    }

    /// Policy margins `log pi(chosen) - log pi(rejected)` per pair.
    pub fn margins(&self, policy: &ToyPolicy) -> Vec<f64> {
        let lp = self.compiled.log_probs(policy);
        self.margins_from(&lp)
    }

    pub fn reference_margins(&self) -> &[f64] {
        &self.ref_margins
    }

    fn margins_from(&self, lp: &[Vec<f64>]) -> Vec<f64> {
        (0..self.ref_margins.len())
            .map(|i| self.compiled.seq_log_prob(lp, 2 * i) - self.compiled.seq_log_prob(lp, 2 * i + 1))
            .collect()
    }

    /// Mean loss and its gradient.
    pub fn loss_and_grad(&self, policy: &ToyPolicy) -> (f64, Vec<f64>) {
        let lp = self.compiled.log_probs(policy);
        let margins = self.margins_from(&lp);
        let n = margins.len() as f64;
        let mut loss = 0.0;
        let mut weights = Vec::with_capacity(2 * margins.len());
        for (m, r) in margins.iter().zip(&self.ref_margins) {
            let z = self.beta * (m - r);
            loss += softplus_neg(z);
            // d loss / d margin = -beta * sigmoid(-z).
            let w = self.beta * sigmoid(-z) / n;
            weights.push(w);
            weights.push(-w);
        }
        let mut grad = self.compiled.weighted_grad(policy, &lp, &weights);
        for g in &mut grad {
            *g = -*g;
        }
        (loss / n, grad)
    }
}

/// Mean pairwise loss over `pairs` and its gradient with respect to the
/// policy parameters.
pub fn dpo_loss_and_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<f64>), PreferenceError> {
    let enc = encode_pairs(policy, pairs)?;
    Ok(DpoProblem::new(policy, reference, &enc, beta).loss_and_grad(policy))
}

fn encode_pairs(
    policy: &ToyPolicy,
    pairs: &[PreferencePair],
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>, PreferenceError> {
    pairs
        .iter()
        .map(|p| Ok((policy.encode_text(&p.chosen)?, policy.encode_text(&p.rejected)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Recorded with the run; full-batch descent draws no randomness.
    pub rng_seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_SFT_LR,
            epochs: DEFAULT_EPOCHS,
            rng_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub rng_seed: u64,
}

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_SFT_LR: f64 = 1.5;
/// A quarter of the supervised rate, the same ratio as the reference setup.
pub const DEFAULT_DPO_LR: f64 = DEFAULT_SFT_LR / 4.0;
pub const DEFAULT_EPOCHS: usize = 3000;

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            learning_rate: DEFAULT_DPO_LR,
            epochs: DEFAULT_EPOCHS,
            rng_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Dpo,
}

/// A finished training run. `loss_history[e]` is the mean loss before the
/// update of epoch `e`; `final_loss` is measured after the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub method: Method,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta: Option<f64>,
    pub rng_seed: u64,
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
    pub final_policy: ToyPolicy,
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    version: u32,
    method: Method,
    learning_rate: f64,
    epochs: usize,
    beta: Option<f64>,
    rng_seed: u64,
    loss_history: Vec<f64>,
    final_loss: f64,
    final_policy: serde_json::Value,
}

impl TrainingRun {
    pub fn to_json(&self) -> String {
        let file = RunFile {
            version: FORMAT_VERSION,
            method: self.method,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            beta: self.beta,
            rng_seed: self.rng_seed,
            loss_history: self.loss_history.clone(),
            final_loss: self.final_loss,
            final_policy: serde_json::from_str(&self.final_policy.to_json()).expect("valid json"),
        };
        serde_json::to_string(&file).expect("run serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PreferenceError> {
        let file: RunFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(PreferenceError::UnsupportedVersion(file.version));
        }
        if file.loss_history.len() != file.epochs {
            return Err(PreferenceError::Format("loss history length differs from epochs".into()));
        }
        Ok(Self {
            method: file.method,
            learning_rate: file.learning_rate,
            epochs: file.epochs,
            beta: file.beta,
            rng_seed: file.rng_seed,
            loss_history: file.loss_history,
            final_loss: file.final_loss,
            final_policy: ToyPolicy::from_json(&file.final_policy.to_string())?,
        })
    }
}

fn check_rate(lr: f64) -> Result<(), PreferenceError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(PreferenceError::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

fn descend(policy: &mut ToyPolicy, grad: &[f64], lr: f64, row_scale: &[f64]) {
    let v = policy.vocab.len();
    for (i, (p, g)) in policy.params.iter_mut().zip(grad).enumerate() {
        *p -= lr * row_scale[i / v] * g;
    }
}

/// Maximum-likelihood training on token sequences.
pub fn fit_sequences(
    base: &ToyPolicy,
    seqs: &[Vec<TokenId>],
    config: &SftConfig,
) -> Result<TrainingRun, PreferenceError> {
    if seqs.is_empty() {
        return Err(PreferenceError::EmptyData);
    }
    check_rate(config.learning_rate)?;
    let mut policy = base.clone();
    let compiled = Compiled::new(&policy, seqs);
    let scale = compiled.row_scale(&policy, seqs.len() as f64);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (loss, grad) = sft_step(&compiled, &policy);
        loss_history.push(loss);
        descend(&mut policy, &grad, config.learning_rate, &scale);
    }
    let final_loss = sft_step(&compiled, &policy).0;
    Ok(TrainingRun {
        method: Method::Sft,
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        beta: None,
        rng_seed: config.rng_seed,
        loss_history,
        final_loss,
        final_policy: policy,
    })
}

/// Supervised training on the example texts.
pub fn train_sft(
    base: &ToyPolicy,
    data: &[TrainingExample],
    config: &SftConfig,
) -> Result<TrainingRun, PreferenceError> {
    let seqs = encode_all(base, data.iter().map(|e| e.text.as_str()))?;
    fit_sequences(base, &seqs, config)
}

/// Preference training against a frozen copy of `base`.
pub fn train_dpo(
    base: &ToyPolicy,
    pairs: &[PreferencePair],
    config: &DpoConfig,
) -> Result<TrainingRun, PreferenceError> {
    if pairs.is_empty() {
        return Err(PreferenceError::EmptyData);
    }
    if !(config.beta > 0.0 && config.beta.is_finite()) {
        return Err(PreferenceError::InvalidConfig(format!("beta must be positive, got {}", config.beta)));
    }
    check_rate(config.learning_rate)?;
    let reference = base.clone();
    let mut policy = base.clone();
    let problem = DpoProblem::new(&policy, &reference, &encode_pairs(base, pairs)?, config.beta);
    let scale = problem.compiled.row_scale(&policy, pairs.len() as f64);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (loss, grad) = problem.loss_and_grad(&policy);
        loss_history.push(loss);
        descend(&mut policy, &grad, config.learning_rate, &scale);
    }
    let final_loss = problem.loss_and_grad(&policy).0;
    Ok(TrainingRun {
        method: Method::Dpo,
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        beta: Some(config.beta),
        rng_seed: config.rng_seed,
        loss_history,
        final_loss,
        final_policy: policy,
    })
}

/// A sampled sentence for one occupation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub occupation: String,
    pub text: String,
}

/// `n` nucleus samples (top-p 0.95) per occupation, each continuing the
/// occupation's stem until the terminal or the token cap.
pub fn sample_policy<M: LanguageModel + ?Sized>(
    policy: &M,
    occupations: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<PolicySample>, PreferenceError> {
    let stop = policy
        .vocab()
        .id(".")
        .ok_or_else(|| LmError::OutOfVocabulary {
            token: ".".into(),
            position: 0,
        })?;
    let mut sampler = Sampler::new(SamplerConfig::with_seed(seed));
    let mut out = Vec::with_capacity(n * occupations.len());
    for occ in occupations {
        let prompt = prompt_tokens(policy, occ)?;
        for _ in 0..n {
            let toks = sampler.sample_completion(policy, &prompt, stop, MAX_SAMPLE_TOKENS);
            out.push(PolicySample {
                occupation: occ.clone(),
                text: render(policy, &prompt, &toks),
            });
        }
    }
    Ok(out)
}

/// Sample `n` completions per occupation and classify them.
pub fn evaluate_policy_compliance<M: LanguageModel + ?Sized>(
    policy: &M,
    occupations: &[String],
    lexicon: &Lexicon,
    n: usize,
    seed: u64,
) -> Result<ComplianceReport, PreferenceError> {
    if n == 0 {
        return Err(PreferenceError::InvalidConfig("need at least one sample per occupation".into()));
    }
    let samples = sample_policy(policy, occupations, n, seed)?;
    let r = TermRecognizer::new(lexicon);
    let labels: Vec<_> = samples.iter().map(|s| r.classify(&s.text)).collect();
    Ok(ComplianceReport::from_labels(&labels)?)
}

/// Sizes and schedules of the supervised-versus-preference benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Sentences in the base policy's pretraining corpus.
    pub base_corpus: usize,
    pub base_epochs: usize,
    pub base_learning_rate: f64,
    /// Examples and pairs per training occupation.
    pub per_occupation: usize,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            base_corpus: 1500,
            base_epochs: 200,
            base_learning_rate: 1.5,
            per_occupation: 50,
            sft: SftConfig::default(),
            dpo: DpoConfig::default(),
        }
    }
}

/// Base policy and the matched training sets for one seed.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub base: ToyPolicy,
    pub sft_data: Vec<TrainingExample>,
    pub pairs: Vec<PreferencePair>,
}

/// Build the base policy and datasets.
///
/// The base policy is pretrained on single-trait and trait-free sentences
/// about the training occupations, so it has seen no balanced sentence and
/// nothing about held-out occupations beyond their vocabulary entries. Both
/// fine-tuned policies start from the same parameters, whose pair rows
/// cover every context of the three text sets except those that contain
/// an occupation.
pub fn build_benchmark(
    lexicon: &Lexicon,
    occupations: &OccupationSet,
    templates: &[Template],
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<Benchmark, PreferenceError> {
    let all: Vec<String> = occupations.all().cloned().collect();
    let sft_data = generate_sft_dataset(occupations, lexicon, templates, config.per_occupation, seed)?;
    let pairs = generate_preference_pairs(occupations, lexicon, templates, config.per_occupation, seed)?;
    let mix = CorpusMix {
        balanced: 0.0,
        single_trait: 0.5,
        neutral: 0.5,
    };
    let corpus = build_corpus(lexicon, &occupations.train, templates, mix, config.base_corpus, seed);
    let vocab = Vocab::new(corpus_vocabulary(lexicon, &all, templates));
    let encode = |t: &str| vocab.encode(&tokenize(t));
    let corpus_seqs = corpus.iter().map(|t| encode(t)).collect::<Result<Vec<_>, _>>()?;
    let mut layout = corpus_seqs.clone();
    for t in sft_data
        .iter()
        .map(|e| e.text.as_str())
        .chain(pairs.iter().flat_map(|p| [p.chosen.as_str(), p.rejected.as_str()]))
    {
        layout.push(encode(t)?);
    }
    let mut shared = Vec::new();
    for o in &all {
        shared.extend(encode(o)?);
    }
    let zero = ToyPolicy::new(vocab, &layout, &shared);
    let base_cfg = SftConfig {
        learning_rate: config.base_learning_rate,
        epochs: config.base_epochs,
        rng_seed: seed,
    };
    let base = fit_sequences(&zero, &corpus_seqs, &base_cfg)?.final_policy;
    Ok(Benchmark {
        base,
        sft_data,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab(ts: &[&str]) -> Vocab {
        Vocab::new(ts.iter().map(|s| s.to_string()).collect())
    }

    fn small_policy(seed: u64) -> ToyPolicy {
        let v = vocab(&["a", "b", "c", "."]);
        let seqs = vec![vec![0, 1, 2, 3], vec![0, 2, 1, 3], vec![1, 1, 3]];
        // Token "c" is shared: contexts containing it get no pair row.
        let mut p = ToyPolicy::new(v, &seqs, &[2]);
        assert_eq!(p.n_pair_rows(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.params_mut() {
            *x = rng.random_range(-1.5..1.5);
        }
        p
    }

    fn pair(c: &str, r: &str) -> PreferencePair {
        PreferencePair {
            prompt: String::new(),
            chosen: c.into(),
            rejected: r.into(),
        }
    }

    #[test]
    fn distributions_normalize() {
        let p = small_policy(1);
        for prefix in [vec![], vec![0], vec![0, 1], vec![3, 3, 2], vec![2, 0]] {
            let s: f64 = p.next_log_probs(&prefix).iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_sequence_log_prob() {
        let p = ToyPolicy::uniform(vocab(&["a", "b", "c", "."]));
        let lp = sequence_log_prob(&p, &["a"], &["b", "c", "."]).unwrap();
        assert!((lp + 3.0 * 4f64.ln()).abs() < 1e-12);
        let err = sequence_log_prob(&p, &["a"], &["b", "zz"]).unwrap_err();
        assert!(matches!(
            err,
            PreferenceError::Lm(LmError::OutOfVocabulary { position: 2, .. })
        ));
    }

    #[test]
    fn hand_built_chain_rule() {
        // Two tokens, bigram logits only: from BOS [ln 3, 0] gives (3/4, 1/4);
        // after "x" [0, ln 2] gives (1/3, 2/3).
        let mut p = ToyPolicy::uniform(vocab(&["x", "y"]));
        let v = 2;
        p.params_mut()[2 * v] = 3f64.ln();
        p.params_mut()[1] = 2f64.ln();
        let lp = sequence_log_prob(&p, &[] as &[&str], &["x", "y"]).unwrap();
        assert!((lp - (0.75f64 * 2.0 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_on_its_greedy_output() {
        let mut p = ToyPolicy::uniform(vocab(&["x", "y"]));
        // Always "x" after anything, effectively with probability one.
        for row in 0..3 {
            p.params_mut()[row * 2] = 800.0;
        }
        let lp = sequence_log_prob(&p, &["y"], &["x", "x"]).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn loss_at_reference_is_ln2() {
        let p = small_policy(2);
        let l = dpo_loss(&p, &p, &pair("a b c .", "a c b ."), 0.1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn loss_vanishes_with_large_margin() {
        let reference = ToyPolicy::uniform(vocab(&["a", "b", "."]));
        let mut p = reference.clone();
        // Make "b" after "a" far more likely than "a" after "a".
        p.params_mut()[1] = 300.0;
        let l = dpo_loss(&p, &reference, &pair("a b .", "a a ."), 0.1).unwrap();
        assert!(l < 1e-12, "{l}");
    }

    #[test]
    fn loss_shift_invariance() {
        let p = small_policy(3);
        let r = small_policy(4);
        let pr = pair("a b c .", "b b .");
        let base = dpo_loss(&p, &r, &pr, 0.3).unwrap();
        let mut shifted = p.clone();
        // Add a constant to one decision point's logits.
        let v = 4;
        for k in 0..v {
            shifted.params_mut()[v + k] += 7.25;
        }
        let l = dpo_loss(&shifted, &r, &pr, 0.3).unwrap();
        assert!((l - base).abs() < 1e-12);
    }

    fn max_rel_error<F: Fn(&ToyPolicy) -> f64>(p: &ToyPolicy, analytic: &[f64], f: F) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.n_params() {
            let mut plus = p.clone();
            plus.params_mut()[i] += h;
            let mut minus = p.clone();
            minus.params_mut()[i] -= h;
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let pairs = vec![pair("a b c .", "a c b ."), pair("b b .", "a b c ."), pair("a c b .", "b b .")];
        for seed in 0..20 {
            let p = small_policy(100 + seed);
            let r = small_policy(200 + seed);
            let (_, g) = dpo_loss_and_grad(&p, &r, &pairs, 0.7).unwrap();
            let err = max_rel_error(&p, &g, |q| dpo_loss_and_grad(q, &r, &pairs, 0.7).unwrap().0);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let seqs = vec![vec![0, 1, 2, 3], vec![1, 1, 3], vec![2, 2, 2, 0, 3]];
        for seed in 0..5 {
            let p = small_policy(300 + seed);
            let (_, g) = sft_loss_and_grad(&p, &seqs);
            let err = max_rel_error(&p, &g, |q| sft_loss_and_grad(q, &seqs).0);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sft_on_one_sentence_becomes_greedy() {
        let v = vocab(&["the", "cat", "sat", "dog", "ran", "."]);
        let target = vec![0, 1, 2, 5];
        let zero = ToyPolicy::new(v, &[target.clone(), vec![0, 3, 4, 5]], &[]);
        let cfg = SftConfig {
            learning_rate: 1.0,
            epochs: 50,
            rng_seed: 0,
        };
        let run = fit_sequences(&zero, &[target.clone()], &cfg).unwrap();
        assert_eq!(run.loss_history.len(), 50);
        assert!((run.loss_history[0] - 4.0 * 6f64.ln()).abs() < 1e-12);
        for w in run.loss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        let mut ctx = vec![];
        for &t in &target {
            let lp = run.final_policy.next_log_probs(&ctx);
            let best = (0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap();
            assert_eq!(best as TokenId, t);
            ctx.push(t);
        }
    }

    #[test]
    fn json_roundtrip() {
        let p = small_policy(9);
        let back = ToyPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let run = TrainingRun {
            method: Method::Dpo,
            learning_rate: 0.25,
            epochs: 2,
            beta: Some(0.1),
            rng_seed: 42,
            loss_history: vec![0.69, 0.6],
            final_loss: 0.5,
            final_policy: p,
        };
        assert_eq!(TrainingRun::from_json(&run.to_json()).unwrap(), run);
        let bad = run.to_json().replace("\"epochs\":2", "\"epochs\":3");
        assert!(TrainingRun::from_json(&bad).is_err());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let p = small_policy(1);
        assert!(matches!(
            train_dpo(&p, &[], &DpoConfig::default()),
            Err(PreferenceError::EmptyData)
        ));
        assert!(matches!(
            train_sft(&p, &[], &SftConfig::default()),
            Err(PreferenceError::EmptyData)
        ));
        let bad = DpoConfig {
            beta: 0.0,
            ..DpoConfig::default()
        };
        assert!(train_dpo(&p, &[pair("a .", "b .")], &bad).is_err());
    }
}
