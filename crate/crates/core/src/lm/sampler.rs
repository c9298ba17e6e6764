use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LanguageModel, TokenId};

fn default_temperature() -> f64 {
    1.0
}
fn default_top_p() -> f64 {
    0.95
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SamplerConfig {
    pub fn with_seed(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..Self::default()
        }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            top_p: default_top_p(),
            rng_seed: 0,
        }
    }
}

/// The renormalized nucleus of a next-token distribution, most likely first.
///
/// Log-probabilities are divided by `temperature` and renormalized; the
/// smallest prefix of the sorted tokens whose mass reaches `top_p` is kept
/// and renormalized again. Ties sort by token id.
pub fn nucleus_distribution(log_probs: &[f64], temperature: f64, top_p: f64) -> Vec<(TokenId, f64)> {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    let scaled: Vec<f64> = log_probs.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut ranked: Vec<(TokenId, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i as TokenId, w / total))
        .filter(|&(_, p)| p > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = ranked.len();
    for (i, &(_, p)) in ranked.iter().enumerate() {
        mass += p;
        // Tolerate rounding in the running sum.
        if mass >= top_p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    ranked.truncate(keep);
    let kept: f64 = ranked.iter().map(|&(_, p)| p).sum();
    for entry in &mut ranked {
        entry.1 /= kept;
    }
    ranked
}

/// Seeded nucleus sampler. One instance yields a reproducible stream of
/// completions.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn sample_token(&mut self, log_probs: &[f64]) -> TokenId {
        let dist = nucleus_distribution(log_probs, self.config.temperature, self.config.top_p);
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for &(t, p) in &dist {
            acc += p;
            if u < acc {
                return t;
            }
        }
        dist.last().expect("non-empty nucleus").0
    }

    /// Continue `prompt` until `stop` is emitted or `max_tokens` are drawn.
    /// The returned tokens exclude the prompt and include `stop` if reached.
    pub fn sample_completion<M: LanguageModel + ?Sized>(
        &mut self,
        model: &M,
        prompt: &[TokenId],
        stop: TokenId,
        max_tokens: usize,
    ) -> Vec<TokenId> {
        let mut ctx = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let t = self.sample_token(&model.next_log_probs(&ctx));
            ctx.push(t);
            out.push(t);
            if t == stop {
                break;
            }
        }
        out
    }
}

pub fn sample_completion<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &SamplerConfig,
    stop: TokenId,
    max_tokens: usize,
) -> Vec<TokenId> {
    Sampler::new(*config).sample_completion(model, prompt, stop, max_tokens)
}
