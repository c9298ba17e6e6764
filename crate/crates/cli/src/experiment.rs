use conjunct_core::constraint::{ConstraintAutomaton, ConstraintError, ConstraintMode, TermRecognizer};
use conjunct_core::decoder::{decode_samples, prompt_tokens, render, DecodeConfig, DecodeError};
use conjunct_core::inlp::{run_inlp, InlpError, LowRankHead};
use conjunct_core::lexicon::{default_templates, Lexicon, Template};
use conjunct_core::lm::{continuation_log_prob, train_bundled, LanguageModel, LmError, Sampler, SamplerConfig};
use conjunct_core::preference::{build_benchmark, train_dpo, train_sft, DpoConfig, PreferenceError, SftConfig};
use conjunct_core::text::count_words;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Method};
use crate::records::CompletionRecord;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{method} with seed {seed}: {source}")]
    Job {
        method: Method,
        seed: u64,
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Inlp(#[from] InlpError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a single (method, seed) job reads.
pub struct Setup {
    pub config: ExperimentConfig,
    pub lexicon: Lexicon,
    pub templates: Vec<Template>,
    pub eval_occupations: Vec<String>,
    pub all_occupations: Vec<String>,
}

impl Setup {
    pub fn new(config: ExperimentConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let lexicon = config.load_lexicon()?;
        Ok(Self {
            eval_occupations: config.eval_occupations(),
            all_occupations: config.occupations.all().cloned().collect(),
            templates: default_templates(),
            lexicon,
            config,
        })
    }

    fn sampler(&self, seed: u64) -> Sampler {
        Sampler::new(SamplerConfig {
            temperature: self.config.samples.temperature,
            top_p: self.config.samples.top_p,
            rng_seed: seed,
        })
    }

    fn in_window(&self, text: &str) -> bool {
        let w = count_words(text);
        let len = &self.config.length;
        text.ends_with(len.terminal.as_str()) && (len.min_words..=len.max_words).contains(&w)
    }

    fn record(&self, method: Method, seed: u64, occupation: &str, text: String, log_prob: f64) -> CompletionRecord {
        CompletionRecord {
            method: method.strategy(),
            variant: method.variant().to_string(),
            occupation: occupation.to_string(),
            seed,
            out_of_range: !self.in_window(&text),
            text,
            log_prob: Some(log_prob),
        }
    }

    /// `per_occupation` samples for every evaluation occupation, each drawn
    /// up to `length_attempts` times until it fits the word window. The last
    /// draw is kept (and flagged) when none fits.
    fn sample_with_retries<M: LanguageModel + ?Sized>(
        &self,
        model: &M,
        method: Method,
        seed: u64,
    ) -> Result<Vec<CompletionRecord>, ExperimentError> {
        let s = &self.config.samples;
        let stop = terminal_id(model, &self.config.length.terminal)?;
        let mut sampler = self.sampler(seed);
        let mut out = Vec::with_capacity(s.per_occupation * self.eval_occupations.len());
        for occ in &self.eval_occupations {
            let prompt = prompt_tokens(model, occ)?;
            for _ in 0..s.per_occupation {
                let mut drawn = None;
                for _ in 0..s.length_attempts {
                    let toks = sampler.sample_completion(model, &prompt, stop, s.max_tokens);
                    let text = render(model, &prompt, &toks);
                    let ok = self.in_window(&text);
                    drawn = Some((text, continuation_log_prob(model, &prompt, &toks)));
                    if ok {
                        break;
                    }
                }
                let (text, lp) = drawn.expect("at least one attempt");
                out.push(self.record(method, seed, occ, text, lp));
            }
        }
        Ok(out)
    }

    /// Draws `filter_raw_per_occupation` samples per occupation and keeps the
    /// first `per_occupation` that name at least one trait term.
    fn filter<M: LanguageModel + ?Sized>(&self, model: &M, seed: u64) -> Result<Vec<CompletionRecord>, ExperimentError> {
        let s = &self.config.samples;
        let stop = terminal_id(model, &self.config.length.terminal)?;
        let recognizer = TermRecognizer::new(&self.lexicon);
        let mut sampler = self.sampler(seed);
        let mut out = Vec::new();
        for occ in &self.eval_occupations {
            let prompt = prompt_tokens(model, occ)?;
            let mut kept = 0;
            for _ in 0..s.filter_raw_per_occupation {
                let toks = sampler.sample_completion(model, &prompt, stop, s.max_tokens);
                let text = render(model, &prompt, &toks);
                if kept < s.per_occupation && recognizer.classify(&text).is_or_compliant() {
                    let lp = continuation_log_prob(model, &prompt, &toks);
                    out.push(self.record(Method::Filter, seed, occ, text, lp));
                    kept += 1;
                }
            }
        }
        Ok(out)
    }

    fn ctrlg<M: LanguageModel + ?Sized>(
        &self,
        model: &M,
        method: Method,
        mode: ConstraintMode,
        seed: u64,
    ) -> Result<Vec<CompletionRecord>, ExperimentError> {
        let automaton = ConstraintAutomaton::compile(&self.config.constraint(mode), &self.lexicon)?;
        let decode = DecodeConfig {
            samples_per_prompt: self.config.samples.per_occupation,
            ..self.config.decode.clone()
        };
        let mut out = Vec::new();
        for occ in &self.eval_occupations {
            let prompt = prompt_tokens(model, occ)?;
            let outcome = decode_samples(model, &automaton, &self.lexicon, &prompt, &decode)?;
            for h in outcome.hypotheses {
                let text = render(model, &prompt, &h.tokens);
                out.push(self.record(method, seed, occ, text, h.log_prob));
            }
        }
        Ok(out)
    }

    fn run_job(&self, method: Method, seed: u64) -> Result<Vec<CompletionRecord>, ExperimentError> {
        let c = &self.config;
        let bundled = || train_bundled(&self.lexicon, &self.all_occupations, &self.templates, &c.lm, seed);
        match method {
            Method::PromptOnly => self.sample_with_retries(&bundled()?, method, seed),
            Method::Filter => self.filter(&bundled()?, seed),
            Method::CtrlgOr => self.ctrlg(&bundled()?, method, ConstraintMode::Or, seed),
            Method::CtrlgAnd => self.ctrlg(&bundled()?, method, ConstraintMode::And, seed),
            Method::Sft | Method::Dpo => {
                let bench = build_benchmark(&self.lexicon, &c.occupations, &self.templates, &c.preference, seed)?;
                let run = if method == Method::Sft {
                    let cfg = SftConfig {
                        rng_seed: seed,
                        ..c.preference.sft
                    };
                    train_sft(&bench.base, &bench.sft_data, &cfg)?
                } else {
                    let cfg = DpoConfig {
                        rng_seed: seed,
                        ..c.preference.dpo
                    };
                    train_dpo(&bench.base, &bench.pairs, &cfg)?
                };
                self.sample_with_retries(&run.final_policy, method, seed)
            }
            Method::Inlp => {
                let head = LowRankHead::fit(&bundled()?, Some(c.inlp.rank));
                let state = run_inlp(&head.term_embeddings(&self.lexicon), c.inlp.l2_c, c.inlp.max_iters)?;
                self.sample_with_retries(&head.with_projection(&state)?, method, seed)
            }
        }
    }
}

fn terminal_id<M: LanguageModel + ?Sized>(model: &M, terminal: &str) -> Result<u32, LmError> {
    model.vocab().id(terminal).ok_or_else(|| LmError::OutOfVocabulary {
        token: terminal.to_string(),
        position: 0,
    })
}

/// Generates completions for every configured (method, seed) pair.
///
/// Jobs run in parallel; the output is ordered by method, then seed, then
/// occupation, exactly as listed in the config.
pub fn run_experiment(setup: &Setup) -> Result<Vec<CompletionRecord>, ExperimentError> {
    let c = &setup.config;
    let jobs: Vec<(Method, u64)> = c
        .methods
        .iter()
        .flat_map(|&m| c.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let batches = jobs
        .par_iter()
        .map(|&(method, seed)| {
            setup.run_job(method, seed).map_err(|e| ExperimentError::Job {
                method,
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(batches.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use conjunct_core::constraint::{classify, ComplianceLabel};

    fn small(methods: Vec<Method>) -> Setup {
        let mut config = ExperimentConfig {
            methods,
            seeds: vec![42],
            ..ExperimentConfig::default()
        };
        config.samples.per_occupation = 4;
        config.samples.filter_raw_per_occupation = 40;
        config.occupations.heldout.truncate(2);
        Setup::new(config).unwrap()
    }

    #[test]
    fn ctrlg_and_records_are_balanced() {
        let setup = small(vec![Method::CtrlgAnd]);
        let recs = run_experiment(&setup).unwrap();
        assert_eq!(recs.len(), 8);
        for r in &recs {
            assert_eq!(classify(&r.text, &setup.lexicon), ComplianceLabel::Both, "{}", r.text);
            assert!(!r.out_of_range);
            assert_eq!(r.variant, "and");
        }
    }

    #[test]
    fn prompt_only_keeps_sample_count() {
        let setup = small(vec![Method::PromptOnly]);
        let recs = run_experiment(&setup).unwrap();
        assert_eq!(recs.len(), 8);
        assert!(recs.iter().all(|r| r.text.starts_with("The ")));
        for r in recs.iter().filter(|r| !r.out_of_range) {
            assert!(setup.in_window(&r.text));
        }
    }

    #[test]
    fn filter_keeps_only_trait_sentences() {
        let setup = small(vec![Method::Filter]);
        let recs = run_experiment(&setup).unwrap();
        assert!(!recs.is_empty() && recs.len() <= 8);
        assert!(recs.iter().all(|r| classify(&r.text, &setup.lexicon).is_or_compliant()));
    }

    #[test]
    fn ordered_by_method_then_seed() {
        let mut setup = small(vec![Method::CtrlgOr, Method::PromptOnly]);
        setup.config.seeds = vec![123, 42];
        let recs = run_experiment(&setup).unwrap();
        let keys: Vec<(String, u64)> = recs.iter().map(|r| (r.variant.clone(), r.seed)).collect();
        let mut dedup = keys.clone();
        dedup.dedup();
        assert_eq!(
            dedup,
            vec![("or".into(), 123), ("or".into(), 42), ("ngram".into(), 123), ("ngram".into(), 42)]
        );
    }
}
