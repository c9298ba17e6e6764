use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use conjunct_cli::records::{write_records, write_records_to};
use conjunct_cli::{
    ingest_external, reference_model, report_options, run_to_dir, CompletionRecord, ConfigError,
    ExperimentConfig, Method, Setup, Strategy,
};
use conjunct_core::constraint::{ConstraintAutomaton, ConstraintMode};
use conjunct_core::decoder::{decode_samples, prompt_tokens, render, sample_raw, DecodeConfig};
use conjunct_core::inlp::{read_embeddings, run_inlp, LowRankHead};
use conjunct_core::lexicon::{
    generate_preference_pairs, generate_sft_dataset, read_jsonl, write_jsonl, PreferencePair, TrainingExample,
};
use conjunct_core::lm::{build_corpus, train_bundled, SamplerConfig};
use conjunct_core::metrics::{compliance, diversity};
use conjunct_core::preference::{build_benchmark, train_dpo, train_sft, DpoConfig, SftConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "conjunct", version, about = "Compositional trait constraints: data, decoding, training and reports")]
struct Cli {
    /// JSON experiment config. Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    And,
    Or,
}

impl From<Mode> for ConstraintMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::And => ConstraintMode::And,
            Mode::Or => ConstraintMode::Or,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Sft,
    Dpo,
}

#[derive(Subcommand)]
enum Command {
    /// Write the SFT examples and preference pairs for the training occupations.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        per_occupation: Option<usize>,
    },
    /// Write the synthetic corpus and the n-gram model trained on it.
    BuildCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Constrained beam decoding with the bundled model.
    Decode {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        beam: Option<usize>,
        /// Outputs per occupation.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Repeatable; defaults to the evaluation occupations.
        #[arg(long = "occupation")]
        occupations: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample from the bundled model and keep sentences with a trait term.
    Filter {
        /// Raw samples per occupation.
        #[arg(long)]
        raw: Option<usize>,
        /// Maximum kept per occupation.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "occupation")]
        occupations: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Iterative nullspace projection on embeddings.
    Inlp {
        /// `{"vector": [...], "label": 0|1}` lines. Without it, the term
        /// embeddings of the bundled model's low-rank head are used.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the toy policy and write the training run.
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// SFT examples or preference pairs (JSONL); generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compliance and diversity of a completions file.
    Eval {
        #[arg(long)]
        input: PathBuf,
    },
    /// Validate external completions and write them in normalized form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// CSV and JSON reports over one or more completions files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every configured method and seed, then the reports.
    Run {
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Graphviz rendering of the constraint automaton.
    AutomatonDot {
        #[arg(long, value_enum)]
        mode: Mode,
    },
}

fn load_setup(path: Option<&Path>) -> Result<Setup, ConfigError> {
    let config = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    Setup::new(config)
}

fn emit(out: Option<&Path>, records: &[CompletionRecord]) -> Result<()> {
    match out {
        Some(p) => write_records(p, records).with_context(|| format!("writing {}", p.display())),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_records_to(&mut lock, records)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn occupations_or_default(setup: &Setup, given: Vec<String>) -> Vec<String> {
    if given.is_empty() {
        setup.eval_occupations.clone()
    } else {
        given
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli, setup: Setup) -> Result<()> {
    let c = &setup.config;
    let lex = &setup.lexicon;
    match cli.command {
        Command::GenData {
            out,
            seed,
            per_occupation,
        } => {
            let per = per_occupation.unwrap_or(c.preference.per_occupation);
            let sft = generate_sft_dataset(&c.occupations, lex, &setup.templates, per, seed)?;
            let pairs = generate_preference_pairs(&c.occupations, lex, &setup.templates, per, seed)?;
            fs::create_dir_all(&out)?;
            write_jsonl(&out.join("sft.jsonl"), &sft)?;
            write_jsonl(&out.join("pairs.jsonl"), &pairs)?;
            print_json(&json!({"sft_examples": sft.len(), "preference_pairs": pairs.len()}))
        }
        Command::BuildCorpus { out, seed } => {
            let corpus = build_corpus(lex, &setup.all_occupations, &setup.templates, c.lm.mix, c.lm.corpus_size, seed);
            let model = train_bundled(lex, &setup.all_occupations, &setup.templates, &c.lm, seed)?;
            fs::create_dir_all(&out)?;
            let mut text = corpus.join("\n");
            text.push('\n');
            fs::write(out.join("corpus.txt"), text)?;
            fs::write(out.join("model.json"), model.to_json())?;
            print_json(&json!({"sentences": corpus.len(), "order": model.order()}))
        }
        Command::Decode {
            mode,
            beam,
            samples,
            seed,
            occupations,
            out,
        } => {
            let mode: ConstraintMode = mode.into();
            let model = train_bundled(lex, &setup.all_occupations, &setup.templates, &c.lm, seed)?;
            let automaton = ConstraintAutomaton::compile(&c.constraint(mode), lex)?;
            let decode = DecodeConfig {
                beam_width: beam.unwrap_or(c.decode.beam_width),
                samples_per_prompt: samples.unwrap_or(c.samples.per_occupation),
                ..c.decode.clone()
            };
            let method = if mode == ConstraintMode::And { Method::CtrlgAnd } else { Method::CtrlgOr };
            let mut records = Vec::new();
            for occ in occupations_or_default(&setup, occupations) {
                let prompt = prompt_tokens(&model, &occ)?;
                let outcome = decode_samples(&model, &automaton, lex, &prompt, &decode)?;
                if let Some(d) = &outcome.diagnostic {
                    eprintln!("{occ}: {d}");
                }
                for h in outcome.hypotheses {
                    records.push(CompletionRecord {
                        method: Strategy::Ctrlg,
                        variant: method.variant().into(),
                        occupation: occ.clone(),
                        seed,
                        text: render(&model, &prompt, &h.tokens),
                        log_prob: Some(h.log_prob),
                        out_of_range: false,
                    });
                }
            }
            emit(out.as_deref(), &records)
        }
        Command::Filter {
            raw,
            cap,
            seed,
            occupations,
            out,
        } => {
            let model = train_bundled(lex, &setup.all_occupations, &setup.templates, &c.lm, seed)?;
            let raw = raw.unwrap_or(c.samples.filter_raw_per_occupation);
            let cap = cap.unwrap_or(c.samples.per_occupation);
            let sampler = SamplerConfig {
                temperature: c.samples.temperature,
                top_p: c.samples.top_p,
                rng_seed: seed,
            };
            let recognizer = conjunct_core::constraint::TermRecognizer::new(lex);
            let mut records = Vec::new();
            for occ in occupations_or_default(&setup, occupations) {
                let prompt = prompt_tokens(&model, &occ)?;
                let kept = sample_raw(&model, &prompt, raw, &sampler, c.samples.max_tokens)?
                    .into_iter()
                    .filter(|s| recognizer.classify(&s.text).is_or_compliant())
                    .take(cap);
                for s in kept {
                    records.push(CompletionRecord {
                        method: Strategy::Filter,
                        variant: Method::Filter.variant().into(),
                        occupation: occ.clone(),
                        seed,
                        text: s.text,
                        log_prob: Some(s.log_prob),
                        out_of_range: false,
                    });
                }
            }
            emit(out.as_deref(), &records)
        }
        Command::Inlp { embeddings, seed, out } => {
            let data = match embeddings {
                Some(p) => read_embeddings(&p)?,
                None => {
                    let model = train_bundled(lex, &setup.all_occupations, &setup.templates, &c.lm, seed)?;
                    LowRankHead::fit(&model, Some(c.inlp.rank)).term_embeddings(lex)
                }
            };
            let state = run_inlp(&data, c.inlp.l2_c, c.inlp.max_iters)?;
            eprintln!(
                "iterations: {}, accuracy: {:?}",
                state.iterations, state.accuracy_history
            );
            match out {
                Some(p) => fs::write(&p, state.to_json())?,
                None => println!("{}", state.to_json()),
            }
            Ok(())
        }
        Command::Train {
            method,
            seed,
            data,
            out,
        } => {
            let bench = build_benchmark(lex, &c.occupations, &setup.templates, &c.preference, seed)?;
            let run = match method {
                TrainMethod::Sft => {
                    let examples: Vec<TrainingExample> = match data {
                        Some(p) => read_jsonl(&p)?,
                        None => bench.sft_data,
                    };
                    let cfg = SftConfig {
                        rng_seed: seed,
                        ..c.preference.sft
                    };
                    train_sft(&bench.base, &examples, &cfg)?
                }
                TrainMethod::Dpo => {
                    let pairs: Vec<PreferencePair> = match data {
                        Some(p) => read_jsonl(&p)?,
                        None => bench.pairs,
                    };
                    let cfg = DpoConfig {
                        rng_seed: seed,
                        ..c.preference.dpo
                    };
                    train_dpo(&bench.base, &pairs, &cfg)?
                }
            };
            fs::write(&out, run.to_json())?;
            print_json(&json!({
                "epochs": run.epochs,
                "initial_loss": run.loss_history.first(),
                "final_loss": run.final_loss,
            }))
        }
        Command::Eval { input } => {
            let ingested = ingest_external(&input)?;
            if ingested.records.is_empty() {
                bail!("{} has no usable completions", input.display());
            }
            let texts: Vec<&str> = ingested.records.iter().map(|r| r.text.as_str()).collect();
            print_json(&json!({
                "compliance": compliance(&texts, lex)?,
                "diversity": diversity(&texts, lex),
                "skipped": ingested.skipped,
            }))
        }
        Command::Ingest { input, out } => {
            let ingested = ingest_external(&input)?;
            fs::create_dir_all(&out)?;
            write_records(&out.join("completions.jsonl"), &ingested.records)?;
            let skipped = serde_json::to_string_pretty(&ingested.skipped)? + "\n";
            fs::write(out.join("skipped.json"), skipped)?;
            print_json(&json!({"records": ingested.records.len(), "skipped": ingested.skipped.len()}))
        }
        Command::Report { input, out } => {
            let mut records = Vec::new();
            for p in &input {
                let ingested = ingest_external(p)?;
                for s in &ingested.skipped {
                    eprintln!("{}:{}: skipped ({})", p.display(), s.line, s.reason);
                }
                records.extend(ingested.records);
            }
            let reference = reference_model(&setup)?;
            let summary = conjunct_cli::build_summary(&records, lex, &reference, &report_options(c))?;
            conjunct_cli::write_report(&out, &summary)?;
            print_json(&json!({"rows": summary.rows.len(), "groups": summary.groups.len()}))
        }
        Command::Run { out } => {
            let out = out.unwrap_or_else(|| c.output_dir.clone());
            let summary = run_to_dir(&setup, &out)?;
            for g in &summary.groups {
                println!(
                    "{}/{}: AND {:.1}%  OR {:.1}%  n={}",
                    g.method, g.variant, g.compliance.and_pct.mean, g.compliance.or_pct.mean, g.completions
                );
            }
            Ok(())
        }
        Command::AutomatonDot { mode } => {
            let automaton = ConstraintAutomaton::compile(&c.constraint(mode.into()), lex)?;
            print!("{}", automaton.to_dot());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let setup = match load_setup(cli.config.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli, setup) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
