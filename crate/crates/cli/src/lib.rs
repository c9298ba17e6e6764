//! Experiment orchestration for the conjunct toolkit: configuration,
//! method runs, completion records and reports.

pub mod config;
pub mod experiment;
pub mod records;
pub mod report;

use std::fs;
use std::path::Path;

use conjunct_core::lm::{train_bundled, LmError, NGramModel};
use conjunct_core::metrics::DEFAULT_LEVEL;

pub use config::{ConfigError, ExperimentConfig, Method};
pub use experiment::{run_experiment, ExperimentError, Setup};
pub use records::{ingest_external, CompletionRecord, Ingested, RecordError, Strategy};
pub use report::{build_summary, write_report, ReportError, ReportOptions, Summary};

/// The fixed model every completion's perplexity is measured under.
pub fn reference_model(setup: &Setup) -> Result<NGramModel, LmError> {
    let r = &setup.config.reference_lm;
    train_bundled(&setup.lexicon, &setup.all_occupations, &setup.templates, &r.model, r.seed)
}

pub fn report_options(config: &ExperimentConfig) -> ReportOptions {
    ReportOptions {
        bootstrap_resamples: config.bootstrap_resamples,
        level: DEFAULT_LEVEL,
        seed: config.seeds[0],
    }
}

/// Summarizes `records` under the setup's lexicon and reference model.
pub fn summarize(setup: &Setup, records: &[CompletionRecord]) -> Result<Summary, ExperimentError> {
    let reference = reference_model(setup)?;
    Ok(build_summary(records, &setup.lexicon, &reference, &report_options(&setup.config))?)
}

/// Runs every method, then writes `completions.jsonl`, `report.csv` and
/// `summary.json` into `out`.
pub fn run_to_dir(setup: &Setup, out: &Path) -> Result<Summary, ExperimentError> {
    let records = run_experiment(setup)?;
    let summary = summarize(setup, &records)?;
    fs::create_dir_all(out)?;
    records::write_records(&out.join("completions.jsonl"), &records)?;
    write_report(out, &summary)?;
    Ok(summary)
}
