use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use conjunct_core::constraint::{ComplianceLabel, TermRecognizer};
use conjunct_core::lexicon::Lexicon;
use conjunct_core::lm::{perplexity, LanguageModel};
use conjunct_core::metrics::{compare, diversity, mean, sample_sd, ComplianceReport, MetricsError, StatsResult};
use conjunct_core::text::tokenize;
use serde::Serialize;
use thiserror::Error;

use crate::records::{CompletionRecord, Strategy};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no completions to report on")]
    Empty,
}

/// One line of the CSV: a single (method, variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: Strategy,
    pub variant: String,
    pub seed: u64,
    pub n: usize,
    pub and_pct: f64,
    pub or_pct: f64,
    pub agentic_only_pct: f64,
    pub communal_only_pct: f64,
    pub neither_pct: f64,
    pub entropy_agentic: f64,
    pub entropy_communal: f64,
    pub entropy_combined: f64,
    pub unique_pairs: usize,
    /// Mean and median over the completions the reference model can score.
    pub perplexity_mean: Option<f64>,
    pub perplexity_median: Option<f64>,
    pub perplexity_scored: usize,
    pub out_of_range: usize,
}

/// Across-seed mean and sample SD (absent with a single seed).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sd: Option<f64>,
    pub values: Vec<f64>,
}

impl Aggregate {
    fn of(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: mean(&values),
            sd: (values.len() > 1).then(|| sample_sd(&values)),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplianceSummary {
    pub and_pct: Aggregate,
    pub or_pct: Aggregate,
    pub neither_pct: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversitySummary {
    pub entropy_agentic: Aggregate,
    pub entropy_communal: Aggregate,
    pub entropy_combined: Aggregate,
    pub unique_pairs: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluencySummary {
    pub perplexity_mean: Option<Aggregate>,
    pub perplexity_median: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub method: Strategy,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub completions: usize,
    pub out_of_range: usize,
    pub compliance: ComplianceSummary,
    pub diversity: DiversitySummary,
    pub fluency: FluencySummary,
}

/// AND-compliance of group `a` against group `b`, over per-completion
/// indicators (100 for a balanced sentence, 0 otherwise) pooled across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub stats: StatsResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
    pub comparisons: Vec<Comparison>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub bootstrap_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn group_label(method: Strategy, variant: &str) -> String {
    format!("{method}/{variant}")
}

fn row<M: LanguageModel + ?Sized>(
    key: &(Strategy, String, u64),
    recs: &[&CompletionRecord],
    labels: &[ComplianceLabel],
    lexicon: &Lexicon,
    reference: &M,
) -> Result<ReportRow, ReportError> {
    let texts: Vec<&str> = recs.iter().map(|r| r.text.as_str()).collect();
    let c = ComplianceReport::from_labels(labels)?;
    let d = diversity(&texts, lexicon);
    let mut ppl: Vec<f64> = texts
        .iter()
        .filter_map(|t| perplexity(reference, &tokenize(t)).ok())
        .filter(|p| p.is_finite())
        .collect();
    ppl.sort_by(f64::total_cmp);
    Ok(ReportRow {
        method: key.0,
        variant: key.1.clone(),
        seed: key.2,
        n: c.n,
        and_pct: c.and_pct,
        or_pct: c.or_pct,
        agentic_only_pct: c.agentic_only_pct,
        communal_only_pct: c.communal_only_pct,
        neither_pct: c.neither_pct,
        entropy_agentic: d.entropy_agentic,
        entropy_communal: d.entropy_communal,
        entropy_combined: d.entropy_combined,
        unique_pairs: d.unique_pairs,
        perplexity_mean: (!ppl.is_empty()).then(|| mean(&ppl)),
        perplexity_median: (!ppl.is_empty()).then(|| median(&ppl)),
        perplexity_scored: ppl.len(),
        out_of_range: recs.iter().filter(|r| r.out_of_range).count(),
    })
}

/// Scores records with the lexicon and the reference model and aggregates
/// them. The result depends only on the inputs: groups are sorted by
/// (method, variant, seed) whatever order the records arrive in.
pub fn build_summary<M: LanguageModel + ?Sized>(
    records: &[CompletionRecord],
    lexicon: &Lexicon,
    reference: &M,
    options: &ReportOptions,
) -> Result<Summary, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let recognizer = TermRecognizer::new(lexicon);
    let mut runs: BTreeMap<(Strategy, String, u64), Vec<&CompletionRecord>> = BTreeMap::new();
    for r in records {
        runs.entry((r.method, r.variant.clone(), r.seed)).or_default().push(r);
    }

    let mut rows = Vec::new();
    let mut indicators: BTreeMap<(Strategy, String), Vec<f64>> = BTreeMap::new();
    for (key, recs) in &runs {
        let labels: Vec<ComplianceLabel> = recs.iter().map(|r| recognizer.classify(&r.text)).collect();
        indicators
            .entry((key.0, key.1.clone()))
            .or_default()
            .extend(labels.iter().map(|&l| if l == ComplianceLabel::Both { 100.0 } else { 0.0 }));
        rows.push(row(key, recs, &labels, lexicon, reference)?);
    }

    let mut groups = Vec::new();
    for (method, variant) in indicators.keys() {
        let members: Vec<&ReportRow> =
            rows.iter().filter(|r| r.method == *method && &r.variant == variant).collect();
        let agg = |f: &dyn Fn(&ReportRow) -> f64| Aggregate::of(members.iter().map(|r| f(r)).collect()).expect("non-empty group");
        let opt = |f: &dyn Fn(&ReportRow) -> Option<f64>| Aggregate::of(members.iter().filter_map(|r| f(r)).collect());
        groups.push(GroupSummary {
            method: *method,
            variant: variant.clone(),
            seeds: members.iter().map(|r| r.seed).collect(),
            completions: members.iter().map(|r| r.n).sum(),
            out_of_range: members.iter().map(|r| r.out_of_range).sum(),
            compliance: ComplianceSummary {
                and_pct: agg(&|r| r.and_pct),
                or_pct: agg(&|r| r.or_pct),
                neither_pct: agg(&|r| r.neither_pct),
            },
            diversity: DiversitySummary {
                entropy_agentic: agg(&|r| r.entropy_agentic),
                entropy_communal: agg(&|r| r.entropy_communal),
                entropy_combined: agg(&|r| r.entropy_combined),
                unique_pairs: agg(&|r| r.unique_pairs as f64),
            },
            fluency: FluencySummary {
                perplexity_mean: opt(&|r| r.perplexity_mean),
                perplexity_median: opt(&|r| r.perplexity_median),
            },
        });
    }

    let keys: Vec<&(Strategy, String)> = indicators.keys().collect();
    let mut comparisons = Vec::new();
    for (i, ka) in keys.iter().enumerate() {
        for kb in &keys[i + 1..] {
            let stats = compare(
                &indicators[*ka],
                &indicators[*kb],
                options.bootstrap_resamples,
                options.level,
                options.seed,
            )?;
            comparisons.push(Comparison {
                a: group_label(ka.0, &ka.1),
                b: group_label(kb.0, &kb.1),
                stats,
            });
        }
    }

    Ok(Summary {
        groups,
        comparisons,
        rows,
    })
}

pub fn rows_csv(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, summary: &Summary) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), rows_csv(&summary.rows)?)?;
    fs::write(dir.join("summary.json"), summary_json(summary))?;
    Ok(())
}
