//! Compliance, lexical diversity and the statistics used to compare methods
//! across seeds.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{ComplianceLabel, TermRecognizer};
use crate::lexicon::{Lexicon, TraitClass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no completions to evaluate")]
    NoCompletions,
    #[error("empty sample")]
    EmptySample,
    #[error("all counts are zero")]
    ZeroCounts,
    #[error("need at least {needed} values per sample, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("pooled standard deviation is zero")]
    ZeroPooledSd,
    #[error("invalid bootstrap setting: {0}")]
    InvalidBootstrap(String),
}

/// Percentages of outputs by label. `and_pct` counts outputs with both
/// classes; `or_pct` counts outputs with at least one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub n: usize,
    pub and_pct: f64,
    pub or_pct: f64,
    pub agentic_only_pct: f64,
    pub communal_only_pct: f64,
    pub neither_pct: f64,
}

impl ComplianceReport {
    pub fn from_labels(labels: &[ComplianceLabel]) -> Result<Self, MetricsError> {
        if labels.is_empty() {
            return Err(MetricsError::NoCompletions);
        }
        let n = labels.len();
        let pct = |l: ComplianceLabel| {
            100.0 * labels.iter().filter(|&&x| x == l).count() as f64 / n as f64
        };
        let neither_pct = pct(ComplianceLabel::Neither);
        Ok(Self {
            n,
            and_pct: pct(ComplianceLabel::Both),
            or_pct: 100.0 * labels.iter().filter(|l| l.is_or_compliant()).count() as f64 / n as f64,
            agentic_only_pct: pct(ComplianceLabel::AgenticOnly),
            communal_only_pct: pct(ComplianceLabel::CommunalOnly),
            neither_pct,
        })
    }
}

pub fn compliance<S: AsRef<str>>(
    completions: &[S],
    lexicon: &Lexicon,
) -> Result<ComplianceReport, MetricsError> {
    let r = TermRecognizer::new(lexicon);
    let labels: Vec<ComplianceLabel> = completions.iter().map(|c| r.classify(c.as_ref())).collect();
    ComplianceReport::from_labels(&labels)
}

/// Entropy in bits of the empirical distribution given by `counts`.
pub fn shannon_entropy<I: IntoIterator<Item = usize>>(counts: I) -> Result<f64, MetricsError> {
    let counts: Vec<usize> = counts.into_iter().collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::ZeroCounts);
    }
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum::<f64>();
    // A single supported term gives -1 * log2(1) = -0.0.
    Ok(h.max(0.0))
}

/// Occurrences of every lexicon term across `completions`, per class.
/// Terms that never occur are listed with a zero count.
pub fn term_counts<S: AsRef<str>>(
    completions: &[S],
    lexicon: &Lexicon,
) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let r = TermRecognizer::new(lexicon);
    let mut agentic: BTreeMap<String, usize> = lexicon.agentic().iter().map(|t| (t.clone(), 0)).collect();
    let mut communal: BTreeMap<String, usize> =
        lexicon.communal().iter().map(|t| (t.clone(), 0)).collect();
    let n_agentic = lexicon.agentic().len();
    for c in completions {
        for m in r.find_terms(c.as_ref()) {
            match m.class {
                TraitClass::Agentic => *agentic.get_mut(&lexicon.agentic()[m.term]).unwrap() += 1,
                TraitClass::Communal => {
                    *communal.get_mut(&lexicon.communal()[m.term - n_agentic]).unwrap() += 1
                }
            }
        }
    }
    (agentic, communal)
}

/// Distinct (agentic, communal) term pairs realized within single outputs.
/// An output with several terms of a class contributes every cross pair.
pub fn path_diversity<S: AsRef<str>>(completions: &[S], lexicon: &Lexicon) -> usize {
    let r = TermRecognizer::new(lexicon);
    let mut pairs = BTreeSet::new();
    for c in completions {
        let found = r.find_terms(c.as_ref());
        for a in found.iter().filter(|m| m.class == TraitClass::Agentic) {
            for b in found.iter().filter(|m| m.class == TraitClass::Communal) {
                pairs.insert((a.term, b.term));
            }
        }
    }
    pairs.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub entropy_agentic: f64,
    pub entropy_communal: f64,
    /// Mean of the two class entropies.
    pub entropy_combined: f64,
    pub unique_pairs: usize,
}

/// Term-usage entropies and path diversity. A class with no occurrences
/// has entropy 0.
pub fn diversity<S: AsRef<str>>(completions: &[S], lexicon: &Lexicon) -> DiversityReport {
    let (ag, co) = term_counts(completions, lexicon);
    let h = |m: &BTreeMap<String, usize>| shannon_entropy(m.values().copied()).unwrap_or(0.0);
    let entropy_agentic = h(&ag);
    let entropy_communal = h(&co);
    DiversityReport {
        entropy_agentic,
        entropy_communal,
        entropy_combined: (entropy_agentic + entropy_communal) / 2.0,
        unique_pairs: path_diversity(completions, lexicon),
    }
}

/// Mean, computed around the first element so constant data is exact.
pub fn mean(data: &[f64]) -> f64 {
    let x0 = data[0];
    x0 + data.iter().map(|x| x - x0).sum::<f64>() / data.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_sd(data: &[f64]) -> f64 {
    if data.len() < 2 {
        return 0.0;
    }
    let m = mean(data);
    (data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (data.len() - 1) as f64).sqrt()
}

/// Mean and sample SD of per-seed values.
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    Ok((mean(values), sample_sd(values)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of the first sample: pairs (a, b) with a > b, ties counting half.
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Products `|a| * |b|` up to this size get the exact null distribution.
pub const EXACT_LIMIT: usize = 400;

/// Midranks of the pooled sample, doubled so they are integers.
fn doubled_midranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1; twice their mean is i+j+2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Rank-sum test with midranks for ties. The two-sided p-value is exact
/// (conditional on the observed ties) when `|a| * |b| <= 400`, otherwise
/// from the tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_midranks(&pooled);
    let r_a: u64 = ranks[..n1].iter().sum();
    let u_a = r_a as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;
    let u_b = (n1 * n2) as f64 - u_a;
    let n = n1 + n2;
    if n1 * n2 <= EXACT_LIMIT {
        let p_value = exact_p(&ranks, n1, r_a);
        return Ok(MannWhitney {
            u_a,
            u_b,
            p_value,
            exact: true,
        });
    }
    let mu = (n1 * n2) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)) as f64;
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1) as f64 - tie_term);
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - mu).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MannWhitney {
        u_a,
        u_b,
        p_value,
        exact: false,
    })
}

/// Share of the `C(N, n1)` label assignments whose doubled rank sum lies
/// at least as far from its mean as the observed one.
fn exact_p(ranks: &[u64], n1: usize, observed: u64) -> f64 {
    let n = ranks.len();
    let max_sum: u64 = {
        let mut r = ranks.to_vec();
        r.sort_unstable();
        r[n - n1..].iter().sum()
    };
    let width = max_sum as usize + 1;
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0f64; width]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in ranks {
        let r = r as usize;
        for k in (1..=n1).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    // Mean of the doubled rank sum is n1 * (N + 1).
    let center = (n1 * (n + 1)) as i64;
    let dist = (observed as i64 - center).abs();
    let total: f64 = ways[n1].iter().sum();
    let extreme: f64 = ways[n1]
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as i64 - center).abs() >= dist)
        .map(|(_, w)| w)
        .sum();
    (extreme / total).min(1.0)
}

/// `(mean(a) - mean(b)) / pooled SD`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::TooFewValues {
                needed: 2,
                got: s.len(),
            });
        }
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let pooled_var =
        ((n1 - 1.0) * sample_sd(a).powi(2) + (n2 - 1.0) * sample_sd(b).powi(2)) / (n1 + n2 - 2.0);
    if pooled_var <= 0.0 {
        return Err(MetricsError::ZeroPooledSd);
    }
    Ok((mean(a) - mean(b)) / pooled_var.sqrt())
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(
    data: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if resamples == 0 {
        return Err(MetricsError::InvalidBootstrap("resamples must be positive".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidBootstrap(format!("level {level} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; data.len()];
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            for x in buf.iter_mut() {
                *x = data[rng.random_range(0..data.len())];
            }
            mean(&buf)
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((quantile(&means, alpha / 2.0), quantile(&means, 1.0 - alpha / 2.0)))
}

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Comparison of two samples. `mean`, `sd` and the interval describe `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsResult {
    pub u_statistic: f64,
    pub p_value: f64,
    /// `None` when either sample is too small or the pooled SD is zero.
    pub cohens_d: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean: f64,
    pub sd: f64,
}

pub fn compare(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<StatsResult, MetricsError> {
    let mw = mann_whitney_u(a, b)?;
    let (ci_low, ci_high) = bootstrap_ci(a, resamples, level, seed)?;
    Ok(StatsResult {
        u_statistic: mw.u_a,
        p_value: mw.p_value,
        cohens_d: cohens_d(a, b).ok(),
        ci_low,
        ci_high,
        mean: mean(a),
        sd: sample_sd(a),
    })
}
