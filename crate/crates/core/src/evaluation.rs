// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias and language-modeling metrics, and comparison reports across
//! fine-tuned variants.
//!
//! Every score is a pure function of the model and the data; examples are
//! scored in parallel and reduced in a fixed order. Strict inequalities are
//! used throughout, so exact ties never count as a preference.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::MinimalPair;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, PAD_TOKEN};

// ---------------------------------------------------------------------------
// Sequence scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Total log-probability when both members score the same number of
    /// tokens, mean per token otherwise.
    #[default]
    Auto,
    TotalLogProb,
    MeanPerToken,
}

/// Log-probability of a sequence and the number of scored tokens. A token
/// is scored when it and its predecessor are both real (non-padding).
pub fn sequence_log_prob<M: LanguageModel + ?Sized>(model: &M, tokens: &[usize]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits = model.logits(tokens)?;
    let mut total = 0.0;
    let mut n = 0;
    for i in 1..tokens.len() {
        if tokens[i] == PAD_TOKEN || tokens[i - 1] == PAD_TOKEN {
            continue;
        }
        total += log_softmax_at(logits.row(i - 1), tokens[i]);
        n += 1;
    }
    Ok((total, n))
}

fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    row[idx] as f64 - lse
}

/// Scores of both members under `mode`.
pub fn pair_scores<M: LanguageModel + ?Sized>(model: &M, pair: &MinimalPair, mode: LengthMode) -> Result<(f64, f64)> {
    let (lx, nx) = sequence_log_prob(model, &pair.x)?;
    let (lc, nc) = sequence_log_prob(model, &pair.x_cf)?;
    let mean = |l: f64, n: usize| if n == 0 { 0.0 } else { l / n as f64 };
    Ok(match mode {
        LengthMode::TotalLogProb => (lx, lc),
        LengthMode::MeanPerToken => (mean(lx, nx), mean(lc, nc)),
        LengthMode::Auto if nx == nc => (lx, lc),
        LengthMode::Auto => (mean(lx, nx), mean(lc, nc)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub metric: String,
    pub pair_id: usize,
    /// Score of the first member (or of the stereotypical continuation).
    pub score_x: f64,
    /// Score of the second member (or of the anti-stereotypical continuation).
    pub score_cf: f64,
    /// Whether the first member is strictly preferred.
    pub preferred: bool,
}

fn nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::invalid(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

fn fraction(records: &[ExampleRecord]) -> f64 {
    records.iter().filter(|r| r.preferred).count() as f64 / records.len() as f64
}

fn sentence_records<M: LanguageModel + ?Sized>(
    model: &M,
    pairs: &[MinimalPair],
    mode: LengthMode,
    metric: &str,
) -> Result<Vec<ExampleRecord>> {
    nonempty(pairs, "pair list")?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (a, b) = pair_scores(model, p, mode)?;
            Ok(ExampleRecord {
                metric: metric.to_string(),
                pair_id: i,
                score_x: a,
                score_cf: b,
                preferred: a > b,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-pair records for [`stereotype_score`]; `x` is the stereotypical member.
pub fn stereotype_records<M: LanguageModel + ?Sized>(
    model: &M,
    pairs: &[MinimalPair],
    mode: LengthMode,
) -> Result<Vec<ExampleRecord>> {
    sentence_records(model, pairs, mode, "stereotype_score")
}

/// Fraction of pairs whose stereotypical member (`x`) scores strictly higher.
pub fn stereotype_score<M: LanguageModel + ?Sized>(model: &M, pairs: &[MinimalPair], mode: LengthMode) -> Result<f64> {
    Ok(fraction(&stereotype_records(model, pairs, mode)?))
}

/// Fraction of pairs whose correct member (`x`) scores strictly higher.
pub fn minimal_pair_accuracy<M: LanguageModel + ?Sized>(
    model: &M,
    pairs: &[MinimalPair],
    mode: LengthMode,
) -> Result<f64> {
    Ok(fraction(&sentence_records(model, pairs, mode, "minimal_pair_accuracy")?))
}

pub fn professions_records<M: LanguageModel + ?Sized>(model: &M, pairs: &[MinimalPair]) -> Result<Vec<ExampleRecord>> {
    nonempty(pairs, "pair list")?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let t = p.targets()?;
            let logits = model.logits(&p.x)?;
            let row = logits.row(logits.rows() - 1);
            let (s, a) = (log_softmax_at(row, t.stereo), log_softmax_at(row, t.anti));
            Ok(ExampleRecord {
                metric: "professions_score".to_string(),
                pair_id: i,
                score_x: s.exp(),
                score_cf: a.exp(),
                preferred: row[t.stereo] > row[t.anti],
            })
        })
        .collect()
}

/// Fraction of pairs where the stereotypical continuation is strictly more
/// probable than the anti-stereotypical one at the final position.
pub fn professions_score<M: LanguageModel + ?Sized>(model: &M, pairs: &[MinimalPair]) -> Result<f64> {
    Ok(fraction(&professions_records(model, pairs)?))
}

/// Summed next-token NLL and prediction count over a corpus, with
/// predictions of padding tokens skipped.
pub fn corpus_nll<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<usize>]) -> Result<(f64, usize)> {
    let parts = corpus
        .par_iter()
        .map(|s| {
            if s.len() < 2 {
                return Ok((0.0, 0));
            }
            let logits = model.logits(s)?;
            let mut nll = 0.0;
            let mut n = 0;
            for (i, &t) in s.iter().enumerate().skip(1) {
                if t != PAD_TOKEN {
                    nll -= log_softmax_at(logits.row(i - 1), t);
                    n += 1;
                }
            }
            Ok((nll, n))
        })
        .collect::<Result<Vec<(f64, usize)>>>()?;
    Ok(parts.iter().fold((0.0, 0), |(a, b), &(x, y)| (a + x, b + y)))
}

/// `exp(total NLL / predicted tokens)`, predicting from position 1 onward.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, corpus: &[Vec<usize>]) -> Result<f64> {
    nonempty(corpus, "corpus")?;
    let (nll, n) = corpus_nll(model, corpus)?;
    if n == 0 {
        return Err(Error::invalid("corpus has no predicted tokens"));
    }
    Ok((nll / n as f64).exp())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<ExampleRecord>,
}

/// Whether a larger value of `metric` is better. Bias scores and
/// perplexity improve downward.
pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "perplexity" | "stereotype_score" | "professions_score")
}

/// Percent improvement of `value` over `baseline`; positive is better.
pub fn improvement(metric: &str, value: f64, baseline: f64) -> f64 {
    if value == baseline {
        return 0.0;
    }
    let change = (value - baseline) / baseline.abs() * 100.0;
    if higher_is_better(metric) {
        change
    } else {
        -change
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub tag: String,
    pub n_runs: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub metric_names: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups reports by tag (in first-seen order), averages over seeds and
/// compares every metric with the baseline tag's mean.
pub fn emit_report(reports: &[EvalReport], baseline: &str) -> Result<Comparison> {
    let mut tags: Vec<&str> = Vec::new();
    for r in reports {
        if !tags.contains(&r.tag.as_str()) {
            tags.push(&r.tag);
        }
    }
    if !tags.contains(&baseline) {
        return Err(Error::invalid(format!("baseline {baseline:?} is not among the reports")));
    }
    let mut metric_names: Vec<String> = reports.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    metric_names.sort();
    metric_names.dedup();

    let values = |tag: &str, m: &str| -> Vec<f64> {
        reports
            .iter()
            .filter(|r| r.tag == tag)
            .filter_map(|r| r.metrics.get(m).copied())
            .collect()
    };
    let mut rows = Vec::new();
    for tag in &tags {
        let mut metrics = BTreeMap::new();
        for m in &metric_names {
            let xs = values(tag, m);
            let base = values(baseline, m);
            if xs.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&xs);
            let imp = if base.is_empty() {
                f64::NAN
            } else {
                improvement(m, mean, mean_std(&base).0)
            };
            metrics.insert(
                m.clone(),
                MetricSummary {
                    mean,
                    std,
                    improvement: imp,
                },
            );
        }
        rows.push(ComparisonRow {
            tag: tag.to_string(),
            n_runs: reports.iter().filter(|r| r.tag == *tag).count(),
            metrics,
        });
    }
    Ok(Comparison {
        baseline: baseline.to_string(),
        metric_names,
        rows,
    })
}

impl Comparison {
    /// Tab-separated table: one row per tag; mean, std and percent
    /// improvement columns per metric.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tag\tn_runs");
        for m in &self.metric_names {
            let _ = write!(out, "\t{m}_mean\t{m}_std\t{m}_improvement_pct");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}\t{}", row.tag, row.n_runs);
            for m in &self.metric_names {
                match row.metrics.get(m) {
                    Some(s) => {
                        let _ = write!(out, "\t{:?}\t{:?}\t{:?}", s.mean, s.std, s.improvement);
                    }
                    None => out.push_str("\t\t\t"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable table with absolute scores and improvements.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("Baseline: {}\n\n| model | runs |", self.baseline);
        for m in &self.metric_names {
            let _ = write!(out, " {m} | {m} % |");
        }
        out.push_str("\n|---|---|");
        for _ in &self.metric_names {
            out.push_str("---|---|");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "| {} | {} |", row.tag, row.n_runs);
            for m in &self.metric_names {
                match row.metrics.get(m) {
                    Some(s) => {
                        let _ = write!(out, " {:.4} ± {:.4} | {:+.1} |", s.mean, s.std, s.improvement);
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}
