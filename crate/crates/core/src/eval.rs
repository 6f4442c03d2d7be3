//! Average precision, precision-recall curves and seed aggregates.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active_loop::QueryRecord;
use crate::scoring::ScoreVector;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("the error mask has no positives")]
    NoPositives,
    #[error("cannot aggregate an empty list")]
    Empty,
    #[error("ranking is not a permutation of the dataset ids: {0}")]
    BadRanking(String),
}

/// Relevance flags in ranking order. `ranking` must be a permutation of
/// `ids`; `mask` is aligned with `ids`.
pub fn relevance_in_order(ranking: &[String], ids: &[String], mask: &[bool]) -> Result<Vec<bool>, EvalError> {
    assert_eq!(ids.len(), mask.len(), "mask must align with ids");
    if ranking.len() != ids.len() {
        return Err(EvalError::BadRanking(format!("{} ranked ids for {} instances", ranking.len(), ids.len())));
    }
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut seen = vec![false; ids.len()];
    ranking
        .iter()
        .map(|id| {
            let &pos = position.get(id.as_str()).ok_or_else(|| EvalError::BadRanking(format!("unknown id {id:?}")))?;
            if std::mem::replace(&mut seen[pos], true) {
                return Err(EvalError::BadRanking(format!("id {id:?} ranked twice")));
            }
            Ok(mask[pos])
        })
        .collect()
}

/// Relevance flags for a score ranking (descending, ties by ascending id).
pub fn relevance_by_scores(scores: &ScoreVector, mask: &[bool]) -> Vec<bool> {
    assert_eq!(scores.len(), mask.len(), "mask must align with scores");
    scores.ranking().into_iter().map(|i| mask[i]).collect()
}

/// Mean of precision@rank over the ranks holding a positive.
pub fn average_precision(relevance: &[bool]) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &relevant) in relevance.iter().enumerate() {
        if relevant {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(total / hits as f64)
}

pub fn average_precision_of_scores(scores: &ScoreVector, mask: &[bool]) -> Result<f64, EvalError> {
    average_precision(&relevance_by_scores(scores, mask))
}

/// One `(recall, precision)` point per rank position.
pub fn pr_curve(relevance: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    let positives = relevance.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut hits = 0usize;
    Ok(relevance
        .iter()
        .enumerate()
        .map(|(rank, &relevant)| {
            hits += usize::from(relevant);
            (hits as f64 / positives as f64, hits as f64 / (rank + 1) as f64)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub aps: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn seed_aggregate(aps: &[f64]) -> Result<SeedAggregate, EvalError> {
    if aps.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = aps.len() as f64;
    let mean = aps.iter().sum::<f64>() / n;
    let var = aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(SeedAggregate { aps: aps.to_vec(), mean, std: var.sqrt() })
}

impl SeedAggregate {
    /// `mean±std` in percent, one decimal.
    pub fn percent(&self) -> String {
        format!("{:.1}±{:.1}", self.mean * 100.0, self.std * 100.0)
    }
}

/// Errors found in one queried batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationYield {
    pub iteration: usize,
    pub errors_found: usize,
    pub batch_size: usize,
}

pub fn iteration_yields(log: &[QueryRecord]) -> Vec<IterationYield> {
    log.iter()
        .map(|q| IterationYield { iteration: q.iteration, errors_found: q.corrections.len(), batch_size: q.queried.len() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub v: u32,
    pub method: String,
    pub seed: u64,
    pub ap: f64,
    pub pr_curve: Vec<(f64, f64)>,
    pub per_iteration_yield: Vec<IterationYield>,
    pub positives: usize,
    pub total: usize,
}

impl EvaluationReport {
    pub fn from_ranking(
        method: impl Into<String>,
        seed: u64,
        ranking: &[String],
        ids: &[String],
        mask: &[bool],
        per_iteration_yield: Vec<IterationYield>,
    ) -> Result<Self, EvalError> {
        let relevance = relevance_in_order(ranking, ids, mask)?;
        Ok(Self {
            v: 1,
            method: method.into(),
            seed,
            ap: average_precision(&relevance)?,
            pr_curve: pr_curve(&relevance)?,
            per_iteration_yield,
            positives: mask.iter().filter(|&&m| m).count(),
            total: mask.len(),
        })
    }

    /// CSV with columns `rank,recall,precision`.
    pub fn write_pr_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["rank", "recall", "precision"])?;
        for (i, (r, p)) in self.pr_curve.iter().enumerate() {
            out.write_record([(i + 1).to_string(), r.to_string(), p.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Aligned text table of `mean±std` AP in percent, one row per label.
pub fn format_table(rows: &[(String, SeedAggregate)]) -> String {
    let width = rows.iter().map(|(name, _)| name.chars().count()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>11}  seeds", "method", "AP (%)");
    for (name, agg) in rows {
        let _ = writeln!(out, "{:<width$}  {:>11}  {}", name, agg.percent(), agg.aps.len());
    }
    out.push_str("(std is the population standard deviation over seeds)\n");
    out
}
