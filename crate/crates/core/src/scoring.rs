//! Error scores computed from training dynamics.
//!
//! Every score is oriented so that higher means "more likely mislabelled":
//!
//! - `aum_prob`: mean over epochs of `max_other_prob - assigned_prob`
//! - `aum_logit`: the same margin over raw logits
//! - `dm`: negative mean assigned-label probability
//! - `cu`: negative assigned-label probability on held-out data, under each
//!   fold's lowest-test-loss epoch
//! - `ensemble`: a base score computed within each fold, averaged over the
//!   `C - 1` folds that trained on the instance (`s_train`), then averaged
//!   with the score from the one fold that held it out (`s_test`)
//!
//! Sequence tasks are scored per token and reduced to one score per instance
//! by taking the maximum over tokens.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::trainer::{
    self, best_epoch_by_test_loss, cross_validate_with, train_full_with, DynamicsTensor, Hooks, Progress, RunDynamics, TrainerConfig,
    UnitLayout, UnitRecord,
};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("cannot score an empty trajectory")]
    EmptyTrajectory,
    #[error("cannot aggregate an empty token list")]
    EmptySequence,
    #[error("ensemble config must enable train or test ensembling")]
    NoEnsembling,
    #[error("non-finite score for instance {0:?}")]
    NonFinite(String),
    #[error("unknown scoring method {0:?}")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    AumProb,
    AumLogit,
    Dm,
    Cu,
    Ensemble,
}

impl ScoreMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMethod::AumProb => "aum_prob",
            ScoreMethod::AumLogit => "aum_logit",
            ScoreMethod::Dm => "dm",
            ScoreMethod::Cu => "cu",
            ScoreMethod::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMethod {
    type Err = ScoringError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "aum_prob" => ScoreMethod::AumProb,
            "aum_logit" => ScoreMethod::AumLogit,
            "dm" => ScoreMethod::Dm,
            "cu" => ScoreMethod::Cu,
            "ensemble" => ScoreMethod::Ensemble,
            other => return Err(ScoringError::UnknownMethod(other.to_string())),
        })
    }
}

/// Per-fold base score used inside the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseScore {
    AumProb,
    AumLogit,
    Dm,
}

impl BaseScore {
    pub fn method(self) -> ScoreMethod {
        match self {
            BaseScore::AumProb => ScoreMethod::AumProb,
            BaseScore::AumLogit => ScoreMethod::AumLogit,
            BaseScore::Dm => ScoreMethod::Dm,
        }
    }

    /// Applies the base score to one epoch trajectory.
    pub fn over<'a>(self, trajectory: impl Iterator<Item = &'a UnitRecord>) -> Result<f64, ScoringError> {
        match self {
            BaseScore::AumProb => aum_prob_iter(trajectory.map(|r| (r.assigned_prob, r.max_other_prob))),
            BaseScore::AumLogit => aum_prob_iter(trajectory.map(|r| (r.assigned_logit, r.max_other_logit))),
            BaseScore::Dm => mean(trajectory.map(|r| r.assigned_prob)).map(|m| -m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub use_train_ensembling: bool,
    pub use_test_ensembling: bool,
    pub base_score: BaseScore,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { use_train_ensembling: true, use_test_ensembling: true, base_score: BaseScore::AumProb }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !self.use_train_ensembling && !self.use_test_ensembling {
            return Err(ScoringError::NoEnsembling);
        }
        Ok(())
    }
}

/// Train- and test-based components behind an ensemble score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDetail {
    pub s_train: f64,
    pub s_test: f64,
}

/// Final score of one annotation unit under the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub score: f64,
    pub s_train: f64,
    pub s_test: f64,
}

/// One error score per instance, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub method: ScoreMethod,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Present for ensemble scores; for sequences, the components of the
    /// highest-scoring token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Vec<EnsembleDetail>>,
}

impl ScoreVector {
    pub fn new(method: ScoreMethod, ids: Vec<String>, scores: Vec<f64>) -> Result<Self, ScoringError> {
        assert_eq!(ids.len(), scores.len(), "one score per id");
        if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
            return Err(ScoringError::NonFinite(ids[pos].clone()));
        }
        Ok(Self { method, ids, scores, detail: None })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score_of(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == id).map(|pos| self.scores[pos])
    }

    /// Instance positions by descending score, ties by ascending id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| compare_desc(self.scores[a], &self.ids[a], self.scores[b], &self.ids[b]));
        order
    }

    pub fn ranked_ids(&self) -> Vec<String> {
        self.ranking().into_iter().map(|i| self.ids[i].clone()).collect()
    }

    /// CSV with columns `instance_id,score,s_train,s_test,method`, sorted by
    /// descending score.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["instance_id", "score", "s_train", "s_test", "method"])?;
        for i in self.ranking() {
            let (s_train, s_test) = match &self.detail {
                Some(d) => (d[i].s_train.to_string(), d[i].s_test.to_string()),
                None => (String::new(), String::new()),
            };
            out.write_record([self.ids[i].as_str(), &self.scores[i].to_string(), &s_train, &s_test, self.method.as_str()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Descending by score, then ascending by id.
pub fn compare_desc(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

fn mean(values: impl Iterator<Item = f64>) -> Result<f64, ScoringError> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(ScoringError::EmptyTrajectory);
    }
    Ok(sum / n as f64)
}

fn aum_prob_iter(pairs: impl Iterator<Item = (f64, f64)>) -> Result<f64, ScoringError> {
    mean(pairs.map(|(assigned, other)| other - assigned))
}

/// Probability margin: mean of `max_other - assigned` over `(assigned, max_other)` pairs.
pub fn aum_prob(snapshots: &[(f64, f64)]) -> Result<f64, ScoringError> {
    aum_prob_iter(snapshots.iter().copied())
}

/// Logit margin: mean of `max_other - assigned` over `(assigned, max_other)` logit pairs.
pub fn aum_logit(snapshots: &[(f64, f64)]) -> Result<f64, ScoringError> {
    aum_prob_iter(snapshots.iter().copied())
}

/// Negative mean confidence in the assigned label.
pub fn dm(assigned_probs: &[f64]) -> Result<f64, ScoringError> {
    mean(assigned_probs.iter().copied()).map(|m| -m)
}

pub fn aggregate_sequence(token_scores: &[f64]) -> Result<f64, ScoringError> {
    token_scores.iter().copied().reduce(f64::max).ok_or(ScoringError::EmptySequence)
}

/// Reduces unit scores to instance scores (max over an instance's units).
fn per_instance(layout: &UnitLayout, method: ScoreMethod, unit_scores: &[f64]) -> Result<ScoreVector, ScoringError> {
    let scores = (0..layout.instance_count())
        .map(|i| aggregate_sequence(&unit_scores[layout.units_of(i)]))
        .collect::<Result<Vec<_>, _>>()?;
    ScoreVector::new(method, layout.instance_ids.clone(), scores)
}

/// Classification uncertainty on held-out data.
pub fn cu(tensor: &DynamicsTensor) -> Result<ScoreVector, ScoringError> {
    let layout = tensor.layout();
    let best: Vec<usize> = (0..tensor.fold_count()).map(|f| best_epoch_by_test_loss(tensor, f)).collect();
    let mut unit_scores = vec![0.0; layout.unit_count()];
    for instance in 0..layout.instance_count() {
        let fold = tensor.assignment().fold_of_index(instance);
        for unit in layout.units_of(instance) {
            unit_scores[unit] = -tensor.record(fold, best[fold], unit).assigned_prob;
        }
    }
    per_instance(layout, ScoreMethod::Cu, &unit_scores)
}

/// Ensemble score of every annotation unit.
pub fn ensemble_token_scores(tensor: &DynamicsTensor, config: &EnsembleConfig) -> Result<Vec<TokenScore>, ScoringError> {
    config.validate()?;
    let layout = tensor.layout();
    let folds = tensor.fold_count();
    let mut out = Vec::with_capacity(layout.unit_count());
    for instance in 0..layout.instance_count() {
        let test_fold = tensor.assignment().fold_of_index(instance);
        for unit in layout.units_of(instance) {
            let mut train_sum = 0.0;
            let mut s_test = 0.0;
            for fold in 0..folds {
                let s = config.base_score.over(tensor.trajectory(fold, unit))?;
                if fold == test_fold {
                    s_test = s;
                } else {
                    train_sum += s;
                }
            }
            let s_train = train_sum / (folds - 1) as f64;
            let score = match (config.use_train_ensembling, config.use_test_ensembling) {
                (true, true) => 0.5 * (s_train + s_test),
                (true, false) => s_train,
                (false, true) => s_test,
                (false, false) => unreachable!("validated above"),
            };
            out.push(TokenScore { score, s_train, s_test });
        }
    }
    Ok(out)
}

/// Cross-validation ensemble of per-fold base scores.
pub fn ensemble_scores(tensor: &DynamicsTensor, config: &EnsembleConfig) -> Result<ScoreVector, ScoringError> {
    let layout = tensor.layout();
    let tokens = ensemble_token_scores(tensor, config)?;
    let unit_scores: Vec<f64> = tokens.iter().map(|t| t.score).collect();
    let mut vector = per_instance(layout, ScoreMethod::Ensemble, &unit_scores)?;
    let detail = (0..layout.instance_count())
        .map(|i| {
            let units = layout.units_of(i);
            let top = units.clone().fold(units.start, |best, u| if tokens[u].score > tokens[best].score { u } else { best });
            EnsembleDetail { s_train: tokens[top].s_train, s_test: tokens[top].s_test }
        })
        .collect();
    vector.detail = Some(detail);
    Ok(vector)
}

/// Base score over a single full-data training run.
pub fn single_run_scores(run: &RunDynamics, base: BaseScore) -> Result<ScoreVector, ScoringError> {
    let unit_scores = (0..run.layout.unit_count())
        .map(|u| base.over(run.trajectory(u)))
        .collect::<Result<Vec<_>, _>>()?;
    per_instance(&run.layout, base.method(), &unit_scores)
}

/// Anything that can turn a dataset into error scores.
pub trait ErrorScorer: Sync {
    fn method(&self) -> ScoreMethod;

    /// Scores `dataset`. `seed` drives every random choice of the scorer.
    fn score(&self, dataset: &Dataset, seed: u64, progress: Option<&Progress>) -> Result<ScoreVector, crate::Error>;
}

/// Cross-validated ensemble scorer (the active method's scorer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleScorer {
    pub folds: usize,
    pub trainer: TrainerConfig,
    pub ensemble: EnsembleConfig,
}

impl ErrorScorer for EnsembleScorer {
    fn method(&self) -> ScoreMethod {
        ScoreMethod::Ensemble
    }

    fn score(&self, dataset: &Dataset, seed: u64, progress: Option<&Progress>) -> Result<ScoreVector, crate::Error> {
        self.ensemble.validate()?;
        let config = TrainerConfig { seed, ..self.trainer.clone() };
        let hooks = Hooks { progress, ..Default::default() };
        let tensor = cross_validate_with(dataset, self.folds, &config, hooks, true)?;
        Ok(ensemble_scores(&tensor, &self.ensemble)?)
    }
}

/// Cross-validated classification uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuScorer {
    pub folds: usize,
    pub trainer: TrainerConfig,
}

impl ErrorScorer for CuScorer {
    fn method(&self) -> ScoreMethod {
        ScoreMethod::Cu
    }

    fn score(&self, dataset: &Dataset, seed: u64, progress: Option<&Progress>) -> Result<ScoreVector, crate::Error> {
        let config = TrainerConfig { seed, ..self.trainer.clone() };
        let hooks = Hooks { progress, ..Default::default() };
        let tensor = cross_validate_with(dataset, self.folds, &config, hooks, true)?;
        Ok(cu(&tensor)?)
    }
}

/// AUM or DM over one training run on the full dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleRunScorer {
    pub trainer: TrainerConfig,
    pub base: BaseScore,
}

impl ErrorScorer for SingleRunScorer {
    fn method(&self) -> ScoreMethod {
        self.base.method()
    }

    fn score(&self, dataset: &Dataset, seed: u64, progress: Option<&Progress>) -> Result<ScoreVector, crate::Error> {
        let config = TrainerConfig { seed, ..self.trainer.clone() };
        let run = train_full_with(dataset, &config, trainer::Hooks { progress, ..Default::default() })?;
        Ok(single_run_scores(&run, self.base)?)
    }
}
