//! The active correction loop.
//!
//! Each iteration scores the dataset from scratch, routes the `k`
//! highest-scoring instances that have not been queried yet to an
//! annotator, applies the answers, and checks the stopping rules. Every
//! queried instance is marked corrected, including ones the annotator
//! confirmed, so nothing is routed twice.
//!
//! [`SessionState`] is an explicit state machine so the same logic can be
//! driven in-process by [`run_loop`] or step by step by an external service:
//!
//! ```text
//! accept_scores ──> pending batch ──submit──> (stop check) ──> needs scoring
//!        └──────────> stopped <─────────────────────┘
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{apply_corrections, Correction, CorrectionDiagnostics, Dataset};
use crate::scoring::{compare_desc, ErrorScorer, ScoreVector};
use crate::Error;

/// Default batch size.
pub const DEFAULT_K: usize = 50;
/// Default iteration cap.
pub const DEFAULT_MAX_ITERATIONS: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    InvalidConfig(String),
    #[error("answer does not match the outstanding batch: {0}")]
    BatchMismatch(String),
    #[error("no batch is outstanding")]
    NoPendingBatch,
    #[error("annotator failed: {0}")]
    Annotator(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Exhausted,
    Budget,
    ErrorFraction,
    Manual,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxIterations => "max_iterations",
            StopReason::Exhausted => "exhausted",
            StopReason::Budget => "budget",
            StopReason::ErrorFraction => "error_fraction",
            StopReason::Manual => "manual",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stopping rules. `max_iterations = 0` runs a single scoring pass with no
/// queries (the non-active variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    pub max_iterations: usize,
    /// Maximum number of instances routed to the annotator.
    pub budget: Option<usize>,
    /// Stop once the share of a batch whose labels changed is at or below this.
    pub error_fraction_threshold: Option<f64>,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self { max_iterations: DEFAULT_MAX_ITERATIONS, budget: None, error_fraction_threshold: None }
    }
}

impl StopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.budget == Some(0) {
            return Err(LoopError::InvalidConfig("budget must be >= 1".into()));
        }
        if let Some(t) = self.error_fraction_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(LoopError::InvalidConfig("error_fraction_threshold must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// One iteration's query and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    /// 1-based.
    pub iteration: usize,
    pub queried: Vec<String>,
    /// Corrections that actually changed labels, in batch order.
    pub corrections: Vec<Correction>,
}

impl QueryRecord {
    pub fn changed_ids(&self) -> Vec<&str> {
        self.corrections.iter().map(|c| c.instance_id.as_str()).collect()
    }

    pub fn error_fraction(&self) -> f64 {
        if self.queried.is_empty() {
            return 0.0;
        }
        self.corrections.len() as f64 / self.queried.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Confirm,
    Correct(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerItem {
    pub id: String,
    pub answer: Answer,
}

/// Answers for one batch, one per queried id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorAnswer {
    pub items: Vec<AnswerItem>,
}

impl AnnotatorAnswer {
    pub fn correction_count(&self) -> usize {
        self.items.iter().filter(|i| matches!(i.answer, Answer::Correct(_))).count()
    }
}

pub trait Annotator {
    fn annotate(&mut self, dataset: &Dataset, batch: &[String]) -> Result<AnnotatorAnswer, LoopError>;
}

impl<F> Annotator for F
where
    F: FnMut(&Dataset, &[String]) -> Result<AnnotatorAnswer, LoopError>,
{
    fn annotate(&mut self, dataset: &Dataset, batch: &[String]) -> Result<AnnotatorAnswer, LoopError> {
        self(dataset, batch)
    }
}

/// Answers from gold labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedAnnotator;

impl Annotator for SimulatedAnnotator {
    fn annotate(&mut self, dataset: &Dataset, batch: &[String]) -> Result<AnnotatorAnswer, LoopError> {
        simulated_annotator(dataset, batch)
    }
}

/// Corrects each queried instance to its gold labels when they differ, and
/// confirms it otherwise.
pub fn simulated_annotator(dataset: &Dataset, batch: &[String]) -> Result<AnnotatorAnswer, LoopError> {
    let items = batch
        .iter()
        .map(|id| {
            let inst = dataset.get(id).ok_or_else(|| LoopError::BatchMismatch(format!("unknown id {id:?}")))?;
            let gold = inst.gold.as_ref().ok_or_else(|| LoopError::Annotator("dataset has no gold labels".into()))?;
            let answer = if gold == &inst.observed { Answer::Confirm } else { Answer::Correct(gold.clone()) };
            Ok(AnswerItem { id: id.clone(), answer })
        })
        .collect::<Result<_, LoopError>>()?;
    Ok(AnnotatorAnswer { items })
}

/// Result of submitting one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub iteration: usize,
    pub batch_error_fraction: f64,
    pub diagnostics: CorrectionDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub dataset: Dataset,
    pub k: usize,
    pub iteration: usize,
    pub query_log: Vec<QueryRecord>,
    pub corrected_ids: BTreeSet<String>,
    pub stop_config: StopConfig,
    pub seed: u64,
    pub last_scores: Option<ScoreVector>,
    pub pending_batch: Option<Vec<String>>,
    pub stop_reason: Option<StopReason>,
}

impl SessionState {
    pub fn new(dataset: Dataset, k: usize, stop_config: StopConfig, seed: u64) -> Result<Self, LoopError> {
        if k == 0 {
            return Err(LoopError::InvalidConfig("k must be >= 1".into()));
        }
        stop_config.validate()?;
        let corrected_ids = dataset.instances().iter().filter(|i| i.corrected).map(|i| i.id.clone()).collect();
        Ok(Self {
            dataset,
            k,
            iteration: 0,
            query_log: Vec::new(),
            corrected_ids,
            stop_config,
            seed,
            last_scores: None,
            pending_batch: None,
            stop_reason: None,
        })
    }

    pub fn is_stopped(&self) -> bool {
        self.stop_reason.is_some()
    }

    pub fn is_exhausted(&self) -> bool {
        self.corrected_ids.len() >= self.dataset.len()
    }

    pub fn queried_count(&self) -> usize {
        self.query_log.iter().map(|q| q.queried.len()).sum()
    }

    pub fn last_batch_error_fraction(&self) -> Option<f64> {
        self.query_log.last().map(QueryRecord::error_fraction)
    }

    /// True when the next step is to (re)score the dataset.
    pub fn needs_scoring(&self) -> bool {
        !self.is_stopped() && self.pending_batch.is_none()
    }

    /// Largest batch the budget still allows.
    fn batch_capacity(&self) -> usize {
        match self.stop_config.budget {
            Some(n) => self.k.min(n.saturating_sub(self.queried_count())),
            None => self.k,
        }
    }

    /// Records fresh scores, then either stops or opens the next batch.
    pub fn accept_scores(&mut self, scores: ScoreVector) -> Result<(), LoopError> {
        if !self.needs_scoring() {
            return Err(LoopError::InvalidConfig("scores are not expected in the current state".into()));
        }
        if scores.ids != self.dataset.ids() {
            return Err(LoopError::InvalidConfig("scores do not cover the dataset's instances".into()));
        }
        self.last_scores = Some(scores);
        if let Some(reason) = should_stop(self, self.last_batch_error_fraction()) {
            self.stop_reason = Some(reason);
            return Ok(());
        }
        let scores = self.last_scores.as_ref().expect("just set");
        let batch = select_top(scores, &self.corrected_ids, self.batch_capacity());
        if batch.is_empty() {
            self.stop_reason = Some(StopReason::Exhausted);
        } else {
            self.pending_batch = Some(batch);
        }
        Ok(())
    }

    /// Applies the annotator's answers to the outstanding batch. All or
    /// nothing: any mismatch leaves the state untouched.
    pub fn submit(&mut self, answer: &AnnotatorAnswer) -> Result<BatchOutcome, Error> {
        let batch = self.pending_batch.as_ref().ok_or(LoopError::NoPendingBatch)?;
        let expected: HashSet<&str> = batch.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for item in &answer.items {
            if !expected.contains(item.id.as_str()) {
                return Err(LoopError::BatchMismatch(format!("id {:?} is not in the batch", item.id)).into());
            }
            if !seen.insert(item.id.as_str()) {
                return Err(LoopError::BatchMismatch(format!("id {:?} answered twice", item.id)).into());
            }
        }
        if seen.len() != expected.len() {
            let missing: Vec<&str> = batch.iter().map(String::as_str).filter(|id| !seen.contains(id)).collect();
            return Err(LoopError::BatchMismatch(format!("missing answers for {missing:?}")).into());
        }
        let mut to_apply = Vec::with_capacity(batch.len());
        let mut changed = Vec::new();
        // Apply in batch order regardless of answer order.
        for id in batch {
            let item = answer.items.iter().find(|i| &i.id == id).expect("coverage checked");
            let current = &self.dataset.get(id).expect("batch ids come from the dataset").observed;
            let labels = match &item.answer {
                Answer::Confirm => current.clone(),
                Answer::Correct(labels) => labels.clone(),
            };
            let correction = Correction { instance_id: id.clone(), new_labels: labels };
            if &correction.new_labels != current {
                changed.push(correction.clone());
            }
            to_apply.push(correction);
        }
        let (dataset, diagnostics) = apply_corrections(&self.dataset, &to_apply)?;
        let batch = self.pending_batch.take().expect("checked above");
        self.dataset = dataset;
        self.corrected_ids.extend(batch.iter().cloned());
        self.iteration += 1;
        let record = QueryRecord { iteration: self.iteration, queried: batch, corrections: changed };
        let batch_error_fraction = record.error_fraction();
        self.query_log.push(record);
        if let Some(reason) = should_stop(self, Some(batch_error_fraction)) {
            self.stop_reason = Some(reason);
        }
        Ok(BatchOutcome { iteration: self.iteration, batch_error_fraction, diagnostics })
    }

    /// Stops the session now, dropping any outstanding batch.
    pub fn stop(&mut self, reason: StopReason) {
        self.pending_batch = None;
        if self.stop_reason.is_none() {
            self.stop_reason = Some(reason);
        }
    }

    /// Queried ids in query order, then the rest by the last scores.
    pub fn final_ranking(&self) -> Vec<String> {
        let queried: Vec<String> = self.query_log.iter().flat_map(|q| q.queried.iter().cloned()).collect();
        let seen: HashSet<&str> = queried.iter().map(String::as_str).collect();
        let mut rest: Vec<usize> = (0..self.dataset.len()).filter(|&i| !seen.contains(self.dataset.instances()[i].id.as_str())).collect();
        match &self.last_scores {
            Some(scores) => rest.sort_by(|&a, &b| compare_desc(scores.scores[a], &scores.ids[a], scores.scores[b], &scores.ids[b])),
            None => rest.sort_by(|&a, &b| self.dataset.instances()[a].id.cmp(&self.dataset.instances()[b].id)),
        }
        queried.into_iter().chain(rest.into_iter().map(|i| self.dataset.instances()[i].id.clone())).collect()
    }

    /// Serializable view of the state, without features or labels; the
    /// dataset is referenced by path and content hash.
    pub fn checkpoint(&self, dataset_path: impl Into<String>, dataset_hash: impl Into<String>) -> SessionCheckpoint {
        SessionCheckpoint {
            v: 1,
            dataset_path: dataset_path.into(),
            dataset_hash: dataset_hash.into(),
            k: self.k,
            iteration: self.iteration,
            stop_config: self.stop_config.clone(),
            seed: self.seed,
            query_log: self.query_log.clone(),
            last_scores: self.last_scores.clone(),
            pending_batch: self.pending_batch.clone(),
            stop_reason: self.stop_reason,
        }
    }

    /// Rebuilds a state from a checkpoint and the original dataset (as it was
    /// when the session started) by replaying the query log.
    pub fn restore(checkpoint: &SessionCheckpoint, original: Dataset) -> Result<Self, Error> {
        let mut state = SessionState::new(original, checkpoint.k, checkpoint.stop_config.clone(), checkpoint.seed)?;
        for record in &checkpoint.query_log {
            let mut to_apply = Vec::with_capacity(record.queried.len());
            for id in &record.queried {
                let labels = match record.corrections.iter().find(|c| &c.instance_id == id) {
                    Some(c) => c.new_labels.clone(),
                    None => state
                        .dataset
                        .get(id)
                        .ok_or_else(|| LoopError::BatchMismatch(format!("checkpoint references unknown id {id:?}")))?
                        .observed
                        .clone(),
                };
                to_apply.push(Correction { instance_id: id.clone(), new_labels: labels });
            }
            state.dataset = apply_corrections(&state.dataset, &to_apply)?.0;
            state.corrected_ids.extend(record.queried.iter().cloned());
        }
        state.iteration = checkpoint.iteration;
        state.query_log = checkpoint.query_log.clone();
        state.last_scores = checkpoint.last_scores.clone();
        state.pending_batch = checkpoint.pending_batch.clone();
        state.stop_reason = checkpoint.stop_reason;
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCheckpoint {
    pub v: u32,
    pub dataset_path: String,
    pub dataset_hash: String,
    pub k: usize,
    pub iteration: usize,
    pub stop_config: StopConfig,
    pub seed: u64,
    pub query_log: Vec<QueryRecord>,
    pub last_scores: Option<ScoreVector>,
    pub pending_batch: Option<Vec<String>>,
    pub stop_reason: Option<StopReason>,
}

impl SessionCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LoopError> {
        let path = path.as_ref();
        let err = |message: String| LoopError::Checkpoint { path: path.display().to_string(), message };
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| err(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| err(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoopError> {
        let path = path.as_ref();
        let err = |message: String| LoopError::Checkpoint { path: path.display().to_string(), message };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let checkpoint: SessionCheckpoint = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        if checkpoint.v != 1 {
            return Err(err(format!("unsupported checkpoint version {}", checkpoint.v)));
        }
        Ok(checkpoint)
    }
}

/// The `k` highest-scoring ids not in `excluded`, descending, ties by id.
pub fn select_top(scores: &ScoreVector, excluded: &BTreeSet<String>, k: usize) -> Vec<String> {
    scores
        .ranking()
        .into_iter()
        .map(|i| &scores.ids[i])
        .filter(|id| !excluded.contains(*id))
        .take(k)
        .cloned()
        .collect()
}

/// Next batch for `state`: its `k` best uncorrected instances.
pub fn select_batch(scores: &ScoreVector, state: &SessionState) -> Vec<String> {
    select_top(scores, &state.corrected_ids, state.k)
}

/// First stopping rule that fires, checked in the order: iteration cap,
/// exhaustion, budget, batch error fraction.
pub fn should_stop(state: &SessionState, last_batch_error_fraction: Option<f64>) -> Option<StopReason> {
    let stop = &state.stop_config;
    if state.iteration >= stop.max_iterations {
        return Some(StopReason::MaxIterations);
    }
    if state.is_exhausted() {
        return Some(StopReason::Exhausted);
    }
    if let Some(n) = stop.budget {
        if state.queried_count() >= n {
            return Some(StopReason::Budget);
        }
    }
    if let (Some(threshold), Some(fraction)) = (stop.error_fraction_threshold, last_batch_error_fraction) {
        if fraction <= threshold {
            return Some(StopReason::ErrorFraction);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub k: usize,
    pub stop: StopConfig,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, stop: StopConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub state: SessionState,
    pub final_ranking: Vec<String>,
}

/// Drives `state` until a stopping rule fires. On error the state is left at
/// a consistent boundary and the loop can be resumed.
pub fn resume_loop(state: &mut SessionState, scorer: &dyn ErrorScorer, annotator: &mut dyn Annotator) -> Result<(), Error> {
    while !state.is_stopped() {
        if state.needs_scoring() {
            let scores = scorer.score(&state.dataset, state.seed, None)?;
            state.accept_scores(scores)?;
            continue;
        }
        let batch = state.pending_batch.clone().expect("not stopped and not scoring");
        let answer = annotator.annotate(&state.dataset, &batch)?;
        state.submit(&answer)?;
    }
    Ok(())
}

/// Runs the active loop from scratch.
pub fn run_loop(dataset: Dataset, scorer: &dyn ErrorScorer, config: &LoopConfig, annotator: &mut dyn Annotator) -> Result<LoopOutcome, Error> {
    let mut state = SessionState::new(dataset, config.k, config.stop.clone(), config.seed)?;
    resume_loop(&mut state, scorer, annotator)?;
    let final_ranking = state.final_ranking();
    Ok(LoopOutcome { state, final_ranking })
}
