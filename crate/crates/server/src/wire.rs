//! JSON payloads. Every top-level body carries `"v": 1`.

use cleanloop::active_loop::{QueryRecord, StopConfig, StopReason};
use cleanloop::eval::{EvaluationReport, IterationYield};
use cleanloop::scoring::EnsembleConfig;
use cleanloop::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Scoring,
    AwaitingAnnotations,
    Retraining,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No gold labels: a human answers.
    Live,
    /// Gold labels present: reports include AP.
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub v: u32,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default = "one")]
    pub v: u32,
    /// Dataset path; defaults to the server's `--dataset`.
    pub dataset_ref: Option<String>,
    pub k: Option<usize>,
    pub stop_config: Option<StopConfig>,
    pub folds: Option<usize>,
    pub trainer: Option<TrainerConfig>,
    pub ensemble: Option<EnsembleConfig>,
    pub seed: Option<u64>,
    /// Bearer token required on every later request for this session.
    pub token: Option<String>,
}

fn one() -> u32 {
    WIRE_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub v: u32,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub v: u32,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub progress: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
}

impl ErrorBody {
    pub fn new(error: impl Into<String>) -> Self {
        Self { v: WIRE_VERSION, error: error.into(), phase: None, progress: None, stop_reason: None, report: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Content {
    Text { text: String },
    Tokens { tokens: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    #[serde(flatten)]
    pub content: Content,
    pub labels: Vec<String>,
    pub score: f64,
    /// 1-based rank among the instances not yet queried.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub v: u32,
    /// Iteration this batch belongs to (1-based).
    pub iteration: usize,
    pub label_space: Vec<String>,
    pub items: Vec<BatchItem>,
}

/// One answer: either `"confirm": true` or `"new_labels": [...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub confirm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_labels: Option<Vec<String>>,
}

impl AnswerItem {
    pub fn confirm(id: impl Into<String>) -> Self {
        Self { id: id.into(), confirm: true, new_labels: None }
    }

    pub fn correct(id: impl Into<String>, labels: Vec<String>) -> Self {
        Self { id: id.into(), confirm: false, new_labels: Some(labels) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corrections {
    #[serde(default = "one")]
    pub v: u32,
    pub answers: Vec<AnswerItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub v: u32,
    pub iteration: usize,
    pub batch_error_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub v: u32,
    pub id: String,
    pub phase: Phase,
    pub mode: Mode,
    pub iteration: usize,
    pub corrected_count: usize,
    pub total: usize,
    pub last_batch_error_fraction: Option<f64>,
    pub stop_reason: Option<StopReason>,
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created: u64,
    pub updated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub v: u32,
    pub id: String,
    pub mode: Mode,
    pub iteration: usize,
    pub stop_reason: Option<StopReason>,
    pub per_iteration_yield: Vec<IterationYield>,
    pub query_log: Vec<QueryRecord>,
    /// Download link for the corrected dataset.
    pub dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stopped {
    pub v: u32,
    pub phase: Phase,
    pub stop_reason: Option<StopReason>,
}
