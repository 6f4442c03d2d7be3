//! Active annotation error detection.
//!
//! `cleanloop` ranks the instances of a labelled dataset by how likely their
//! labels are wrong, using training dynamics collected under C-fold
//! cross-validation, and drives an iterative correction loop: the top-k
//! suspects go to an annotator, corrections are applied, the model is
//! retrained from scratch, and the process repeats until a stopping rule
//! fires.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: JSONL datasets, label perturbation, corrections, error masks
//! - [`features`]: hashed unigram/bigram and per-token features
//! - [`trainer`]: built-in softmax regression and cross-validated dynamics
//! - [`scoring`]: AUM (probability and logit), DM, CU and the fold ensemble
//! - [`active_loop`]: batch selection, annotators, stopping rules, the loop
//! - [`eval`]: average precision, PR curves, seed aggregates
//! - [`experiment`]: end-to-end method runs and report files
//! - [`synth`]: synthetic datasets for experiments and tests
//!
//! Runnable walkthroughs live in this crate's `examples/` directory.

pub mod active_loop;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod parallel;
pub mod scoring;
pub mod synth;
pub mod trainer;

use thiserror::Error;

pub use active_loop::{run_loop, Annotator, LoopConfig, LoopOutcome, SessionState, SimulatedAnnotator, StopConfig, StopReason};
pub use dataset::{apply_corrections, error_mask, load_dataset, perturb_labels, write_dataset, Correction, Dataset, LabelSpace, TaskKind};
pub use eval::{average_precision, pr_curve, seed_aggregate, EvaluationReport, SeedAggregate};
pub use scoring::{ensemble_scores, EnsembleConfig, ErrorScorer, ScoreMethod, ScoreVector};
pub use trainer::{cross_validate, DynamicsTensor, TrainerConfig};

/// Version reported by manifests and the service.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Trainer(#[from] trainer::TrainerError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Loop(#[from] active_loop::LoopError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Dataset(
                    dataset::DatasetError::BadRate(_)
                        | dataset::DatasetError::GoldAlreadyPresent
                        | dataset::DatasetError::MissingGold
                )
                | Error::Trainer(trainer::TrainerError::InvalidConfig(_) | trainer::TrainerError::BadFoldCount { .. })
                | Error::Scoring(scoring::ScoringError::NoEnsembling | scoring::ScoringError::UnknownMethod(_))
                | Error::Loop(active_loop::LoopError::InvalidConfig(_))
        )
    }
}
