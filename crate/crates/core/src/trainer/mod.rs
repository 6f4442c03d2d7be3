//! Cross-validated training that records per-epoch predictions for every
//! annotation unit.
//!
//! The built-in model is multinomial logistic regression over the dataset's
//! hashed features, trained by mini-batch SGD from zero weights. Sequence
//! tasks are treated as independent per-token classification. The only
//! randomness is the per-epoch shuffle of the training units, seeded from
//! [`TrainerConfig::seed`] and the fold index.
//!
//! External trainers can stand in for the built-in one by producing a
//! [`DynamicsTensor`] (see [`DynamicsTensor::read_jsonl`]); the scorers only
//! ever look at the tensor.

mod dynamics;
pub mod model;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dynamics::{DynamicsTensor, EpochSnapshot, Partition, RunDynamics, UnitLayout, UnitRecord, UnitRef, PROB_EPS};
pub use model::SoftmaxRegression;

use crate::dataset::Dataset;
use crate::parallel;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("fold count {folds} out of range for {instances} instances (need 2 <= C <= n)")]
    BadFoldCount { folds: usize, instances: usize },
    #[error("fold index {fold} out of range for {folds} folds")]
    BadFold { fold: usize, folds: usize },
    #[error("non-finite model output in fold {fold:?} at epoch {epoch}")]
    NonFinite { fold: Option<usize>, epoch: usize },
    #[error("incomplete dynamics: {0}")]
    Incomplete(String),
    #[error("invalid record (fold {fold}, epoch {epoch}, unit {unit}): {message}")]
    InvalidRecord { fold: usize, epoch: usize, unit: usize, message: String },
    #[error("dynamics import, line {line}: {message}")]
    Import { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { epochs: 10, learning_rate: 0.1, batch_size: 32, l2: 1e-6, seed: 0 }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad("l2 must be finite and non-negative");
        }
        Ok(())
    }
}

/// Instance-level fold membership: all tokens of a sequence share a fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    fold_count: usize,
    ids: Vec<String>,
    folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn from_folds(ids: Vec<String>, fold_count: usize, folds: Vec<usize>) -> Result<Self, TrainerError> {
        if ids.len() != folds.len() {
            return Err(TrainerError::Incomplete("fold list does not match instance list".into()));
        }
        if fold_count < 2 || fold_count > ids.len() {
            return Err(TrainerError::BadFoldCount { folds: fold_count, instances: ids.len() });
        }
        if let Some(&fold) = folds.iter().find(|&&f| f >= fold_count) {
            return Err(TrainerError::BadFold { fold, folds: fold_count });
        }
        Ok(Self { fold_count, ids, folds })
    }

    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn fold_of_index(&self, instance: usize) -> usize {
        self.folds[instance]
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|pos| self.folds[pos])
    }

    /// Instance indices whose test fold is `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        self.folds.iter().enumerate().filter(|&(_, &f)| f == fold).map(|(i, _)| i).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        self.folds.iter().for_each(|&f| sizes[f] += 1);
        sizes
    }
}

/// Combines two seeds into one stream seed (splitmix64 finalizer).
pub fn mix_seeds(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_add(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffled round-robin assignment of instances to `folds` folds.
pub fn assign_folds(dataset: &Dataset, folds: usize, seed: u64) -> Result<FoldAssignment, TrainerError> {
    let n = dataset.len();
    if folds < 2 || folds > n {
        return Err(TrainerError::BadFoldCount { folds, instances: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seeds(dataset.seed, seed)));
    let mut assigned = vec![0; n];
    for (slot, &instance) in order.iter().enumerate() {
        assigned[instance] = slot % folds;
    }
    FoldAssignment::from_folds(dataset.ids(), folds, assigned)
}

/// Full probability row seen by a [`Hooks::observer`].
#[derive(Debug)]
pub struct ProbabilityRow<'a> {
    /// `None` for single-run (non cross-validated) training.
    pub fold: Option<usize>,
    pub epoch: usize,
    pub unit: UnitRef,
    pub probs: &'a [f64],
}

/// Completed vs. total epochs of a training job, readable from other threads.
#[derive(Debug, Default)]
pub struct Progress {
    done: AtomicUsize,
    total: AtomicUsize,
}

impl Progress {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&self, total: usize) {
        self.total.store(total, Ordering::SeqCst);
        self.done.store(0, Ordering::SeqCst);
    }

    fn tick(&self) {
        self.done.fetch_add(1, Ordering::SeqCst);
    }

    /// Fraction of epochs completed, in [0, 1].
    pub fn fraction(&self) -> f64 {
        let total = self.total.load(Ordering::SeqCst);
        if total == 0 {
            return 0.0;
        }
        (self.done.load(Ordering::SeqCst) as f64 / total as f64).min(1.0)
    }
}

/// Optional instrumentation for a training job.
#[derive(Default, Clone, Copy)]
pub struct Hooks<'a> {
    pub observer: Option<&'a (dyn Fn(&ProbabilityRow<'_>) + Sync)>,
    pub progress: Option<&'a Progress>,
}

/// Per-epoch records of one fold's model over all units.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldDynamics {
    pub fold: usize,
    /// `[epoch - 1][unit]`
    pub records: Vec<Vec<UnitRecord>>,
}

struct Unit<'a> {
    reference: UnitRef,
    features: &'a crate::features::SparseVec,
    label: usize,
}

fn units_of(dataset: &Dataset) -> Vec<Unit<'_>> {
    dataset
        .instances()
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| {
            inst.features.iter().zip(&inst.observed).enumerate().map(move |(t, (features, &label))| Unit {
                reference: UnitRef { instance: i, token: t },
                features,
                label,
            })
        })
        .collect()
}

/// Trains on the units of instances selected by `in_train` and records every
/// unit of the dataset at the end of each epoch.
fn train_and_record(
    dataset: &Dataset,
    units: &[Unit<'_>],
    in_train: impl Fn(usize) -> bool,
    fold: Option<usize>,
    shuffle_seed: u64,
    config: &TrainerConfig,
    hooks: Hooks<'_>,
) -> Result<Vec<Vec<UnitRecord>>, TrainerError> {
    let classes = dataset.label_space.len();
    let mut model = SoftmaxRegression::new(dataset.feature_dim, classes);
    let mut train: Vec<usize> = (0..units.len()).filter(|&u| in_train(units[u].reference.instance)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut logits = vec![0.0; classes];
    let mut per_epoch = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let examples: Vec<model::Example<'_>> = batch.iter().map(|&u| (units[u].features, units[u].label)).collect();
            model.sgd_step(&examples, config.learning_rate, config.l2);
        }
        let mut records = Vec::with_capacity(units.len());
        for unit in units {
            model.logits_into(unit.features, &mut logits);
            let probs = model::softmax(&logits);
            if let Some(observer) = hooks.observer {
                observer(&ProbabilityRow { fold, epoch, unit: unit.reference, probs: &probs });
            }
            let record = UnitRecord::from_logits(&logits, &probs, unit.label);
            if !(record.loss.is_finite() && record.assigned_logit.is_finite() && record.max_other_logit.is_finite()) {
                return Err(TrainerError::NonFinite { fold, epoch });
            }
            records.push(record);
        }
        per_epoch.push(records);
        if let Some(progress) = hooks.progress {
            progress.tick();
        }
    }
    Ok(per_epoch)
}

/// Trains fold `fold`'s model on the other folds' instances.
pub fn train_fold(dataset: &Dataset, fold: usize, assignment: &FoldAssignment, config: &TrainerConfig) -> Result<FoldDynamics, TrainerError> {
    train_fold_with(dataset, fold, assignment, config, Hooks::default())
}

pub fn train_fold_with(
    dataset: &Dataset,
    fold: usize,
    assignment: &FoldAssignment,
    config: &TrainerConfig,
    hooks: Hooks<'_>,
) -> Result<FoldDynamics, TrainerError> {
    config.validate()?;
    if fold >= assignment.fold_count() {
        return Err(TrainerError::BadFold { fold, folds: assignment.fold_count() });
    }
    if assignment.len() != dataset.len() {
        return Err(TrainerError::Incomplete("fold assignment does not cover the dataset".into()));
    }
    let units = units_of(dataset);
    let records = train_and_record(
        dataset,
        &units,
        |i| assignment.fold_of_index(i) != fold,
        Some(fold),
        mix_seeds(config.seed, fold as u64),
        config,
        hooks,
    )?;
    Ok(FoldDynamics { fold, records })
}

/// Trains all folds (in parallel on the shared pool) and assembles the tensor.
pub fn cross_validate(dataset: &Dataset, folds: usize, config: &TrainerConfig) -> Result<DynamicsTensor, TrainerError> {
    cross_validate_with(dataset, folds, config, Hooks::default(), true)
}

/// Same result as [`cross_validate`], one fold after another.
pub fn cross_validate_sequential(dataset: &Dataset, folds: usize, config: &TrainerConfig) -> Result<DynamicsTensor, TrainerError> {
    cross_validate_with(dataset, folds, config, Hooks::default(), false)
}

pub fn cross_validate_with(
    dataset: &Dataset,
    folds: usize,
    config: &TrainerConfig,
    hooks: Hooks<'_>,
    parallel: bool,
) -> Result<DynamicsTensor, TrainerError> {
    config.validate()?;
    let assignment = assign_folds(dataset, folds, config.seed)?;
    if let Some(progress) = hooks.progress {
        progress.reset(folds * config.epochs);
    }
    let run = |fold: usize| train_fold_with(dataset, fold, &assignment, config, hooks);
    let results: Vec<Result<FoldDynamics, TrainerError>> = if parallel {
        parallel::pool().install(|| (0..folds).into_par_iter().map(run).collect())
    } else {
        (0..folds).map(run).collect()
    };
    let records = results.into_iter().map(|r| r.map(|f| f.records)).collect::<Result<Vec<_>, _>>()?;
    DynamicsTensor::new(UnitLayout::of(dataset), assignment, records)
}

/// A single training run on the whole dataset.
pub fn train_full(dataset: &Dataset, config: &TrainerConfig) -> Result<RunDynamics, TrainerError> {
    train_full_with(dataset, config, Hooks::default())
}

pub fn train_full_with(dataset: &Dataset, config: &TrainerConfig, hooks: Hooks<'_>) -> Result<RunDynamics, TrainerError> {
    config.validate()?;
    if let Some(progress) = hooks.progress {
        progress.reset(config.epochs);
    }
    let units = units_of(dataset);
    let records = train_and_record(dataset, &units, |_| true, None, mix_seeds(config.seed, u64::MAX), config, hooks)?;
    Ok(RunDynamics { layout: UnitLayout::of(dataset), records })
}

/// Epoch (1-based) with the lowest mean test loss for `fold`; ties go to the
/// earliest epoch.
pub fn best_epoch_by_test_loss(tensor: &DynamicsTensor, fold: usize) -> usize {
    best_epoch(tensor.test_losses(fold))
}

pub(crate) fn best_epoch(losses: &[f64]) -> usize {
    let mut best = 0;
    for (e, &loss) in losses.iter().enumerate() {
        if loss < losses[best] {
            best = e;
        }
    }
    best + 1
}

/// Counts of test and train appearances per unit, for completeness checks.
pub fn partition_counts(tensor: &DynamicsTensor) -> HashMap<UnitRef, (usize, usize)> {
    let mut counts: HashMap<UnitRef, (usize, usize)> = HashMap::new();
    for snapshot in tensor.snapshots() {
        for (unit, _) in &snapshot.units {
            let entry = counts.entry(*unit).or_default();
            match snapshot.partition {
                Partition::Test => entry.0 += 1,
                Partition::Train => entry.1 += 1,
            }
        }
    }
    counts
}
