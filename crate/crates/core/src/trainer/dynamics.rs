//! Training dynamics: per (fold, epoch, unit) prediction records.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{FoldAssignment, TrainerError};
use crate::dataset::Dataset;

/// Tolerance on `assigned_prob + max_other_prob <= 1`.
pub const PROB_EPS: f64 = 1e-9;

/// What one model checkpoint said about one annotation unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub assigned_prob: f64,
    pub max_other_prob: f64,
    pub assigned_logit: f64,
    pub max_other_logit: f64,
    /// Cross-entropy of the assigned label.
    pub loss: f64,
}

impl UnitRecord {
    /// Builds a record from a full logit row and the unit's assigned label.
    pub fn from_logits(logits: &[f64], probs: &[f64], assigned: usize) -> Self {
        let max_other = |values: &[f64]| {
            values
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != assigned)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        Self {
            assigned_prob: probs[assigned],
            max_other_prob: max_other(probs),
            assigned_logit: logits[assigned],
            max_other_logit: max_other(logits),
            loss: super::model::log_sum_exp(logits) - logits[assigned],
        }
    }

    fn check(&self) -> Result<(), String> {
        let finite = [self.assigned_prob, self.max_other_prob, self.assigned_logit, self.max_other_logit, self.loss]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !in_unit(self.assigned_prob) || !in_unit(self.max_other_prob) {
            return Err("probability outside [0, 1]".into());
        }
        if self.assigned_prob + self.max_other_prob > 1.0 + PROB_EPS {
            return Err("assigned and max-other probabilities sum above 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

/// Position of an annotation unit: instance index and token index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitRef {
    pub instance: usize,
    pub token: usize,
}

/// Records of one fold's model at the end of one epoch over one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSnapshot {
    pub fold: usize,
    /// 1-based.
    pub epoch: usize,
    pub partition: Partition,
    pub units: Vec<(UnitRef, UnitRecord)>,
}

/// Layout of annotation units: instance ids and per-instance unit ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitLayout {
    pub instance_ids: Vec<String>,
    offsets: Vec<usize>,
}

impl UnitLayout {
    pub fn of(dataset: &Dataset) -> Self {
        Self::from_counts(dataset.ids(), dataset.instances().iter().map(|i| i.unit_count()))
    }

    pub fn from_counts(instance_ids: Vec<String>, counts: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        assert_eq!(offsets.len(), instance_ids.len() + 1, "one unit count per instance");
        Self { instance_ids, offsets }
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn unit_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn units_of(&self, instance: usize) -> Range<usize> {
        self.offsets[instance]..self.offsets[instance + 1]
    }

    pub fn unit_ref(&self, unit: usize) -> UnitRef {
        let instance = self.offsets.partition_point(|&o| o <= unit) - 1;
        UnitRef { instance, token: unit - self.offsets[instance] }
    }
}

/// Complete cross-validation dynamics: every unit is recorded by every fold's
/// model at the end of every epoch. A unit belongs to the test partition of
/// the fold its instance is assigned to and to the train partition of all
/// other folds.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTensor {
    layout: UnitLayout,
    assignment: FoldAssignment,
    epochs: usize,
    /// `[fold][epoch - 1][unit]`
    records: Vec<Vec<Vec<UnitRecord>>>,
    /// `[fold][epoch - 1]`: mean test-partition loss.
    test_losses: Vec<Vec<f64>>,
}

impl DynamicsTensor {
    /// Assembles and validates a tensor. Test losses are derived from the
    /// records of each fold's test partition.
    pub fn new(layout: UnitLayout, assignment: FoldAssignment, records: Vec<Vec<Vec<UnitRecord>>>) -> Result<Self, TrainerError> {
        let incomplete = |msg: String| TrainerError::Incomplete(msg);
        if assignment.len() != layout.instance_count() {
            return Err(incomplete("fold assignment does not cover the instances".into()));
        }
        if records.len() != assignment.fold_count() {
            return Err(incomplete(format!("expected {} folds, got {}", assignment.fold_count(), records.len())));
        }
        let epochs = records.first().map(Vec::len).unwrap_or(0);
        if epochs == 0 {
            return Err(incomplete("no epochs recorded".into()));
        }
        for (fold, per_epoch) in records.iter().enumerate() {
            if per_epoch.len() != epochs {
                return Err(incomplete(format!("fold {fold} has {} epochs, expected {epochs}", per_epoch.len())));
            }
            for (e, units) in per_epoch.iter().enumerate() {
                if units.len() != layout.unit_count() {
                    return Err(incomplete(format!("fold {fold} epoch {} covers {} of {} units", e + 1, units.len(), layout.unit_count())));
                }
                if let Some((u, err)) = units.iter().enumerate().find_map(|(u, r)| r.check().err().map(|e| (u, e))) {
                    return Err(TrainerError::InvalidRecord { fold, epoch: e + 1, unit: u, message: err });
                }
            }
        }
        for fold in 0..assignment.fold_count() {
            if assignment.members(fold).is_empty() {
                return Err(incomplete(format!("fold {fold} has an empty test partition")));
            }
        }
        let test_losses = (0..assignment.fold_count())
            .map(|fold| {
                let test_units: Vec<usize> = assignment.members(fold).into_iter().flat_map(|i| layout.units_of(i)).collect();
                records[fold]
                    .iter()
                    .map(|units| test_units.iter().map(|&u| units[u].loss).sum::<f64>() / test_units.len() as f64)
                    .collect()
            })
            .collect();
        Ok(Self { layout, assignment, epochs, records, test_losses })
    }

    pub fn layout(&self) -> &UnitLayout {
        &self.layout
    }

    pub fn assignment(&self) -> &FoldAssignment {
        &self.assignment
    }

    pub fn fold_count(&self) -> usize {
        self.assignment.fold_count()
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Record of `unit` under fold `fold`'s model after epoch `epoch` (1-based).
    pub fn record(&self, fold: usize, epoch: usize, unit: usize) -> &UnitRecord {
        &self.records[fold][epoch - 1][unit]
    }

    /// All epochs of one (fold, unit) pair, in epoch order.
    pub fn trajectory(&self, fold: usize, unit: usize) -> impl Iterator<Item = &UnitRecord> + '_ {
        self.records[fold].iter().map(move |units| &units[unit])
    }

    /// Mean test-partition cross-entropy of `fold` per epoch.
    pub fn test_losses(&self, fold: usize) -> &[f64] {
        &self.test_losses[fold]
    }

    pub fn partition_of(&self, fold: usize, instance: usize) -> Partition {
        if self.assignment.fold_of_index(instance) == fold {
            Partition::Test
        } else {
            Partition::Train
        }
    }

    /// Snapshots grouped by (fold, epoch, partition), in that order.
    pub fn snapshots(&self) -> Vec<EpochSnapshot> {
        let mut out = Vec::with_capacity(self.fold_count() * self.epochs * 2);
        for fold in 0..self.fold_count() {
            for epoch in 1..=self.epochs {
                for partition in [Partition::Train, Partition::Test] {
                    let units = (0..self.layout.unit_count())
                        .map(|u| (self.layout.unit_ref(u), u))
                        .filter(|(r, _)| self.partition_of(fold, r.instance) == partition)
                        .map(|(r, u)| (r, *self.record(fold, epoch, u)))
                        .collect();
                    out.push(EpochSnapshot { fold, epoch, partition, units });
                }
            }
        }
        out
    }

    /// One JSON line per (fold, epoch, partition, unit).
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for snapshot in self.snapshots() {
            for (unit, record) in &snapshot.units {
                let line = SnapshotLine::new(
                    snapshot.fold,
                    snapshot.epoch,
                    snapshot.partition,
                    self.layout.instance_ids[unit.instance].clone(),
                    unit.token,
                    *record,
                );
                serde_json::to_writer(&mut writer, &line)?;
                writer.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    /// Reads dynamics produced by any trainer. The dataset supplies the
    /// instance order and unit counts; fold membership is taken from the
    /// `test` lines and must be consistent with the `train` lines.
    pub fn read_jsonl<R: BufRead>(reader: R, dataset: &Dataset) -> Result<Self, TrainerError> {
        let layout = UnitLayout::of(dataset);
        let mut lines = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| TrainerError::Import { line: i + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SnapshotLine =
                serde_json::from_str(&line).map_err(|e| TrainerError::Import { line: i + 1, message: e.to_string() })?;
            lines.push((i + 1, parsed));
        }
        let folds = lines.iter().map(|(_, l)| l.fold + 1).max().unwrap_or(0);
        let epochs = lines.iter().map(|(_, l)| l.epoch).max().unwrap_or(0);
        if folds < 2 || epochs == 0 {
            return Err(TrainerError::Incomplete("need at least 2 folds and 1 epoch".into()));
        }
        let mut fold_of: Vec<Option<usize>> = vec![None; layout.instance_count()];
        let mut slots: Vec<Vec<Vec<Option<UnitRecord>>>> = vec![vec![vec![None; layout.unit_count()]; epochs]; folds];
        let mut partitions: HashMap<(usize, usize), Partition> = HashMap::new();
        for (line_no, line) in lines {
            let err = |message: String| TrainerError::Import { line: line_no, message };
            let instance = dataset.position(&line.instance).ok_or_else(|| err(format!("unknown instance {:?}", line.instance)))?;
            let units = layout.units_of(instance);
            if line.token >= units.len() || line.epoch == 0 {
                return Err(err("token or epoch out of range".into()));
            }
            match partitions.insert((line.fold, instance), line.partition) {
                Some(p) if p != line.partition => return Err(err("instance appears in both partitions of a fold".into())),
                _ => {}
            }
            if line.partition == Partition::Test {
                match fold_of[instance] {
                    Some(f) if f != line.fold => return Err(err(format!("instance {:?} tested in two folds", line.instance))),
                    _ => fold_of[instance] = Some(line.fold),
                }
            }
            let slot = &mut slots[line.fold][line.epoch - 1][units.start + line.token];
            if slot.replace(line.record()).is_some() {
                return Err(err("duplicate record".into()));
            }
        }
        let folds_of: Vec<usize> = fold_of
            .iter()
            .enumerate()
            .map(|(i, f)| f.ok_or_else(|| TrainerError::Incomplete(format!("instance {:?} has no test fold", layout.instance_ids[i]))))
            .collect::<Result<_, _>>()?;
        for (&(fold, instance), &partition) in &partitions {
            if (folds_of[instance] == fold) != (partition == Partition::Test) {
                return Err(TrainerError::Incomplete(format!(
                    "instance {:?} has inconsistent partitions",
                    layout.instance_ids[instance]
                )));
            }
        }
        let records = slots
            .into_iter()
            .map(|per_epoch| {
                per_epoch
                    .into_iter()
                    .map(|units| units.into_iter().collect::<Option<Vec<_>>>())
                    .collect::<Option<Vec<_>>>()
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| TrainerError::Incomplete("missing (fold, epoch, unit) records".into()))?;
        let assignment = FoldAssignment::from_folds(layout.instance_ids.clone(), folds, folds_of)?;
        Self::new(layout, assignment, records)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotLine {
    fold: usize,
    epoch: usize,
    partition: Partition,
    instance: String,
    token: usize,
    assigned_prob: f64,
    max_other_prob: f64,
    assigned_logit: f64,
    max_other_logit: f64,
    loss: f64,
}

impl SnapshotLine {
    fn new(fold: usize, epoch: usize, partition: Partition, instance: String, token: usize, r: UnitRecord) -> Self {
        Self {
            fold,
            epoch,
            partition,
            instance,
            token,
            assigned_prob: r.assigned_prob,
            max_other_prob: r.max_other_prob,
            assigned_logit: r.assigned_logit,
            max_other_logit: r.max_other_logit,
            loss: r.loss,
        }
    }

    fn record(&self) -> UnitRecord {
        UnitRecord {
            assigned_prob: self.assigned_prob,
            max_other_prob: self.max_other_prob,
            assigned_logit: self.assigned_logit,
            max_other_logit: self.max_other_logit,
            loss: self.loss,
        }
    }
}

/// Dynamics of a single training run over the whole dataset (no held-out
/// data), used by the single-run baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDynamics {
    pub layout: UnitLayout,
    /// `[epoch - 1][unit]`
    pub records: Vec<Vec<UnitRecord>>,
}

impl RunDynamics {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn trajectory(&self, unit: usize) -> impl Iterator<Item = &UnitRecord> + '_ {
        self.records.iter().map(move |units| &units[unit])
    }
}
