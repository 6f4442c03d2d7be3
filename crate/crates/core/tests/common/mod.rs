//! Brute-force reference implementations and random fixtures shared by the
//! integration tests. Nothing here calls the library's scoring or metric code.

#![allow(dead_code)]

use cleanloop::trainer::{DynamicsTensor, FoldAssignment, UnitLayout, UnitRecord};
use rand::seq::SliceRandom;
use rand::Rng;

/// Random tensor with `instances` instances of 1..=3 units each, over
/// `classes` labels. Records come from random logits through a naive softmax.
pub fn random_tensor<R: Rng>(rng: &mut R, max_units: usize, folds: usize, epochs: usize) -> DynamicsTensor {
    let mut counts = Vec::new();
    let mut units = 0;
    loop {
        let c = rng.random_range(1..=3);
        if units + c > max_units {
            break;
        }
        counts.push(c);
        units += c;
        if counts.len() >= folds && rng.random_bool(0.05) {
            break;
        }
    }
    while counts.len() < folds {
        counts.push(1);
        units += 1;
    }
    let instances = counts.len();
    let ids: Vec<String> = (0..instances).map(|i| format!("x{i:03}")).collect();
    let mut fold_of: Vec<usize> = (0..instances).map(|i| i % folds).collect();
    fold_of.shuffle(rng);
    let assignment = FoldAssignment::from_folds(ids.clone(), folds, fold_of).unwrap();
    let layout = UnitLayout::from_counts(ids, counts);
    let classes = rng.random_range(2..=5);
    let assigned: Vec<usize> = (0..units).map(|_| rng.random_range(0..classes)).collect();
    let records = (0..folds)
        .map(|_| {
            (0..epochs)
                .map(|_| {
                    assigned
                        .iter()
                        .map(|&a| {
                            let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect();
                            naive_record(&logits, a)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    DynamicsTensor::new(layout, assignment, records).unwrap()
}

pub fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

pub fn naive_record(logits: &[f64], assigned: usize) -> UnitRecord {
    let probs = naive_softmax(logits);
    let mut max_other_prob = f64::NEG_INFINITY;
    let mut max_other_logit = f64::NEG_INFINITY;
    for k in 0..logits.len() {
        if k != assigned {
            max_other_prob = max_other_prob.max(probs[k]);
            max_other_logit = max_other_logit.max(logits[k]);
        }
    }
    UnitRecord {
        assigned_prob: probs[assigned],
        max_other_prob,
        assigned_logit: logits[assigned],
        max_other_logit,
        loss: -probs[assigned].ln(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Base {
    AumProb,
    AumLogit,
    Dm,
}

/// Base score of one unit under one fold's model, summed epoch by epoch.
pub fn oracle_base(tensor: &DynamicsTensor, base: Base, fold: usize, unit: usize) -> f64 {
    let e = tensor.epochs();
    let mut total = 0.0;
    for epoch in 1..=e {
        let r = tensor.record(fold, epoch, unit);
        total += match base {
            Base::AumProb => r.max_other_prob - r.assigned_prob,
            Base::AumLogit => r.max_other_logit - r.assigned_logit,
            Base::Dm => -r.assigned_prob,
        };
    }
    total / e as f64
}

fn units_of(tensor: &DynamicsTensor, instance: usize) -> Vec<usize> {
    let mut start = 0;
    for i in 0..instance {
        start += tensor.layout().units_of(i).len();
    }
    (start..start + tensor.layout().units_of(instance).len()).collect()
}

fn test_fold(tensor: &DynamicsTensor, instance: usize) -> usize {
    let id = &tensor.layout().instance_ids[instance];
    (0..tensor.fold_count()).find(|&f| tensor.assignment().members(f).contains(&instance)).unwrap_or_else(|| panic!("{id} in no fold"))
}

/// Per-instance ensemble scores: train folds averaged, test fold alone,
/// combined per the flags, then max over the instance's units.
pub fn oracle_ensemble(tensor: &DynamicsTensor, base: Base, train: bool, test: bool) -> Vec<f64> {
    let folds = tensor.fold_count();
    (0..tensor.layout().instance_count())
        .map(|i| {
            let t = test_fold(tensor, i);
            units_of(tensor, i)
                .into_iter()
                .map(|u| {
                    let train_scores: Vec<f64> = (0..folds).filter(|&f| f != t).map(|f| oracle_base(tensor, base, f, u)).collect();
                    let s_train = train_scores.iter().sum::<f64>() / train_scores.len() as f64;
                    let s_test = oracle_base(tensor, base, t, u);
                    match (train, test) {
                        (true, true) => (s_train + s_test) / 2.0,
                        (true, false) => s_train,
                        (false, true) => s_test,
                        _ => panic!("no ensembling"),
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Per-instance CU: negated assigned probability at the epoch of lowest mean
/// test loss (earliest on ties), max over units.
pub fn oracle_cu(tensor: &DynamicsTensor) -> Vec<f64> {
    let folds = tensor.fold_count();
    let best: Vec<usize> = (0..folds)
        .map(|f| {
            let test_units: Vec<usize> = (0..tensor.layout().instance_count())
                .filter(|&i| test_fold(tensor, i) == f)
                .flat_map(|i| units_of(tensor, i))
                .collect();
            let mut best_epoch = 1;
            let mut best_loss = f64::INFINITY;
            for epoch in 1..=tensor.epochs() {
                let loss = test_units.iter().map(|&u| -tensor.record(f, epoch, u).assigned_prob.ln()).sum::<f64>() / test_units.len() as f64;
                if loss < best_loss {
                    best_loss = loss;
                    best_epoch = epoch;
                }
            }
            best_epoch
        })
        .collect();
    (0..tensor.layout().instance_count())
        .map(|i| {
            let f = test_fold(tensor, i);
            units_of(tensor, i).into_iter().map(|u| -tensor.record(f, best[f], u).assigned_prob).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// AP as the area under the stepwise precision-recall curve,
/// `sum_k (R_k - R_{k-1}) * P_k`, over a ranking sorted by descending score
/// with ties broken by ascending id.
pub fn oracle_ap(ids: &[String], scores: &[f64], mask: &[bool]) -> f64 {
    let mut order: Vec<(f64, &str, bool)> = (0..ids.len()).map(|i| (scores[i], ids[i].as_str(), mask[i])).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let positives = mask.iter().filter(|&&m| m).count() as f64;
    let mut tp = 0.0;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (rank, &(_, _, relevant)) in order.iter().enumerate() {
        if relevant {
            tp += 1.0;
        }
        let recall = tp / positives;
        let precision = tp / (rank + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Relative closeness; values within 1e-6 of zero are compared against 1e-6.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
}
