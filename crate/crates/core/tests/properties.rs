mod common;

use std::collections::HashSet;

use cleanloop::active_loop::{run_loop, LoopConfig, SimulatedAnnotator, StopConfig};
use cleanloop::dataset::{annotation_error_count, error_mask, perturb_labels, Dataset, Instance, LabelSpace, TaskKind};
use cleanloop::eval::{average_precision, average_precision_of_scores, pr_curve, relevance_by_scores};
use cleanloop::scoring::{ErrorScorer, ScoreMethod, ScoreVector};
use cleanloop::trainer::{cross_validate, DynamicsTensor, Progress, TrainerConfig};
use cleanloop::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 1 << 10;

fn classification(labels: &[usize], classes: usize) -> Dataset {
    let names: Vec<String> = (0..classes).map(|k| format!("l{k}")).collect();
    let instances = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| Instance::classification(format!("c{i:04}"), format!("w{} w{}", i % 7, y), y, DIM).unwrap())
        .collect();
    Dataset::with_dim(TaskKind::Classification, LabelSpace::new(names).unwrap(), instances, DIM).unwrap()
}

fn sequences(lengths: &[usize], classes: usize) -> Dataset {
    let names: Vec<String> = (0..classes).map(|k| format!("t{k}")).collect();
    let instances = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let tokens = (0..n).map(|j| format!("tok{}", (i + j) % 11)).collect();
            Instance::sequence(format!("q{i:04}"), tokens, (0..n).map(|j| (i + j) % classes).collect(), DIM).unwrap()
        })
        .collect();
    Dataset::with_dim(TaskKind::Sequence, LabelSpace::new(names).unwrap(), instances, DIM).unwrap()
}

/// Scores drawn from a seeded stream, independent of the labels.
struct RandomScorer;

impl ErrorScorer for RandomScorer {
    fn method(&self) -> ScoreMethod {
        ScoreMethod::Ensemble
    }

    fn score(&self, dataset: &Dataset, seed: u64, _: Option<&Progress>) -> Result<ScoreVector, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ dataset.corrected_count() as u64);
        let scores = (0..dataset.len()).map(|_| rng.random_range(0..5) as f64).collect();
        Ok(ScoreVector::new(ScoreMethod::Ensemble, dataset.ids(), scores)?)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jsonl_round_trip(labels in prop::collection::vec(0usize..3, 1..40), lengths in prop::collection::vec(1usize..8, 1..20), seed in any::<u64>()) {
        for ds in [classification(&labels, 3), sequences(&lengths, 3)] {
            let bytes = ds.to_jsonl_bytes();
            let back = Dataset::from_reader(&bytes[..], DIM).unwrap();
            prop_assert_eq!(&back, &ds);
            if ds.annotation_count() >= 2 {
                let noisy = perturb_labels(&ds, 0.3, seed).unwrap();
                let back = Dataset::from_reader(&noisy.to_jsonl_bytes()[..], DIM).unwrap();
                prop_assert_eq!(back, noisy);
            }
        }
    }

    #[test]
    fn perturbation_hits_the_nominal_count(lengths in prop::collection::vec(1usize..12, 1..60), rate in 0.01f64..0.99, seed in any::<u64>()) {
        let ds = sequences(&lengths, 4);
        let noisy = perturb_labels(&ds, rate, seed).unwrap();
        let expected = (rate * ds.annotation_count() as f64).round() as usize;
        prop_assert_eq!(annotation_error_count(&noisy).unwrap(), expected);
        prop_assert_eq!(noisy.clone(), perturb_labels(&ds, rate, seed).unwrap());
        let flagged = error_mask(&noisy).unwrap().iter().filter(|&&m| m).count();
        prop_assert!(flagged <= expected);
        prop_assert_eq!(flagged == 0, expected == 0);
    }

    #[test]
    fn ap_is_bounded_and_monotone_invariant(
        raw in prop::collection::vec((0u32..50, any::<bool>()), 1..200),
        shift in -5.0f64..5.0,
        stretch in 0.1f64..10.0,
    ) {
        let mut mask: Vec<bool> = raw.iter().map(|r| r.1).collect();
        mask[0] = true;
        let ids: Vec<String> = (0..raw.len()).map(|i| format!("r{i:03}")).collect();
        let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let vector = ScoreVector::new(ScoreMethod::Dm, ids.clone(), scores.clone()).unwrap();
        let ap = average_precision_of_scores(&vector, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((ap - common::oracle_ap(&ids, &scores, &mask)).abs() <= 1e-12);

        let transformed: Vec<f64> = scores.iter().map(|s| (s * stretch + shift).exp()).collect();
        let moved = ScoreVector::new(ScoreMethod::Dm, ids, transformed).unwrap();
        prop_assert_eq!(average_precision_of_scores(&moved, &mask).unwrap(), ap);

        let curve = pr_curve(&relevance_by_scores(&vector, &mask)).unwrap();
        prop_assert_eq!(curve.len(), mask.len());
        prop_assert!(curve.windows(2).all(|w| w[0].0 <= w[1].0));
        prop_assert_eq!(curve.last().unwrap().0, 1.0);
    }

    #[test]
    fn loop_never_requeries(n in 5usize..80, k in 1usize..30, iterations in 0usize..10, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let ds = perturb_labels(&classification(&labels, 2), 0.2, seed).unwrap();
        let config = LoopConfig { k, stop: StopConfig { max_iterations: iterations, ..Default::default() }, seed };
        let outcome = run_loop(ds.clone(), &RandomScorer, &config, &mut SimulatedAnnotator).unwrap();
        let state = &outcome.state;
        let queried: Vec<&String> = state.query_log.iter().flat_map(|q| &q.queried).collect();
        prop_assert_eq!(queried.iter().collect::<HashSet<_>>().len(), queried.len());
        prop_assert!(state.query_log.iter().all(|q| q.queried.len() <= k && !q.queried.is_empty()));
        prop_assert_eq!(state.iteration, iterations.min(n.div_ceil(k)));
        let mut ranking = outcome.final_ranking.clone();
        prop_assert!(ranking.iter().zip(&queried).all(|(a, b)| a == *b));
        ranking.sort();
        prop_assert_eq!(ranking, ds.ids());
        for inst in state.dataset.instances() {
            if state.corrected_ids.contains(&inst.id) {
                prop_assert_eq!(Some(&inst.observed), inst.gold.as_ref());
            }
        }
    }
}

#[test]
fn random_ranking_ap_tracks_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (n, positives) = (400, 20);
    let aps: Vec<f64> = (0..200)
        .map(|_| {
            let mut relevance = vec![false; n];
            relevance[..positives].iter_mut().for_each(|r| *r = true);
            relevance.shuffle(&mut rng);
            average_precision(&relevance).unwrap()
        })
        .collect();
    let mean = aps.iter().sum::<f64>() / aps.len() as f64;
    let sd = (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aps.len() - 1) as f64).sqrt();
    let prevalence = positives as f64 / n as f64;
    // Exact expectation for R positives among N uniformly shuffled items:
    // (R-1)/(N-1) + (N-R)/(N(N-1)) * H_N, slightly above prevalence.
    let (nf, rf) = (n as f64, positives as f64);
    let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    let expected = (rf - 1.0) / (nf - 1.0) + (nf - rf) / (nf * (nf - 1.0)) * harmonic;
    assert!((mean - expected).abs() <= 3.0 * sd / (aps.len() as f64).sqrt(), "mean {mean} expected {expected}");
    assert!((mean - prevalence).abs() < 0.02, "mean {mean} prevalence {prevalence}");
}

#[test]
fn dynamics_jsonl_round_trip() {
    let ds = sequences(&[3, 1, 4, 1, 5, 2], 3);
    let tensor = cross_validate(&ds, 3, &TrainerConfig { epochs: 2, ..Default::default() }).unwrap();
    let mut bytes = Vec::new();
    tensor.write_jsonl(&mut bytes).unwrap();
    let back = DynamicsTensor::read_jsonl(&bytes[..], &ds).unwrap();
    assert_eq!(back, tensor);
    let lines = bytes.iter().filter(|&&b| b == b'\n').count();
    assert_eq!(lines, 3 * 2 * ds.annotation_count());
}
