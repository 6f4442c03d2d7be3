//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::time::{Duration, Instant};

use cleanloop::active_loop::{run_loop, LoopConfig, SimulatedAnnotator, StopConfig, StopReason};
use cleanloop::dataset::{error_mask, perturb_labels, Correction, Dataset};
use cleanloop::eval::{average_precision, average_precision_of_scores};
use cleanloop::experiment::{run_experiment, write_run, ExperimentConfig, ExperimentResult, Method, RunManifest};
use cleanloop::features::SparseVec;
use cleanloop::scoring::{
    aum_logit, aum_prob, cu, dm, ensemble_scores, ensemble_token_scores, BaseScore, EnsembleConfig, EnsembleScorer, ScoreMethod,
    ScoreVector,
};
use cleanloop::synth::{tagged_sequences, two_clusters, ClusterSpec};
use cleanloop::trainer::{cross_validate_with, train_full_with, Hooks, ProbabilityRow, SoftmaxRegression, TrainerConfig};
use cleanloop::VERSION;
use common::{oracle_ap, oracle_cu, oracle_ensemble, rel_close, Base};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed <= limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

const DIM: usize = 1 << 14;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut compared = 0usize;
    for trial in 0..100 {
        let folds = rng.random_range(2..=4);
        let epochs = rng.random_range(1..=5);
        let tensor = common::random_tensor(&mut rng, 100, folds, epochs);

        // Per-trajectory formulas on every (fold, unit).
        for fold in 0..folds {
            for unit in 0..tensor.layout().unit_count() {
                let traj: Vec<_> = tensor.trajectory(fold, unit).copied().collect();
                let pairs_p: Vec<(f64, f64)> = traj.iter().map(|r| (r.assigned_prob, r.max_other_prob)).collect();
                let pairs_l: Vec<(f64, f64)> = traj.iter().map(|r| (r.assigned_logit, r.max_other_logit)).collect();
                let probs: Vec<f64> = traj.iter().map(|r| r.assigned_prob).collect();
                let cases = [
                    (aum_prob(&pairs_p).unwrap(), common::oracle_base(&tensor, Base::AumProb, fold, unit), "aum_prob"),
                    (aum_logit(&pairs_l).unwrap(), common::oracle_base(&tensor, Base::AumLogit, fold, unit), "aum_logit"),
                    (dm(&probs).unwrap(), common::oracle_base(&tensor, Base::Dm, fold, unit), "dm"),
                ];
                for (got, want, name) in cases {
                    check(rel_close(got, want, 1e-9), format!("trial {trial}: {name} {got} vs {want}"))?;
                    compared += 1;
                }
            }
        }

        let got = cu(&tensor).map_err(|e| e.to_string())?;
        for (i, want) in oracle_cu(&tensor).into_iter().enumerate() {
            check(rel_close(got.scores[i], want, 1e-9), format!("trial {trial}: cu instance {i} {} vs {want}", got.scores[i]))?;
            compared += 1;
        }

        for (base, oracle_base) in [(BaseScore::AumProb, Base::AumProb), (BaseScore::AumLogit, Base::AumLogit), (BaseScore::Dm, Base::Dm)] {
            for (train, test) in [(true, true), (true, false), (false, true)] {
                let config = EnsembleConfig { use_train_ensembling: train, use_test_ensembling: test, base_score: base };
                let got = ensemble_scores(&tensor, &config).map_err(|e| e.to_string())?;
                for (i, want) in oracle_ensemble(&tensor, oracle_base, train, test).into_iter().enumerate() {
                    check(
                        rel_close(got.scores[i], want, 1e-9),
                        format!("trial {trial}: ensemble {base:?} train={train} test={test} instance {i}: {} vs {want}", got.scores[i]),
                    )?;
                    compared += 1;
                }
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{compared} values within rel 1e-9 in {:.2?}", start.elapsed()))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(1..=1000);
        let ids: Vec<String> = (0..n).map(|i| format!("i{:04}", rng.random_range(0..100_000) * 1000 + i)).collect();
        // Coarse scores so ties are common.
        let levels = rng.random_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let prevalence = rng.random_range(0.01..0.9);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(prevalence)).collect();
        if !mask.iter().any(|&m| m) {
            mask[rng.random_range(0..n)] = true;
        }
        let vector = ScoreVector::new(ScoreMethod::Ensemble, ids.clone(), scores.clone()).map_err(|e| e.to_string())?;
        let got = average_precision_of_scores(&vector, &mask).map_err(|e| e.to_string())?;
        let want = oracle_ap(&ids, &scores, &mask);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-12, format!("trial {trial}: AP {got} vs brute force {want}"))?;

        let mut perfect: Vec<bool> = mask.clone();
        perfect.sort_by(|a, b| b.cmp(a));
        check(average_precision(&perfect).map_err(|e| e.to_string())? == 1.0, format!("trial {trial}: perfect ranking AP != 1.0"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 vectors, max |diff| {worst:.1e}, perfect rankings exactly 1.0, {:.2?}", start.elapsed()))
}

fn noisy_clusters(n: usize) -> Dataset {
    let clean = two_clusters(&ClusterSpec { instances: n, ..Default::default() }, 2024, DIM).unwrap();
    perturb_labels(&clean, 0.05, 7).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let ds = noisy_clusters(120);
    let scorer = EnsembleScorer { folds: 5, trainer: TrainerConfig::default(), ensemble: EnsembleConfig::default() };
    let config = LoopConfig { k: 50, stop: StopConfig::default(), seed: 1 };
    let outcome = run_loop(ds.clone(), &scorer, &config, &mut SimulatedAnnotator).map_err(|e| e.to_string())?;
    let state = &outcome.state;
    check(state.iteration == 3, format!("{} iterations", state.iteration))?;
    check(state.stop_reason == Some(StopReason::Exhausted), format!("stop reason {:?}", state.stop_reason))?;
    let queried: Vec<&String> = state.query_log.iter().flat_map(|q| &q.queried).collect();
    let unique: HashSet<&String> = queried.iter().copied().collect();
    check(queried.len() == 120 && unique.len() == 120, format!("{} queries, {} distinct", queried.len(), unique.len()))?;
    for inst in state.dataset.instances() {
        check(Some(&inst.observed) == inst.gold.as_ref(), format!("{} differs from gold", inst.id))?;
    }
    check(outcome.final_ranking.iter().zip(&queried).all(|(a, b)| a == *b), "final ranking prefix differs from query order")?;
    let errors = error_mask(&ds).unwrap().iter().filter(|&&m| m).count();
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("3 iterations (50/50/20), {errors} errors fixed, {:.2?}", start.elapsed()))
}

fn experiment(ds: &Dataset, method: Method, adjust: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentResult, String> {
    let mut config = ExperimentConfig::new(method);
    config.folds = 5;
    config.trainer.epochs = 10;
    config.k = 50;
    config.seeds = vec![0, 1, 2];
    adjust(&mut config);
    run_experiment(ds, &config).map_err(|e| format!("{method}: {e}"))
}

/// Bar for "far exceeds prevalence": ten times the 5% error rate.
const FAR_ABOVE_PREVALENCE: f64 = 0.5;

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let ds = noisy_clusters(2000);
    let prevalence = error_mask(&ds).unwrap().iter().filter(|&&m| m).count() as f64 / ds.len() as f64;
    check((prevalence - 0.05).abs() < 1e-12, format!("prevalence {prevalence}"))?;
    let mut means = Vec::new();
    for method in [Method::Ensemble, Method::Active, Method::Cu, Method::Dm, Method::AumProb, Method::AumLogit] {
        let result = experiment(&ds, method, |_| {})?;
        means.push((method, result.aggregate.mean, result.aggregate.std));
    }
    let mean_of = |m: Method| means.iter().find(|x| x.0 == m).unwrap().1;
    let table: Vec<String> = means.iter().map(|(m, mean, std)| format!("{m}={:.1}±{:.1}", mean * 100.0, std * 100.0)).collect();
    let table = table.join(" ");
    check(mean_of(Method::Ensemble) >= 0.90, format!("(a) ensemble AP {:.4} < 0.90 [{table}]", mean_of(Method::Ensemble)))?;
    check(
        mean_of(Method::Active) >= mean_of(Method::Ensemble) - 0.005,
        format!("(b) active {:.4} < non-active {:.4} - 0.005 [{table}]", mean_of(Method::Active), mean_of(Method::Ensemble)),
    )?;
    for (m, mean, _) in &means {
        check(*mean >= FAR_ABOVE_PREVALENCE, format!("(c) {m} AP {mean:.4} below {FAR_ABOVE_PREVALENCE} [{table}]"))?;
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("AP% {table}, {:.1?}", start.elapsed()))
}

fn run_files(ds: &Dataset, method: Method, adjust: impl FnOnce(&mut ExperimentConfig)) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut config = ExperimentConfig::new(method);
    config.folds = 5;
    config.trainer.epochs = 10;
    config.seeds = vec![0, 1, 2];
    adjust(&mut config);
    let result = run_experiment(ds, &config).map_err(|e| e.to_string())?;
    let manifest = RunManifest {
        v: 1,
        tool_version: VERSION.into(),
        dataset_path: "criterion4.jsonl".into(),
        dataset_hash: ds.content_hash(),
        feature_dim: ds.feature_dim,
        seed_base: 0,
        config,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_run(dir.path(), &manifest, &result).map_err(|e| e.to_string())?;
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let ds = noisy_clusters(2000);
    type Adjust = fn(&mut ExperimentConfig);
    let configs: [(&str, Method, Adjust); 6] = [
        ("full", Method::Active, |_| {}),
        ("w/o active", Method::Ensemble, |c| c.stop.max_iterations = 0),
        ("w/o test ens.", Method::Active, |c| c.ensemble.use_test_ensembling = false),
        ("w/o train ens.", Method::Active, |c| c.ensemble.use_train_ensembling = false),
        ("k=100", Method::Active, |c| c.k = 100),
        ("k=200", Method::Active, |c| c.k = 200),
    ];
    let mut reports: Vec<(String, Vec<u8>)> = Vec::new();
    let mut aps = Vec::new();
    for (name, method, adjust) in configs {
        let first = run_files(&ds, method, adjust)?;
        let second = run_files(&ds, method, adjust)?;
        check(first.len() == 11, format!("{name}: {} files", first.len()))?;
        check(first == second, format!("{name}: rerun is not byte-identical"))?;
        // Everything but the manifest, which differs by construction.
        let report: Vec<u8> = first.iter().filter(|(n, _)| n != "manifest.json").flat_map(|(_, b)| b.clone()).collect();
        let aggregate: serde_json::Value =
            serde_json::from_slice(&first.iter().find(|(n, _)| n == "aggregate.json").unwrap().1).map_err(|e| e.to_string())?;
        aps.push(format!("{name}={:.1}", aggregate["mean"].as_f64().unwrap_or(f64::NAN) * 100.0));
        reports.push((name.to_string(), report));
    }
    let distinct: BTreeSet<&Vec<u8>> = reports.iter().map(|(_, r)| r).collect();
    check(distinct.len() == reports.len(), "two configurations produced identical outputs")?;
    Ok(format!("6 configurations distinct and byte-reproducible, AP% {}, {:.1?}", aps.join(" "), start.elapsed()))
}

fn criterion_6() -> Outcome {
    let clean = tagged_sequences(60, 10, 12, 5, DIM).map_err(|e| e.to_string())?;
    let with_gold = {
        let mut instances: Vec<_> = clean.instances().to_vec();
        for inst in &mut instances {
            inst.gold = Some(inst.observed.clone());
        }
        let target = &mut instances[17];
        target.observed[6] = (target.observed[6] + 1) % clean.label_space.len();
        Dataset::with_dim(clean.task_kind, clean.label_space.clone(), instances, DIM).map_err(|e| e.to_string())?
    };
    let mask = error_mask(&with_gold).map_err(|e| e.to_string())?;
    let flagged: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    check(flagged == vec![17], format!("flagged {flagged:?}"))?;
    let gold_fixed = cleanloop::dataset::apply_corrections(
        &with_gold,
        &[Correction { instance_id: with_gold.instances()[17].id.clone(), new_labels: with_gold.instances()[17].gold.clone().unwrap() }],
    )
    .map_err(|e| e.to_string())?
    .0;
    check(!error_mask(&gold_fixed).unwrap().iter().any(|&m| m), "correcting to gold leaves an error")?;

    let tensor = cross_validate_with(&with_gold, 3, &TrainerConfig { epochs: 4, ..Default::default() }, Hooks::default(), false)
        .map_err(|e| e.to_string())?;
    let config = EnsembleConfig::default();
    let tokens = ensemble_token_scores(&tensor, &config).map_err(|e| e.to_string())?;
    let scores = ensemble_scores(&tensor, &config).map_err(|e| e.to_string())?;
    let oracle = oracle_ensemble(&tensor, Base::AumProb, true, true);
    for i in 0..with_gold.len() {
        let units = tensor.layout().units_of(i);
        check(units.len() == 10, format!("instance {i} has {} units", units.len()))?;
        let max = tokens[units].iter().map(|t| t.score).fold(f64::NEG_INFINITY, f64::max);
        check(scores.scores[i] == max, format!("instance {i}: score {} != max token score {max}", scores.scores[i]))?;
        check(rel_close(scores.scores[i], oracle[i], 1e-9), format!("instance {i}: score {} vs oracle {}", scores.scores[i], oracle[i]))?;
    }
    let rank = scores.ranked_ids().iter().position(|id| id == &with_gold.instances()[17].id).unwrap();
    Ok(format!("single-token error flags its sequence; 60 instance scores equal their max token score exactly; injected error ranked #{}", rank + 1))
}

fn criterion_7() -> Outcome {
    let ds = noisy_clusters(200);
    let worst = std::sync::Mutex::new((0.0f64, 0usize));
    let observer = |row: &ProbabilityRow<'_>| {
        let dev = (row.probs.iter().sum::<f64>() - 1.0).abs();
        let mut w = worst.lock().unwrap();
        w.0 = w.0.max(dev);
        w.1 += 1;
    };
    let hooks = Hooks { observer: Some(&observer), progress: None };
    let config = TrainerConfig { epochs: 5, ..Default::default() };
    cross_validate_with(&ds, 4, &config, hooks, true).map_err(|e| e.to_string())?;
    train_full_with(&ds, &config, hooks).map_err(|e| e.to_string())?;
    let (dev, rows) = *worst.lock().unwrap();
    check(rows == 4 * 5 * 200 + 5 * 200, format!("observed {rows} rows"))?;
    check(dev <= 1e-9, format!("softmax sum off by {dev:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    let mut worst_rel = 0.0f64;
    for trial in 0..20 {
        let (features, classes) = (10, 3);
        let weights: Vec<f64> = (0..features * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xs: Vec<SparseVec> = (0..8)
            .map(|_| {
                let mut pairs = Vec::new();
                for f in 0..features as u32 {
                    if rng.random_bool(0.7) {
                        pairs.push((f, rng.random_range(-2.0..2.0)));
                    }
                }
                SparseVec::from_pairs(pairs)
            })
            .collect();
        let ys: Vec<usize> = xs.iter().map(|_| rng.random_range(0..classes)).collect();
        let examples: Vec<(&SparseVec, usize)> = xs.iter().zip(ys.iter().copied()).collect();
        let l2 = 0.01;
        let model = SoftmaxRegression::from_parameters(features, classes, weights.clone(), bias.clone());
        let grad = model.gradient(&examples, l2);
        let h = 1e-5;
        let objective = |w: &[f64], b: &[f64]| SoftmaxRegression::from_parameters(features, classes, w.to_vec(), b.to_vec()).objective(&examples, l2);
        let mut compare = |analytic: f64, numeric: f64, what: String| -> Result<(), String> {
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst_rel = worst_rel.max(rel);
            check(rel <= 1e-4, format!("trial {trial} {what}: analytic {analytic} numeric {numeric}"))
        };
        for i in 0..weights.len() {
            let (mut up, mut down) = (weights.clone(), weights.clone());
            up[i] += h;
            down[i] -= h;
            compare(grad.weights[i], (objective(&up, &bias) - objective(&down, &bias)) / (2.0 * h), format!("weight {i}"))?;
        }
        for k in 0..classes {
            let (mut up, mut down) = (bias.clone(), bias.clone());
            up[k] += h;
            down[k] -= h;
            compare(grad.bias[k], (objective(&weights, &up) - objective(&weights, &down)) / (2.0 * h), format!("bias {k}"))?;
        }
    }
    Ok(format!("{rows} probability rows, max |sum-1| {dev:.1e}; gradient max rel err {worst_rel:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 scorer oracle equivalence", criterion_1),
        ("2 AP oracle equivalence", criterion_2),
        ("3 loop completeness", criterion_3),
        ("4 end-to-end directional check", criterion_4),
        ("5 ablation machinery", criterion_5),
        ("6 sequence protocol", criterion_6),
        ("7 trainer soundness", criterion_7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.starts_with(f.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
