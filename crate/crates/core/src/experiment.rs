//! End-to-end method runs over several seeds, and the files they produce.
//!
//! Output layout under the run directory:
//!
//! ```text
//! manifest.json        resolved configuration, dataset hash, version, seeds
//! aggregate.json       per-seed APs, mean and population std
//! seed{i}.report.json  EvaluationReport for seed index i
//! seed{i}.scores.csv   final scores of seed i
//! seed{i}.pr.csv       precision-recall curve of seed i
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::active_loop::{run_loop, LoopConfig, SimulatedAnnotator, StopConfig};
use crate::dataset::{error_mask, file_hash, load_dataset, perturb_labels, write_dataset, Dataset, DatasetError};
use crate::eval::{iteration_yields, seed_aggregate, EvaluationReport, SeedAggregate};
use crate::scoring::{BaseScore, CuScorer, EnsembleConfig, EnsembleScorer, ErrorScorer, ScoreVector, SingleRunScorer};
use crate::trainer::TrainerConfig;
use crate::{Error, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cu,
    Dm,
    AumProb,
    AumLogit,
    Ensemble,
    Active,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Cu, Method::Dm, Method::AumProb, Method::AumLogit, Method::Ensemble, Method::Active];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cu => "cu",
            Method::Dm => "dm",
            Method::AumProb => "aum_prob",
            Method::AumLogit => "aum_logit",
            Method::Ensemble => "ensemble",
            Method::Active => "active",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method {s:?} (expected one of cu, dm, aum_prob, aum_logit, ensemble, active)")))
    }
}

/// Everything that determines an experiment's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub folds: usize,
    pub trainer: TrainerConfig,
    pub ensemble: EnsembleConfig,
    pub k: usize,
    pub stop: StopConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            folds: 10,
            trainer: TrainerConfig::default(),
            ensemble: EnsembleConfig::default(),
            k: crate::active_loop::DEFAULT_K,
            stop: StopConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.seeds.is_empty() {
            return Err(Error::Invalid("at least one seed is required".into()));
        }
        if self.folds < 2 && matches!(self.method, Method::Cu | Method::Ensemble | Method::Active) {
            return Err(Error::Invalid("folds must be >= 2".into()));
        }
        if self.k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        self.trainer.validate()?;
        self.ensemble.validate()?;
        self.stop.validate()?;
        Ok(())
    }

    /// The scorer the method runs on each seed.
    pub fn scorer(&self) -> Box<dyn ErrorScorer> {
        let trainer = self.trainer.clone();
        match self.method {
            Method::Cu => Box::new(CuScorer { folds: self.folds, trainer }),
            Method::Dm => Box::new(SingleRunScorer { trainer, base: BaseScore::Dm }),
            Method::AumProb => Box::new(SingleRunScorer { trainer, base: BaseScore::AumProb }),
            Method::AumLogit => Box::new(SingleRunScorer { trainer, base: BaseScore::AumLogit }),
            Method::Ensemble | Method::Active => Box::new(EnsembleScorer { folds: self.folds, trainer, ensemble: self.ensemble }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub report: EvaluationReport,
    /// Scores behind the final ranking (the last round's, for `active`).
    pub scores: ScoreVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub aggregate: SeedAggregate,
    pub runs: Vec<SeedRun>,
}

pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentResult, Error> {
    config.validate()?;
    run_experiment_with(dataset, config, config.scorer().as_ref())
}

/// Like [`run_experiment`] with a caller-supplied scorer.
pub fn run_experiment_with(dataset: &Dataset, config: &ExperimentConfig, scorer: &dyn ErrorScorer) -> Result<ExperimentResult, Error> {
    if config.seeds.is_empty() {
        return Err(Error::Invalid("at least one seed is required".into()));
    }
    let mask = error_mask(dataset)?;
    let ids = dataset.ids();
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (ranking, scores, yields) = if config.method == Method::Active {
            let loop_config = LoopConfig { k: config.k, stop: config.stop.clone(), seed };
            let outcome = run_loop(dataset.clone(), scorer, &loop_config, &mut SimulatedAnnotator)?;
            let scores = outcome.state.last_scores.clone().expect("the loop scores at least once");
            (outcome.final_ranking, scores, iteration_yields(&outcome.state.query_log))
        } else {
            let scores = scorer.score(dataset, seed, None)?;
            (scores.ranked_ids(), scores, Vec::new())
        };
        let report = EvaluationReport::from_ranking(config.method.as_str(), seed, &ranking, &ids, &mask, yields)?;
        runs.push(SeedRun { report, scores });
    }
    let aps: Vec<f64> = runs.iter().map(|r| r.report.ap).collect();
    Ok(ExperimentResult { aggregate: seed_aggregate(&aps)?, runs })
}

/// Reproducibility record written next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub v: u32,
    pub tool_version: String,
    pub dataset_path: String,
    pub dataset_hash: String,
    pub feature_dim: usize,
    pub seed_base: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateFile {
    pub v: u32,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub aps: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub std_kind: String,
}

/// Arguments of the `run` command, with the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArgs {
    pub dataset: PathBuf,
    pub method: Method,
    pub folds: usize,
    pub epochs: usize,
    pub k: usize,
    pub max_iters: usize,
    pub seeds: usize,
    pub seed_base: u64,
    pub no_train_ens: bool,
    pub no_test_ens: bool,
    pub out: PathBuf,
}

impl RunArgs {
    pub fn new(dataset: impl Into<PathBuf>, method: Method, out: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            method,
            folds: 10,
            epochs: TrainerConfig::default().epochs,
            k: crate::active_loop::DEFAULT_K,
            max_iters: crate::active_loop::DEFAULT_MAX_ITERATIONS,
            seeds: 3,
            seed_base: 0,
            no_train_ens: false,
            no_test_ens: false,
            out: out.into(),
        }
    }

    pub fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            method: self.method,
            folds: self.folds,
            trainer: TrainerConfig { epochs: self.epochs, ..Default::default() },
            ensemble: EnsembleConfig {
                use_train_ensembling: !self.no_train_ens,
                use_test_ensembling: !self.no_test_ens,
                ..Default::default()
            },
            k: self.k,
            stop: StopConfig { max_iterations: self.max_iters, ..Default::default() },
            seeds: (0..self.seeds as u64).map(|i| self.seed_base + i).collect(),
        }
    }
}

/// Perturbs `input` and writes the result, with gold labels, to `output`.
pub fn cmd_perturb(input: &Path, rate: f64, seed: u64, output: &Path) -> Result<Dataset, Error> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(DatasetError::BadRate(rate).into());
    }
    let perturbed = perturb_labels(&load_dataset(input)?, rate, seed)?;
    write_dataset(&perturbed, output)?;
    Ok(perturbed)
}

/// Runs an experiment and writes its files under `args.out`. On failure no
/// output file is left behind.
pub fn cmd_run(args: &RunArgs) -> Result<ExperimentResult, Error> {
    let config = args.config();
    config.validate()?;
    let dataset = load_dataset(&args.dataset)?;
    let manifest = RunManifest {
        v: 1,
        tool_version: VERSION.to_string(),
        dataset_path: args.dataset.display().to_string(),
        dataset_hash: file_hash(&args.dataset)?,
        feature_dim: dataset.feature_dim,
        seed_base: args.seed_base,
        config: config.clone(),
    };
    let result = run_experiment(&dataset, &config)?;
    write_run(&args.out, &manifest, &result)?;
    Ok(result)
}

/// Writes all run files; removes whatever it created if any write fails.
pub fn write_run(out: &Path, manifest: &RunManifest, result: &ExperimentResult) -> Result<(), Error> {
    let created_dir = !out.exists();
    let mut written: Vec<PathBuf> = Vec::new();
    let outcome = write_run_files(out, manifest, result, &mut written);
    if outcome.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
        if created_dir {
            let _ = fs::remove_dir_all(out);
        }
    }
    outcome
}

fn write_run_files(out: &Path, manifest: &RunManifest, result: &ExperimentResult, written: &mut Vec<PathBuf>) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    let mut put = |name: String, bytes: Vec<u8>| -> Result<(), Error> {
        let path = out.join(name);
        written.push(path.clone());
        fs::write(&path, bytes)?;
        Ok(())
    };
    put("manifest.json".into(), json_bytes(manifest))?;
    let aggregate = AggregateFile {
        v: 1,
        method: manifest.config.method,
        seeds: manifest.config.seeds.clone(),
        aps: result.aggregate.aps.clone(),
        mean: result.aggregate.mean,
        std: result.aggregate.std,
        std_kind: "population".into(),
    };
    put("aggregate.json".into(), json_bytes(&aggregate))?;
    for (i, run) in result.runs.iter().enumerate() {
        put(format!("seed{i}.report.json"), json_bytes(&run.report))?;
        let mut scores = Vec::new();
        run.scores.write_csv(&mut scores).map_err(|e| Error::Invalid(e.to_string()))?;
        put(format!("seed{i}.scores.csv"), scores)?;
        let mut pr = Vec::new();
        run.report.write_pr_csv(&mut pr).map_err(|e| Error::Invalid(e.to_string()))?;
        put(format!("seed{i}.pr.csv"), pr)?;
    }
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("plain data serializes");
    bytes.push(b'\n');
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreMethod;
    use crate::synth::{two_clusters, ClusterSpec};
    use crate::trainer::Progress;

    struct Perfect;

    impl ErrorScorer for Perfect {
        fn method(&self) -> ScoreMethod {
            ScoreMethod::Ensemble
        }

        fn score(&self, dataset: &Dataset, _: u64, _: Option<&Progress>) -> Result<ScoreVector, Error> {
            let mask = error_mask(dataset)?;
            Ok(ScoreVector::new(ScoreMethod::Ensemble, dataset.ids(), mask.iter().map(|&m| f64::from(u8::from(m))).collect())?)
        }
    }

    fn noisy(n: usize) -> Dataset {
        let clean = two_clusters(&ClusterSpec { instances: n, ..Default::default() }, 11, 1 << 12).unwrap();
        perturb_labels(&clean, 0.1, 4).unwrap()
    }

    #[test]
    fn perfect_scorer_gives_perfect_ap() {
        let ds = noisy(80);
        for method in [Method::Ensemble, Method::Active] {
            let config = ExperimentConfig { k: 5, ..ExperimentConfig::new(method) };
            let result = run_experiment_with(&ds, &config, &Perfect).unwrap();
            assert_eq!(result.aggregate.aps, vec![1.0; 3]);
            assert_eq!(result.aggregate.std, 0.0);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("aum".parse::<Method>().unwrap_err().is_validation());
    }

    #[test]
    fn invalid_configs_are_validation_errors() {
        let mut config = ExperimentConfig::new(Method::Ensemble);
        config.ensemble.use_test_ensembling = false;
        config.ensemble.use_train_ensembling = false;
        assert!(config.validate().unwrap_err().is_validation());
        let config = ExperimentConfig { seeds: vec![], ..ExperimentConfig::new(Method::Dm) };
        assert!(config.validate().unwrap_err().is_validation());
    }

    #[test]
    fn missing_gold_is_rejected() {
        let clean = two_clusters(&ClusterSpec { instances: 20, ..Default::default() }, 1, 1 << 10).unwrap();
        let config = ExperimentConfig { folds: 2, ..ExperimentConfig::new(Method::Dm) };
        assert!(run_experiment(&clean, &config).is_err());
    }

    #[test]
    fn baselines_run_end_to_end() {
        let ds = noisy(60);
        for method in Method::ALL {
            let mut config = ExperimentConfig { folds: 3, k: 10, seeds: vec![7], ..ExperimentConfig::new(method) };
            config.trainer.epochs = 3;
            config.stop.max_iterations = 2;
            let result = run_experiment(&ds, &config).unwrap();
            let report = &result.runs[0].report;
            assert_eq!(report.total, 60);
            assert_eq!(report.positives, 6);
            assert_eq!(report.per_iteration_yield.len(), if method == Method::Active { 2 } else { 0 });
        }
    }

    #[test]
    fn run_writes_fixed_file_names() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        write_dataset(&noisy(40), &data).unwrap();
        let mut args = RunArgs::new(&data, Method::Ensemble, dir.path().join("out"));
        args.folds = 2;
        args.epochs = 2;
        args.seeds = 2;
        cmd_run(&args).unwrap();
        let mut names: Vec<String> = fs::read_dir(&args.out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(
            names,
            [
                "aggregate.json",
                "manifest.json",
                "seed0.pr.csv",
                "seed0.report.json",
                "seed0.scores.csv",
                "seed1.pr.csv",
                "seed1.report.json",
                "seed1.scores.csv"
            ]
        );
        let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(args.out.join(n)).unwrap()).collect();
        cmd_run(&args).unwrap();
        let second: Vec<Vec<u8>> = names.iter().map(|n| fs::read(args.out.join(n)).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn failed_run_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        let clean = two_clusters(&ClusterSpec { instances: 20, ..Default::default() }, 1, 1 << 10).unwrap();
        write_dataset(&clean, &data).unwrap();
        let args = RunArgs { folds: 2, epochs: 1, ..RunArgs::new(&data, Method::Dm, dir.path().join("out")) };
        assert!(cmd_run(&args).is_err());
        assert!(!args.out.exists());
    }
}
