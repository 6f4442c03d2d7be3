//! File-based workflow: perturb a JSONL file, run a method over several seeds
//! and read back the reports the run wrote.

use std::error::Error;

use cleanloop::dataset::write_dataset;
use cleanloop::experiment::{cmd_perturb, cmd_run, AggregateFile, Method, RunArgs};
use cleanloop::synth::{two_clusters, ClusterSpec};
use cleanloop::EvaluationReport;

fn main() -> Result<(), Box<dyn Error>> {
    let dir = std::env::temp_dir().join("cleanloop-evaluate");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;

    let clean = dir.join("clean.jsonl");
    write_dataset(&two_clusters(&ClusterSpec { instances: 300, ..Default::default() }, 1, 1 << 14)?, &clean)?;
    let noisy = dir.join("noisy.jsonl");
    cmd_perturb(&clean, 0.05, 0, &noisy)?;

    let mut args = RunArgs::new(&noisy, Method::Cu, dir.join("cu"));
    args.folds = 5;
    args.epochs = 5;
    cmd_run(&args)?;

    let aggregate: AggregateFile = serde_json::from_slice(&std::fs::read(args.out.join("aggregate.json"))?)?;
    println!("{}: mean AP {:.3} (std {:.3}) over seeds {:?}", aggregate.method, aggregate.mean, aggregate.std, aggregate.seeds);
    let report: EvaluationReport = serde_json::from_slice(&std::fs::read(args.out.join("seed0.report.json"))?)?;
    let first_full_recall = report.pr_curve.iter().position(|&(r, _)| r >= 1.0).map(|i| i + 1);
    println!("seed 0: {} errors among {}, full recall at rank {:?}", report.positives, report.total, first_full_recall);

    let mut files: Vec<_> = std::fs::read_dir(&args.out)?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    files.sort();
    println!("wrote {files:?}");
    Ok(())
}
