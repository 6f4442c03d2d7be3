//! Compare the full method against its ablations over three seeds.

use std::error::Error;

use cleanloop::dataset::perturb_labels;
use cleanloop::eval::format_table;
use cleanloop::experiment::{run_experiment, ExperimentConfig, Method};
use cleanloop::synth::{two_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let spec = ClusterSpec { instances: 400, class_words: 2, noise_words: 10, ..Default::default() };
    let noisy = perturb_labels(&two_clusters(&spec, 21, 1 << 14)?, 0.05, 3)?;

    let base = || {
        let mut c = ExperimentConfig::new(Method::Active);
        c.folds = 5;
        c.trainer.epochs = 5;
        c.k = 20;
        c.stop.max_iterations = 5;
        c
    };
    let mut variants = vec![("full".to_string(), base())];
    let mut c = base();
    c.method = Method::Ensemble;
    c.stop.max_iterations = 0;
    variants.push(("w/o active".into(), c));
    let mut c = base();
    c.ensemble.use_test_ensembling = false;
    variants.push(("w/o test ens.".into(), c));
    let mut c = base();
    c.ensemble.use_train_ensembling = false;
    variants.push(("w/o train ens.".into(), c));
    for k in [10, 40] {
        let mut c = base();
        c.k = k;
        variants.push((format!("k={k}"), c));
    }

    let mut rows = Vec::new();
    for (name, config) in variants {
        rows.push((name, run_experiment(&noisy, &config)?.aggregate));
    }
    print!("{}", format_table(&rows));
    Ok(())
}
