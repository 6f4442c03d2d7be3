//! Run the active correction loop with a simulated annotator and print what
//! each batch turned up.

use std::error::Error;

use cleanloop::active_loop::{run_loop, LoopConfig, SimulatedAnnotator, StopConfig};
use cleanloop::dataset::{annotation_error_count, error_mask, perturb_labels};
use cleanloop::eval::{iteration_yields, EvaluationReport};
use cleanloop::scoring::{EnsembleConfig, EnsembleScorer};
use cleanloop::synth::{two_clusters, ClusterSpec};
use cleanloop::trainer::TrainerConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let noisy = perturb_labels(&two_clusters(&ClusterSpec { instances: 500, ..Default::default() }, 2, 1 << 14)?, 0.06, 4)?;
    println!("{} errors among {} instances", annotation_error_count(&noisy)?, noisy.len());

    let scorer = EnsembleScorer { folds: 5, trainer: TrainerConfig { epochs: 5, ..Default::default() }, ensemble: EnsembleConfig::default() };
    let config = LoopConfig {
        k: 20,
        stop: StopConfig { max_iterations: 10, budget: Some(120), error_fraction_threshold: Some(0.0) },
        seed: 0,
    };
    let outcome = run_loop(noisy.clone(), &scorer, &config, &mut SimulatedAnnotator)?;

    for y in iteration_yields(&outcome.state.query_log) {
        println!("iteration {:>2}: {:>2} of {} queried were wrong", y.iteration, y.errors_found, y.batch_size);
    }
    println!("stopped: {}", outcome.state.stop_reason.expect("loop ends stopped"));
    println!("remaining errors {}", annotation_error_count(&outcome.state.dataset)?);

    let report = EvaluationReport::from_ranking(
        "active",
        config.seed,
        &outcome.final_ranking,
        &noisy.ids(),
        &error_mask(&noisy)?,
        iteration_yields(&outcome.state.query_log),
    )?;
    println!("AP of the final ranking {:.1}%", 100.0 * report.ap);
    Ok(())
}
