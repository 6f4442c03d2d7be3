//! Score one noisy dataset with every single-run and cross-validated method and
//! compare the rankings by average precision.

use std::error::Error;

use cleanloop::dataset::{error_mask, perturb_labels};
use cleanloop::eval::average_precision_of_scores;
use cleanloop::scoring::{BaseScore, CuScorer, EnsembleConfig, EnsembleScorer, ErrorScorer, SingleRunScorer};
use cleanloop::synth::{two_clusters, ClusterSpec};
use cleanloop::trainer::TrainerConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let spec = ClusterSpec { instances: 600, class_words: 2, noise_words: 10, ..Default::default() };
    let noisy = perturb_labels(&two_clusters(&spec, 5, 1 << 14)?, 0.05, 9)?;
    let mask = error_mask(&noisy)?;

    let trainer = TrainerConfig { epochs: 5, ..Default::default() };
    let scorers: Vec<Box<dyn ErrorScorer>> = vec![
        Box::new(SingleRunScorer { trainer: trainer.clone(), base: BaseScore::AumProb }),
        Box::new(SingleRunScorer { trainer: trainer.clone(), base: BaseScore::AumLogit }),
        Box::new(SingleRunScorer { trainer: trainer.clone(), base: BaseScore::Dm }),
        Box::new(CuScorer { folds: 5, trainer: trainer.clone() }),
        Box::new(EnsembleScorer { folds: 5, trainer, ensemble: EnsembleConfig::default() }),
    ];

    for scorer in &scorers {
        let scores = scorer.score(&noisy, 0, None)?;
        let ap = average_precision_of_scores(&scores, &mask)?;
        let top: Vec<String> = scores.ranked_ids().into_iter().take(3).collect();
        println!("{:<10} AP {:5.1}%  top {}", scorer.method().as_str(), 100.0 * ap, top.join(","));
    }
    Ok(())
}
