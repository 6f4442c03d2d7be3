//! Token-level errors in a tagging dataset: scores are computed per token and
//! the instance score is the worst token.

use std::error::Error;

use cleanloop::dataset::{error_mask, perturb_labels};
use cleanloop::eval::average_precision_of_scores;
use cleanloop::scoring::{ensemble_scores, ensemble_token_scores, EnsembleConfig};
use cleanloop::synth::tagged_sequences;
use cleanloop::trainer::{cross_validate, TrainerConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let clean = tagged_sequences(150, 8, 40, 6, 1 << 14)?;
    let noisy = perturb_labels(&clean, 0.03, 5)?;
    println!("{} sentences, {} tokens, tags {:?}", noisy.len(), noisy.annotation_count(), noisy.label_space.labels());

    let tensor = cross_validate(&noisy, 5, &TrainerConfig { epochs: 5, ..Default::default() })?;
    let config = EnsembleConfig::default();
    let tokens = ensemble_token_scores(&tensor, &config)?;
    let scores = ensemble_scores(&tensor, &config)?;

    let worst = scores.ranking()[0];
    let inst = &noisy.instances()[worst];
    let span = tensor.layout().units_of(worst);
    println!("top suspect {}:", inst.id);
    for (pos, unit) in span.enumerate() {
        let tag = noisy.label_space.name(inst.observed[pos]);
        let gold = noisy.label_space.name(inst.gold.as_ref().unwrap()[pos]);
        let mark = if tag != gold { format!("  (gold {gold})") } else { String::new() };
        println!("  token {pos}: {tag:<4} score {:+.3}{mark}", tokens[unit].score);
    }
    println!("sentence-level AP {:.1}%", 100.0 * average_precision_of_scores(&scores, &error_mask(&noisy)?)?);
    Ok(())
}
