//! Drive a session by hand: score, read the batch, answer it, checkpoint,
//! restore and carry on. This is the same state machine the service uses.

use std::error::Error;

use cleanloop::active_loop::{AnnotatorAnswer, Answer, AnswerItem, SessionCheckpoint, SessionState, StopConfig};
use cleanloop::dataset::{perturb_labels, sha256_hex};
use cleanloop::scoring::{EnsembleConfig, EnsembleScorer, ErrorScorer};
use cleanloop::synth::{two_clusters, ClusterSpec};
use cleanloop::trainer::TrainerConfig;

fn main() -> Result<(), Box<dyn Error>> {
    let original = perturb_labels(&two_clusters(&ClusterSpec { instances: 200, ..Default::default() }, 8, 1 << 14)?, 0.1, 2)?;
    let scorer = EnsembleScorer { folds: 4, trainer: TrainerConfig { epochs: 4, ..Default::default() }, ensemble: EnsembleConfig::default() };
    let stop = StopConfig { max_iterations: 4, ..Default::default() };
    let mut state = SessionState::new(original.clone(), 10, stop, 0)?;

    let checkpoint_path = std::env::temp_dir().join("cleanloop-session.json");
    while !state.is_stopped() {
        if state.needs_scoring() {
            let scores = scorer.score(&state.dataset, state.seed, None)?;
            state.accept_scores(scores)?;
            continue;
        }
        let batch = state.pending_batch.clone().expect("a batch is open");

        // A "human" who flips any label they disagree with back to gold.
        let items = batch
            .iter()
            .map(|id| {
                let inst = state.dataset.get(id).unwrap();
                let gold = inst.gold.clone().unwrap();
                let answer = if gold == inst.observed { Answer::Confirm } else { Answer::Correct(gold) };
                AnswerItem { id: id.clone(), answer }
            })
            .collect();
        let outcome = state.submit(&AnnotatorAnswer { items })?;
        println!("iteration {}: batch error fraction {:.2}", outcome.iteration, outcome.batch_error_fraction);

        state.checkpoint("in-memory", sha256_hex(&original.to_jsonl_bytes())).save(&checkpoint_path)?;
        let restored = SessionState::restore(&SessionCheckpoint::load(&checkpoint_path)?, original.clone())?;
        assert_eq!(restored.query_log, state.query_log);
        state = restored;
    }
    println!("stopped after {} iterations: {}", state.iteration, state.stop_reason.unwrap());
    println!("{} instances corrected or confirmed", state.corrected_ids.len());
    Ok(())
}
