//! Cross-validate the built-in softmax model, inspect the dynamics tensor and
//! round-trip it through the JSONL export.

use std::error::Error;
use std::io::BufReader;

use cleanloop::dataset::perturb_labels;
use cleanloop::synth::{two_clusters, ClusterSpec};
use cleanloop::trainer::{best_epoch_by_test_loss, cross_validate, DynamicsTensor, TrainerConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let clean = two_clusters(&ClusterSpec { instances: 300, ..Default::default() }, 3, 1 << 14)?;
    let noisy = perturb_labels(&clean, 0.1, 1)?;

    let config = TrainerConfig { epochs: 6, seed: 42, ..Default::default() };
    let tensor = cross_validate(&noisy, 5, &config)?;
    println!("folds {} epochs {} units {}", tensor.fold_count(), tensor.epochs(), tensor.layout().unit_count());
    println!("fold sizes {:?}", tensor.assignment().sizes());

    for fold in 0..tensor.fold_count() {
        let losses: Vec<String> = tensor.test_losses(fold).iter().map(|l| format!("{l:.3}")).collect();
        println!("fold {fold}: test loss [{}], best epoch {}", losses.join(" "), best_epoch_by_test_loss(&tensor, fold));
    }

    let first = &noisy.instances()[0];
    let trajectory: Vec<String> = tensor.trajectory(0, 0).map(|r| format!("{:.3}", r.assigned_prob)).collect();
    println!("{} in fold 0, p(assigned) per epoch: {}", first.id, trajectory.join(" "));

    let path = std::env::temp_dir().join("cleanloop-dynamics.jsonl");
    tensor.write_jsonl(std::fs::File::create(&path)?)?;
    let back = DynamicsTensor::read_jsonl(BufReader::new(std::fs::File::open(&path)?), &noisy)?;
    assert_eq!(back, tensor);
    println!("exported {} snapshots to {}", tensor.snapshots().len(), path.display());
    Ok(())
}
