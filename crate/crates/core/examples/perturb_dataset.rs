//! Build a clean two-class dataset, inject 5% label noise and write both as JSONL.
//!
//!     cargo run -p cleanloop --example perturb_dataset -- /tmp/demo

use std::error::Error;
use std::path::PathBuf;

use cleanloop::dataset::{annotation_error_count, error_mask, load_dataset, perturb_labels, write_dataset};
use cleanloop::synth::{two_clusters, ClusterSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cleanloop-perturb"));
    std::fs::create_dir_all(&dir)?;

    let clean = two_clusters(&ClusterSpec { instances: 400, ..Default::default() }, 11, 1 << 14)?;
    let noisy = perturb_labels(&clean, 0.05, 7)?;

    let (clean_path, noisy_path) = (dir.join("clean.jsonl"), dir.join("noisy.jsonl"));
    write_dataset(&clean, &clean_path)?;
    write_dataset(&noisy, &noisy_path)?;

    let reloaded = load_dataset(&noisy_path)?;
    let errors = annotation_error_count(&reloaded)?;
    println!("{} instances, {} annotation errors", reloaded.len(), errors);

    let mask = error_mask(&reloaded)?;
    for (inst, _) in reloaded.instances().iter().zip(&mask).filter(|(_, &m)| m).take(5) {
        let space = &reloaded.label_space;
        println!("  {}: observed {} gold {}", inst.id, space.name(inst.observed[0]), space.name(inst.gold.as_ref().unwrap()[0]));
    }
    println!("wrote {} and {}", clean_path.display(), noisy_path.display());
    Ok(())
}
