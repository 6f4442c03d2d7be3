//! Synthetic datasets with known structure.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, DatasetError, Instance, LabelSpace, TaskKind};

/// Shape of a two-cluster text classification set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub instances: usize,
    /// Words drawn from the instance's class vocabulary.
    pub class_words: usize,
    /// Words drawn from a vocabulary shared by both classes.
    pub noise_words: usize,
    pub class_vocab: usize,
    pub noise_vocab: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self { instances: 2000, class_words: 3, noise_words: 8, class_vocab: 60, noise_vocab: 200 }
    }
}

/// Two linearly separable classes, `neg` and `pos`, alternating so the set
/// is balanced. Labels are clean and no gold is attached.
pub fn two_clusters(spec: &ClusterSpec, seed: u64, dim: usize) -> Result<Dataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = spec.instances.saturating_sub(1).to_string().len().max(4);
    let instances = (0..spec.instances)
        .map(|i| {
            let class = i % 2;
            let mut words: Vec<String> = (0..spec.class_words).map(|_| format!("c{class}w{}", rng.random_range(0..spec.class_vocab))).collect();
            words.extend((0..spec.noise_words).map(|_| format!("n{}", rng.random_range(0..spec.noise_vocab))));
            words.shuffle(&mut rng);
            Instance::classification(format!("s{i:0width$}"), words.join(" "), class, dim)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::with_dim(TaskKind::Classification, LabelSpace::new(["neg", "pos"])?, instances, dim)
}

/// Tag set used by [`tagged_sequences`].
pub const TAGS: [&str; 4] = ["O", "PER", "LOC", "ORG"];

/// Sentences of `length` tokens whose tags follow from the word: each tag
/// owns a vocabulary of `vocab` words. `O` is twice as likely as the others.
pub fn tagged_sequences(sentences: usize, length: usize, vocab: usize, seed: u64, dim: usize) -> Result<Dataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = [0usize, 0, 1, 2, 3];
    let width = sentences.saturating_sub(1).to_string().len().max(4);
    let instances = (0..sentences)
        .map(|i| {
            let tags: Vec<usize> = (0..length).map(|_| *weights.choose(&mut rng).expect("nonempty")).collect();
            let tokens = tags.iter().map(|&t| format!("{}{}", TAGS[t].to_lowercase(), rng.random_range(0..vocab))).collect();
            Instance::sequence(format!("t{i:0width$}"), tokens, tags, dim)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::with_dim(TaskKind::Sequence, LabelSpace::new(TAGS)?, instances, dim)
}
