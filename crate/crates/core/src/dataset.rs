//! Datasets of labelled instances, their JSONL file format, label
//! perturbation and correction.
//!
//! Labels are stored as indices into a [`LabelSpace`]. A classification
//! instance carries exactly one label; a sequence instance carries one label
//! per token. Internally both are a `Vec<usize>` of "annotation units" so the
//! trainer and scorers can treat them uniformly.
//!
//! File format (UTF-8 JSONL):
//!
//! ```text
//! {"task_kind":"classification","labels":["pos","neg"]}
//! {"id":"a","text":"great film","label":"pos"}
//! {"id":"b","text":"dull","label":"pos","gold_label":"neg"}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{featurize_text, featurize_tokens, FeatureError, SparseVec, DEFAULT_FEATURE_DIM};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("instance {id:?}: shape mismatch (expected {expected} labels, found {found})")]
    ShapeMismatch { id: String, expected: usize, found: usize },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("gold labels must be present on all instances or on none")]
    MixedGold,
    #[error("dataset has no instances")]
    Empty,
    #[error("unknown instance id {0:?}")]
    UnknownInstance(String),
    #[error("instance {id:?}: label index {index} out of range")]
    LabelOutOfRange { id: String, index: usize },
    #[error("instance {id:?}: {source}")]
    Feature { id: String, source: FeatureError },
    #[error("dataset has no gold labels")]
    MissingGold,
    #[error("dataset already carries gold labels")]
    GoldAlreadyPresent,
    #[error("perturbation rate must lie strictly between 0 and 1, got {0}")]
    BadRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Sequence,
}

/// Ordered, duplicate-free label alphabet. A label's index is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self, DatasetError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(DatasetError::InvalidLabelSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(DatasetError::InvalidLabelSpace(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = DatasetError;
    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        LabelSpace::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels
    }
}

/// Raw input of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    Text(String),
    Tokens(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub content: Content,
    /// One feature vector per annotation unit.
    pub features: Arc<[SparseVec]>,
    pub observed: Vec<usize>,
    pub gold: Option<Vec<usize>>,
    pub corrected: bool,
}

impl Instance {
    pub fn classification(id: impl Into<String>, text: impl Into<String>, label: usize, dim: usize) -> Result<Self, DatasetError> {
        let id = id.into();
        let text = text.into();
        let features = featurize_text(&text, dim).map_err(|source| DatasetError::Feature { id: id.clone(), source })?;
        Ok(Self {
            id,
            content: Content::Text(text),
            features: Arc::from(vec![features]),
            observed: vec![label],
            gold: None,
            corrected: false,
        })
    }

    pub fn sequence(id: impl Into<String>, tokens: Vec<String>, labels: Vec<usize>, dim: usize) -> Result<Self, DatasetError> {
        let id = id.into();
        if tokens.len() != labels.len() {
            return Err(DatasetError::ShapeMismatch { id, expected: tokens.len(), found: labels.len() });
        }
        let features = featurize_tokens(&tokens, dim).map_err(|source| DatasetError::Feature { id: id.clone(), source })?;
        Ok(Self {
            id,
            content: Content::Tokens(tokens),
            features: Arc::from(features),
            observed: labels,
            gold: None,
            corrected: false,
        })
    }

    pub fn with_gold(mut self, gold: Vec<usize>) -> Self {
        self.gold = Some(gold);
        self
    }

    /// Number of annotation units (1 for classification, token count for sequences).
    pub fn unit_count(&self) -> usize {
        self.observed.len()
    }

    /// `Some(true)` when any unit disagrees with gold, `None` without gold.
    pub fn is_error(&self) -> Option<bool> {
        self.gold.as_ref().map(|gold| gold != &self.observed)
    }
}

/// Replacement labels for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub instance_id: String,
    pub new_labels: Vec<usize>,
}

/// Non-fatal findings from [`apply_corrections`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionDiagnostics {
    /// Targets that were already marked corrected before this call.
    pub already_corrected: Vec<String>,
    /// Ids corrected more than once in the same call; the last write wins.
    pub overwritten: Vec<String>,
}

impl CorrectionDiagnostics {
    pub fn is_clean(&self) -> bool {
        self.already_corrected.is_empty() && self.overwritten.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_kind: TaskKind,
    pub label_space: LabelSpace,
    instances: Vec<Instance>,
    /// Seed mixed into every stochastic derivation made from this dataset.
    pub seed: u64,
    pub feature_dim: usize,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(task_kind: TaskKind, label_space: LabelSpace, instances: Vec<Instance>) -> Result<Self, DatasetError> {
        Self::with_dim(task_kind, label_space, instances, DEFAULT_FEATURE_DIM)
    }

    pub fn with_dim(task_kind: TaskKind, label_space: LabelSpace, instances: Vec<Instance>, feature_dim: usize) -> Result<Self, DatasetError> {
        if instances.is_empty() {
            return Err(DatasetError::Empty);
        }
        let mut index = HashMap::with_capacity(instances.len());
        let has_gold = instances[0].gold.is_some();
        for (pos, inst) in instances.iter().enumerate() {
            if index.insert(inst.id.clone(), pos).is_some() {
                return Err(DatasetError::DuplicateId(inst.id.clone()));
            }
            validate_instance(inst, task_kind, &label_space, feature_dim)?;
            if inst.gold.is_some() != has_gold {
                return Err(DatasetError::MixedGold);
            }
        }
        Ok(Self { task_kind, label_space, instances, seed: 0, feature_dim, index })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.position(id).map(|pos| &self.instances[pos])
    }

    pub fn ids(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.id.clone()).collect()
    }

    pub fn has_gold(&self) -> bool {
        self.instances[0].gold.is_some()
    }

    /// Total number of annotation units across all instances.
    pub fn annotation_count(&self) -> usize {
        self.instances.iter().map(Instance::unit_count).sum()
    }

    pub fn corrected_count(&self) -> usize {
        self.instances.iter().filter(|i| i.corrected).count()
    }

    /// Dataset with every observed label replaced by its gold label.
    pub fn gold_view(&self) -> Result<Dataset, DatasetError> {
        let mut out = self.clone();
        for inst in &mut out.instances {
            inst.observed = inst.gold.clone().ok_or(DatasetError::MissingGold)?;
        }
        Ok(out)
    }

    /// Serializes the dataset in the JSONL file format.
    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<(), DatasetError> {
        let header = HeaderOut {
            task_kind: self.task_kind,
            labels: self.label_space.labels(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut writer, &header).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
        let names = |labels: &[usize]| -> Vec<&str> { labels.iter().map(|&l| self.label_space.name(l)).collect() };
        for inst in &self.instances {
            let mut record = RecordOut { id: &inst.id, ..Default::default() };
            match (&inst.content, self.task_kind) {
                (Content::Text(text), _) => {
                    record.text = Some(text);
                    record.label = Some(self.label_space.name(inst.observed[0]));
                    record.gold_label = inst.gold.as_ref().map(|g| self.label_space.name(g[0]));
                }
                (Content::Tokens(tokens), _) => {
                    record.tokens = Some(tokens);
                    record.labels = Some(names(&inst.observed));
                    record.gold_labels = inst.gold.as_ref().map(|g| names(g));
                }
            }
            record.corrected = inst.corrected;
            serde_json::to_writer(&mut writer, &record).map_err(std::io::Error::from)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// SHA-256 of the canonical JSONL serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_jsonl_bytes())
    }

    pub fn from_reader<R: Read>(reader: R, feature_dim: usize) -> Result<Self, DatasetError> {
        let reader = BufReader::new(reader);
        let mut header: Option<HeaderIn> = None;
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match &header {
                None => {
                    let parsed: HeaderIn = serde_json::from_str(&line)
                        .map_err(|e| DatasetError::Parse { line: line_no, message: e.to_string() })?;
                    header = Some(parsed);
                }
                Some(h) => {
                    let record: RecordIn = serde_json::from_str(&line)
                        .map_err(|e| DatasetError::Parse { line: line_no, message: e.to_string() })?;
                    instances.push(record.into_instance(h, line_no, feature_dim)?);
                }
            }
        }
        let header = header.ok_or(DatasetError::Parse { line: 1, message: "missing header line".into() })?;
        let label_space = LabelSpace::new(header.labels)?;
        Ok(Self::with_dim(header.task_kind, label_space, instances, feature_dim)?.with_seed(header.seed))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's raw bytes, hex encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String, DatasetError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn validate_instance(inst: &Instance, kind: TaskKind, space: &LabelSpace, dim: usize) -> Result<(), DatasetError> {
    let units = inst.observed.len();
    let expected_units = match (&inst.content, kind) {
        (Content::Text(_), TaskKind::Classification) => 1,
        (Content::Tokens(tokens), TaskKind::Sequence) => tokens.len(),
        _ => {
            return Err(DatasetError::Invalid {
                line: 0,
                message: format!("instance {:?} does not match task kind {kind:?}", inst.id),
            })
        }
    };
    if expected_units == 0 {
        return Err(DatasetError::ShapeMismatch { id: inst.id.clone(), expected: 1, found: 0 });
    }
    if units != expected_units {
        return Err(DatasetError::ShapeMismatch { id: inst.id.clone(), expected: expected_units, found: units });
    }
    if inst.features.len() != units || inst.features.iter().any(SparseVec::is_empty) {
        return Err(DatasetError::Invalid {
            line: 0,
            message: format!("instance {:?} has missing or empty feature vectors", inst.id),
        });
    }
    if inst.features.iter().flat_map(|f| f.entries()).any(|&(i, _)| i as usize >= dim) {
        return Err(DatasetError::Invalid {
            line: 0,
            message: format!("instance {:?} has feature indices beyond dimension {dim}", inst.id),
        });
    }
    let labels = inst.observed.iter().chain(inst.gold.iter().flatten());
    for &label in labels {
        if label >= space.len() {
            return Err(DatasetError::LabelOutOfRange { id: inst.id.clone(), index: label });
        }
    }
    if let Some(gold) = &inst.gold {
        if gold.len() != units {
            return Err(DatasetError::ShapeMismatch { id: inst.id.clone(), expected: units, found: gold.len() });
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    task_kind: TaskKind,
    labels: &'a [String],
    #[serde(skip_serializing_if = "is_zero")]
    seed: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderIn {
    task_kind: TaskKind,
    labels: Vec<String>,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize, Default)]
struct RecordOut<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<&'a str>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_label: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_labels: Option<Vec<&'a str>>,
    #[serde(skip_serializing_if = "is_false")]
    corrected: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    text: Option<String>,
    tokens: Option<Vec<String>>,
    label: Option<String>,
    labels: Option<Vec<String>>,
    gold_label: Option<String>,
    gold_labels: Option<Vec<String>>,
    #[serde(default)]
    corrected: bool,
}

impl RecordIn {
    fn into_instance(self, header: &HeaderIn, line: usize, dim: usize) -> Result<Instance, DatasetError> {
        let lookup = |label: &str| -> Result<usize, DatasetError> {
            header
                .labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| DatasetError::UnknownLabel { line, label: label.to_string() })
        };
        let invalid = |message: &str| DatasetError::Invalid { line, message: message.to_string() };
        let mut inst = match header.task_kind {
            TaskKind::Classification => {
                if self.tokens.is_some() || self.labels.is_some() || self.gold_labels.is_some() {
                    return Err(invalid("classification records use \"text\", \"label\" and \"gold_label\""));
                }
                let text = self.text.ok_or_else(|| invalid("missing \"text\""))?;
                let label = lookup(&self.label.ok_or_else(|| invalid("missing \"label\""))?)?;
                let gold = self.gold_label.as_deref().map(lookup).transpose()?.map(|g| vec![g]);
                let mut inst = Instance::classification(self.id, text, label, dim)?;
                inst.gold = gold;
                inst
            }
            TaskKind::Sequence => {
                if self.text.is_some() || self.label.is_some() || self.gold_label.is_some() {
                    return Err(invalid("sequence records use \"tokens\", \"labels\" and \"gold_labels\""));
                }
                let tokens = self.tokens.ok_or_else(|| invalid("missing \"tokens\""))?;
                let labels = self.labels.ok_or_else(|| invalid("missing \"labels\""))?;
                if tokens.is_empty() {
                    return Err(invalid("sequence has no tokens"));
                }
                let labels = labels.iter().map(|l| lookup(l)).collect::<Result<Vec<_>, _>>()?;
                let gold = self
                    .gold_labels
                    .map(|g| g.iter().map(|l| lookup(l)).collect::<Result<Vec<_>, _>>())
                    .transpose()?;
                let mut inst = Instance::sequence(self.id, tokens, labels, dim)?;
                if let Some(gold) = &gold {
                    if gold.len() != inst.unit_count() {
                        return Err(DatasetError::ShapeMismatch {
                            id: inst.id,
                            expected: inst.observed.len(),
                            found: gold.len(),
                        });
                    }
                }
                inst.gold = gold;
                inst
            }
        };
        inst.corrected = self.corrected;
        Ok(inst)
    }
}

/// Loads and validates a JSONL dataset with the default feature dimension.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    load_dataset_with_dim(path, DEFAULT_FEATURE_DIM)
}

pub fn load_dataset_with_dim(path: impl AsRef<Path>, feature_dim: usize) -> Result<Dataset, DatasetError> {
    Dataset::from_reader(File::open(path)?, feature_dim)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    dataset.write_jsonl(&mut file)?;
    file.flush()?;
    Ok(())
}

/// Snapshots the observed labels as gold, then resamples exactly
/// `round(rate * annotations)` distinct annotation units to a different label
/// drawn uniformly from the rest of the label space.
pub fn perturb_labels(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset, DatasetError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(DatasetError::BadRate(rate));
    }
    if dataset.has_gold() {
        return Err(DatasetError::GoldAlreadyPresent);
    }
    let mut out = dataset.clone();
    for inst in &mut out.instances {
        inst.gold = Some(inst.observed.clone());
    }
    // (instance, unit) for every annotation, in dataset order.
    let units: Vec<(usize, usize)> = out
        .instances
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| (0..inst.unit_count()).map(move |u| (i, u)))
        .collect();
    let count = (rate * units.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, units.len(), count).into_vec();
    chosen.sort_unstable();
    let label_count = out.label_space.len();
    for pos in chosen {
        let (i, u) = units[pos];
        let current = out.instances[i].observed[u];
        let mut draw = rng.random_range(0..label_count - 1);
        if draw >= current {
            draw += 1;
        }
        out.instances[i].observed[u] = draw;
    }
    Ok(out)
}

/// Applies label corrections. Validation is all-or-nothing: on error the
/// input is left untouched and nothing is returned.
pub fn apply_corrections(dataset: &Dataset, corrections: &[Correction]) -> Result<(Dataset, CorrectionDiagnostics), DatasetError> {
    for c in corrections {
        let inst = dataset.get(&c.instance_id).ok_or_else(|| DatasetError::UnknownInstance(c.instance_id.clone()))?;
        if c.new_labels.len() != inst.unit_count() {
            return Err(DatasetError::ShapeMismatch {
                id: c.instance_id.clone(),
                expected: inst.unit_count(),
                found: c.new_labels.len(),
            });
        }
        if let Some(&bad) = c.new_labels.iter().find(|&&l| l >= dataset.label_space.len()) {
            return Err(DatasetError::LabelOutOfRange { id: c.instance_id.clone(), index: bad });
        }
    }
    let mut out = dataset.clone();
    let mut diagnostics = CorrectionDiagnostics::default();
    let mut touched = HashSet::new();
    for c in corrections {
        let pos = out.index[&c.instance_id];
        let inst = &mut out.instances[pos];
        if !touched.insert(pos) {
            if !diagnostics.overwritten.contains(&c.instance_id) {
                diagnostics.overwritten.push(c.instance_id.clone());
            }
        } else if inst.corrected {
            diagnostics.already_corrected.push(c.instance_id.clone());
        }
        inst.observed.clone_from(&c.new_labels);
        inst.corrected = true;
    }
    Ok((out, diagnostics))
}

/// Per-instance error flag: an instance is erroneous when any of its units
/// disagrees with gold.
pub fn error_mask(dataset: &Dataset) -> Result<Vec<bool>, DatasetError> {
    dataset
        .instances
        .iter()
        .map(|inst| inst.is_error().ok_or(DatasetError::MissingGold))
        .collect()
}

/// Number of annotation units that disagree with gold.
pub fn annotation_error_count(dataset: &Dataset) -> Result<usize, DatasetError> {
    let mut count = 0;
    for inst in &dataset.instances {
        let gold = inst.gold.as_ref().ok_or(DatasetError::MissingGold)?;
        count += gold.iter().zip(&inst.observed).filter(|(g, o)| g != o).count();
    }
    Ok(count)
}
