//! Hashed sparse features for raw text.
//!
//! Classification instances get lowercased word unigrams and bigrams. Sequence
//! instances get, per token, the token itself, its lowercase form and the
//! lowercase forms of its left and right neighbours. Every feature string is
//! hashed with 64-bit FNV-1a and reduced modulo the feature dimension; values
//! are occurrence counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default hashed feature dimension (2^18).
pub const DEFAULT_FEATURE_DIM: usize = 1 << 18;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("feature dimension must be a power of two >= 2, got {0}")]
    BadDimension(usize),
    #[error("cannot featurize empty text")]
    EmptyText,
}

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Index of a feature string in a hashed space of size `dim`.
pub fn feature_index(feature: &str, dim: usize) -> u32 {
    (fnv1a64(feature.as_bytes()) % dim as u64) as u32
}

/// A sparse vector with strictly increasing indices and no zero entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVec {
    entries: Vec<(u32, f64)>,
}

impl SparseVec {
    /// Builds a vector from unordered (index, value) pairs, summing duplicates
    /// and dropping exact zeros.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some((last, acc)) if *last == i => *acc += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn get(&self, index: u32) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_dim(dim: usize) -> Result<(), FeatureError> {
    if dim < 2 || !dim.is_power_of_two() {
        return Err(FeatureError::BadDimension(dim));
    }
    Ok(())
}

fn hashed(features: impl IntoIterator<Item = String>, dim: usize) -> SparseVec {
    SparseVec::from_pairs(features.into_iter().map(|f| (feature_index(&f, dim), 1.0)).collect())
}

/// Unigram and bigram features of whitespace-separated, lowercased words.
pub fn featurize_text(text: &str, dim: usize) -> Result<SparseVec, FeatureError> {
    check_dim(dim)?;
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Err(FeatureError::EmptyText);
    }
    let unigrams = words.iter().map(|w| format!("uni:{w}"));
    let bigrams = words.windows(2).map(|pair| format!("bi:{} {}", pair[0], pair[1]));
    Ok(hashed(unigrams.chain(bigrams), dim))
}

/// One feature vector per token: identity, lowercase form and ±1 neighbours.
pub fn featurize_tokens<S: AsRef<str>>(tokens: &[S], dim: usize) -> Result<Vec<SparseVec>, FeatureError> {
    check_dim(dim)?;
    if tokens.is_empty() {
        return Err(FeatureError::EmptyText);
    }
    let lower: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
    let vectors = tokens
        .iter()
        .enumerate()
        .map(|(i, token)| {
            let prev = if i == 0 { "<s>" } else { lower[i - 1].as_str() };
            let next = lower.get(i + 1).map(String::as_str).unwrap_or("</s>");
            hashed(
                [
                    format!("tok:{}", token.as_ref()),
                    format!("low:{}", lower[i]),
                    format!("prev:{prev}"),
                    format!("next:{next}"),
                ],
                dim,
            )
        })
        .collect();
    Ok(vectors)
}
