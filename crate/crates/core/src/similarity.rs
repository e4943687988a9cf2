//! Embedding vectors and label-ambiguity resolution.
//!
//! A polysemous class name ("crane") is disambiguated by embedding each
//! candidate meaning phrase and a sample of the class's training images,
//! then picking the phrase whose mean image-text cosine similarity is
//! highest.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::SeedBuilder;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimilarityError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("embedding has no components")]
    EmptyVector,
    #[error("embedding component {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("image embedding set is empty")]
    EmptyImageSet,
    #[error("no meaning candidates supplied")]
    EmptyCandidates,
    #[error("{candidates} candidates but {embeddings} candidate embeddings")]
    CandidateCountMismatch { candidates: usize, embeddings: usize },
    #[error("key not found in embedding store: {0}")]
    KeyNotFound(String),
    #[error("embedding store line {line}: {message}")]
    StoreParse { line: usize, message: String },
}

/// A raw embedding with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SimilarityError> {
        if values.is_empty() {
            return Err(SimilarityError::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite { index });
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalize(&self) -> Result<UnitEmbedding, SimilarityError> {
        normalize(self)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = SimilarityError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// An embedding with unit L2 norm. Only constructed by [`normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding {
    values: Vec<f64>,
}

impl UnitEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &UnitEmbedding) -> Result<f64, SimilarityError> {
        if self.dim() != other.dim() {
            return Err(SimilarityError::DimMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(dot(&self.values, &other.values))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit L2 norm.
///
/// Components are pre-scaled by the largest magnitude so tiny vectors do not
/// underflow when squared.
pub fn normalize(v: &EmbeddingVector) -> Result<UnitEmbedding, SimilarityError> {
    let max_abs = v.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_abs == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let scaled: Vec<f64> = v.values.iter().map(|x| x / max_abs).collect();
    let norm = libm::sqrt(scaled.iter().map(|x| x * x).sum::<f64>());
    if norm == 0.0 || !norm.is_finite() {
        return Err(SimilarityError::ZeroVector);
    }
    Ok(UnitEmbedding {
        values: scaled.into_iter().map(|x| x / norm).collect(),
    })
}

fn summed_similarity(text: &UnitEmbedding, images: &[UnitEmbedding]) -> Result<f64, SimilarityError> {
    if images.is_empty() {
        return Err(SimilarityError::EmptyImageSet);
    }
    let mut total = 0.0;
    for img in images {
        total += img.dot(text)?;
    }
    Ok(total)
}

/// Mean cosine similarity between one text embedding and a set of image
/// embeddings.
pub fn mean_similarity(text: &UnitEmbedding, images: &[UnitEmbedding]) -> Result<f64, SimilarityError> {
    Ok(summed_similarity(text, images)? / images.len() as f64)
}

/// One candidate meaning phrase for a class name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeaningCandidate {
    pub text: String,
    pub index: usize,
}

impl MeaningCandidate {
    /// Builds a candidate list indexed in order.
    pub fn enumerate<I, S>(texts: I) -> Vec<MeaningCandidate>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        texts
            .into_iter()
            .enumerate()
            .map(|(index, t)| MeaningCandidate { text: t.into(), index })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMeaning {
    pub class_id: String,
    pub chosen: MeaningCandidate,
    /// Mean similarity of the chosen candidate.
    pub score: f64,
    /// Mean similarity of every candidate, in candidate order.
    pub all_scores: Vec<f64>,
}

/// Picks the candidate meaning whose text embedding is, on average, most
/// similar to the class's image embeddings. Ties go to the lowest index.
///
/// Candidates are compared on summed similarity, so the decision does not
/// depend on the rounding of the division by the image count.
pub fn resolve_ambiguity(
    class_id: &str,
    candidates: &[MeaningCandidate],
    candidate_embs: &[UnitEmbedding],
    image_embs: &[UnitEmbedding],
) -> Result<ResolvedMeaning, SimilarityError> {
    if candidates.is_empty() {
        return Err(SimilarityError::EmptyCandidates);
    }
    if candidates.len() != candidate_embs.len() {
        return Err(SimilarityError::CandidateCountMismatch {
            candidates: candidates.len(),
            embeddings: candidate_embs.len(),
        });
    }
    if image_embs.is_empty() {
        return Err(SimilarityError::EmptyImageSet);
    }
    let n = image_embs.len() as f64;
    let mut best = 0usize;
    let mut best_sum = f64::NEG_INFINITY;
    let mut all_scores = Vec::with_capacity(candidates.len());
    for (i, emb) in candidate_embs.iter().enumerate() {
        let s = summed_similarity(emb, image_embs)?;
        if s > best_sum {
            best_sum = s;
            best = i;
        }
        all_scores.push(s / n);
    }
    Ok(ResolvedMeaning {
        class_id: class_id.into(),
        chosen: candidates[best].clone(),
        score: all_scores[best],
        all_scores,
    })
}

/// Source of text and image embeddings, keyed by text or image path.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    fn embed(&self, key: &str) -> Result<EmbeddingVector, SimilarityError>;

    fn embed_unit(&self, key: &str) -> Result<UnitEmbedding, SimilarityError> {
        normalize(&self.embed(key)?)
    }
}

/// Deterministic stand-in for a text/image encoder: each key maps to a
/// direction drawn from a standard normal seeded by `(seed, key)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbeddings {
    pub seed: u64,
    pub dim: usize,
}

impl MockEmbeddings {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        MockEmbeddings { seed, dim }
    }
}

impl EmbeddingProvider for MockEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &str) -> Result<EmbeddingVector, SimilarityError> {
        let mut rng = SeedBuilder::new("mock-embedding").u64(self.seed).str(key).rng();
        loop {
            let raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let v = EmbeddingVector::new(raw)?;
            if let Ok(unit) = normalize(&v) {
                return Ok(EmbeddingVector { values: unit.values });
            }
        }
    }
}
