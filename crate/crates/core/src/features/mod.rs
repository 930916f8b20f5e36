//! Per-point feature extraction behind a common interface.
//!
//! Two extractors are provided: a seeded geometric self/cross-attention stack
//! over the structure embeddings, and a classical local-histogram descriptor
//! that needs no training and is the default for registration.

mod attention;
mod fpfh;

use serde::{Deserialize, Serialize};

pub use attention::{AttentionConfig, SeededAttention};
pub use fpfh::{DescriptorConfig, HistogramDescriptor};

use crate::cloud::PointCloud;
use crate::embedding::GeometricEmbedding;
use crate::error::{Error, Result};

/// Unit-norm feature vectors for a subset of a cloud's points.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
    indices: Vec<usize>,
}

impl FeatureSet {
    /// Normalizes each row to unit length. Rows with zero norm are dropped
    /// together with their index.
    pub fn from_rows(dim: usize, rows: Vec<f64>, indices: Vec<usize>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * indices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} features of dim {dim}",
                rows.len(),
                indices.len()
            )));
        }
        let mut data = Vec::with_capacity(rows.len());
        let mut kept = Vec::with_capacity(indices.len());
        for (row, &idx) in rows.chunks(dim).zip(&indices) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                data.extend(row.iter().map(|v| v / norm));
                kept.push(idx);
            }
        }
        Ok(Self {
            dim,
            data,
            indices: kept,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Index into the source cloud of feature row `row`.
    pub fn point_index(&self, row: usize) -> usize {
        self.indices[row]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Re-targets point indices through `map` (feature row `r` then refers to
    /// `map[point_index(r)]`), e.g. from a subsample back to its parent cloud.
    pub fn remap(mut self, map: &[usize]) -> Result<Self> {
        for i in &mut self.indices {
            *i = *map
                .get(*i)
                .ok_or_else(|| Error::ShapeMismatch(format!("feature index {i} outside remap table")))?;
        }
        Ok(self)
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Features of one cloud in isolation.
    fn extract(&self, cloud: &PointCloud) -> Result<FeatureSet>;

    /// Features of a source/target pair. Extractors that exchange information
    /// between the clouds override this.
    fn extract_pair(&self, source: &PointCloud, target: &PointCloud) -> Result<(FeatureSet, FeatureSet)> {
        Ok((self.extract(source)?, self.extract(target)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    SeededAttention,
    #[default]
    ClassicalDescriptor,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorKind::SeededAttention => "seeded-attention",
            ExtractorKind::ClassicalDescriptor => "classical-descriptor",
        }
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded-attention" => Ok(Self::SeededAttention),
            "classical-descriptor" => Ok(Self::ClassicalDescriptor),
            other => Err(Error::invalid(
                "extractor",
                format!("`{other}` (expected seeded-attention or classical-descriptor)"),
            )),
        }
    }
}

/// Concrete extractor selected by configuration.
#[derive(Debug, Clone)]
pub enum Extractor {
    SeededAttention(SeededAttention),
    ClassicalDescriptor(HistogramDescriptor),
}

impl FeatureExtractor for Extractor {
    fn name(&self) -> &'static str {
        match self {
            Extractor::SeededAttention(e) => e.name(),
            Extractor::ClassicalDescriptor(e) => e.name(),
        }
    }

    fn extract(&self, cloud: &PointCloud) -> Result<FeatureSet> {
        match self {
            Extractor::SeededAttention(e) => e.extract(cloud),
            Extractor::ClassicalDescriptor(e) => e.extract(cloud),
        }
    }

    fn extract_pair(&self, source: &PointCloud, target: &PointCloud) -> Result<(FeatureSet, FeatureSet)> {
        match self {
            Extractor::SeededAttention(e) => e.extract_pair(source, target),
            Extractor::ClassicalDescriptor(e) => e.extract_pair(source, target),
        }
    }
}

/// Single-cloud features. The attention extractor consumes `embedding` when
/// given (it must belong to `cloud`); the descriptor ignores it.
pub fn extract_features(
    cloud: &PointCloud,
    embedding: Option<&GeometricEmbedding>,
    extractor: &Extractor,
) -> Result<FeatureSet> {
    match (extractor, embedding) {
        (Extractor::SeededAttention(e), Some(emb)) => e.features_from_embedding(cloud, emb),
        _ => extractor.extract(cloud),
    }
}
