//! Pipeline configuration, loaded from JSON and validated field by field.
//!
//! Every field has a default, so a config file only needs the values it
//! overrides. Length-valued defaults assume the default 0.05 m voxel; use
//! [`PipelineConfig::for_voxel`] to rescale them together.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::features::{AttentionConfig, DescriptorConfig, Extractor, ExtractorKind, HistogramDescriptor, SeededAttention};
use crate::keyregion::PatchConfig;
use crate::local::LocalSolveConfig;
use crate::matching::{ConsensusConfig, TopKSchedule};

/// Which refinement follows the coarse estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    /// Report the coarse transform.
    CoarseOnly,
    /// One point-to-plane solve of the whole downsampled source.
    GlobalOnly,
    /// Per-key-region solves fused into one transform.
    #[default]
    KeyRegions,
}

impl RefineMode {
    pub const ALL: [RefineMode; 3] = [RefineMode::CoarseOnly, RefineMode::GlobalOnly, RefineMode::KeyRegions];

    pub fn as_str(self) -> &'static str {
        match self {
            RefineMode::CoarseOnly => "coarse-only",
            RefineMode::GlobalOnly => "global-only",
            RefineMode::KeyRegions => "key-regions",
        }
    }
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("mode", format!("`{s}` (expected coarse-only, global-only or key-regions)")))
    }
}

/// Attention parameters that are not shared with the embedding block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionParams {
    pub blocks: usize,
    /// Larger downsampled clouds are reduced to this many points by
    /// farthest point sampling before attention (dense `n²` embeddings).
    pub max_points: usize,
}

impl Default for AttentionParams {
    fn default() -> Self {
        let a = AttentionConfig::default();
        Self {
            blocks: a.blocks,
            max_points: a.max_points,
        }
    }
}

/// Recall thresholds; a pair is recalled when both errors are strictly below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub rotation_deg: f64,
    pub translation_m: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            translation_m: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Voxel edge for density normalization of both clouds (meters).
    pub voxel_size: f64,
    /// Neighbours used for normal estimation.
    pub normal_k: usize,
    pub extractor: ExtractorKind,
    pub embedding: EmbeddingConfig,
    pub attention: AttentionParams,
    pub descriptor: DescriptorConfig,
    pub topk: TopKSchedule,
    pub consensus: ConsensusConfig,
    /// Number of key regions.
    pub keypoints: usize,
    pub patches: PatchConfig,
    pub local: LocalSolveConfig,
    pub thresholds: Thresholds,
    pub mode: RefineMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

fn field(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, message } => {
            let field = match name.strip_prefix(prefix) {
                Some("") => prefix.to_string(),
                Some(rest) => format!("{prefix}{rest}"),
                None => format!("{prefix}.{name}"),
            };
            Error::Config { field, message }
        }
        other => other,
    }
}

impl PipelineConfig {
    /// Defaults with every length parameter scaled to `voxel_size`.
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            normal_k: 20,
            extractor: ExtractorKind::default(),
            embedding: EmbeddingConfig::for_voxel(voxel_size),
            attention: AttentionParams::default(),
            descriptor: DescriptorConfig::for_voxel(voxel_size),
            topk: TopKSchedule::default(),
            consensus: ConsensusConfig::for_voxel(voxel_size),
            keypoints: 8,
            patches: PatchConfig::default(),
            local: LocalSolveConfig::for_voxel(voxel_size),
            thresholds: Thresholds::default(),
            mode: RefineMode::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            // serde names unknown/mistyped fields in its message
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .unwrap_or("<root>")
                .to_string();
            Error::Config { field, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Config {
            field: field.into(),
            message: message.into(),
        };
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(bad("voxel_size", "must be positive"));
        }
        if self.normal_k < 3 {
            return Err(bad("normal_k", "must be >= 3"));
        }
        if self.keypoints == 0 {
            return Err(bad("keypoints", "must be >= 1"));
        }
        if self.attention.blocks == 0 {
            return Err(bad("attention.blocks", "must be >= 1"));
        }
        if self.attention.max_points <= self.embedding.k_angular {
            return Err(bad("attention.max_points", "must exceed embedding.k_angular"));
        }
        if self.topk.k1_max > self.topk.k2_max {
            return Err(bad("topk", "k1_max must not exceed k2_max"));
        }
        let t = &self.thresholds;
        if !(t.rotation_deg > 0.0 && t.rotation_deg <= 180.0) {
            return Err(bad("thresholds.rotation_deg", "must be in (0, 180]"));
        }
        if !(t.translation_m > 0.0) {
            return Err(bad("thresholds.translation_m", "must be positive"));
        }
        self.embedding.validate().map_err(|e| field("embedding", e))?;
        self.descriptor.validate().map_err(|e| field("descriptor", e))?;
        self.consensus.validate().map_err(|e| field("consensus", e))?;
        self.patches.validate().map_err(|e| field("patches", e))?;
        self.local.validate().map_err(|e| field("local", e))?;
        Ok(())
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            embedding: self.embedding,
            seed: self.seed,
            blocks: self.attention.blocks,
            max_points: self.attention.max_points,
        }
    }

    pub fn build_extractor(&self) -> Result<Extractor> {
        Ok(match self.extractor {
            ExtractorKind::SeededAttention => Extractor::SeededAttention(SeededAttention::new(self.attention_config())?),
            ExtractorKind::ClassicalDescriptor => Extractor::ClassicalDescriptor(HistogramDescriptor::new(self.descriptor)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.keypoints, 8);
        assert_eq!(cfg.patches.radius_factor, 1.5);
        assert_eq!(cfg.voxel_size, 0.05);
        assert_eq!(cfg.thresholds.rotation_deg, 15.0);
        assert_eq!(cfg.thresholds.translation_m, 0.3);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "local": {"max_iterations": 20}}"#)
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.local.max_iterations, 20);
        assert_eq!(cfg.keypoints, 8);
    }

    #[test]
    fn errors_name_the_field() {
        match PipelineConfig::from_json(r#"{"voxel": 0.1}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "voxel"),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::from_json(r#"{"voxel_size": -1}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "voxel_size"),
            other => panic!("{other:?}"),
        }
        let mut cfg = PipelineConfig::default();
        cfg.embedding.dim = 7;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("embedding."), "{field}"),
            other => panic!("{other:?}"),
        }
        cfg = PipelineConfig::default();
        cfg.consensus.edge_ratio = 2.0;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "consensus.edge_ratio"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn modes_parse() {
        for m in RefineMode::ALL {
            assert_eq!(m.as_str().parse::<RefineMode>().unwrap(), m);
        }
        assert!("regions".parse::<RefineMode>().is_err());
    }
}
