//! End-to-end registration: density normalization, feature correlation
//! filtering and coarse pose, then refinement of the source against the
//! filtered target (none, one global solve, or per-key-region solves fused
//! into one transform).

use log::debug;
use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::config::{PipelineConfig, RefineMode};
use crate::error::{Error, Result, Stage};
use crate::features::{Extractor, FeatureExtractor, FeatureSet};
use crate::keyregion::{aggregate_patches, farthest_point_sample};
use crate::local::{global_fuse, local_patch_optimize, LocalSolveResult, LocalStatus, PlaneTarget};
use crate::matching::{coarse_transform, filter_matches, gaussian_correlation, CoarseEstimate, FilteredMatches};
use crate::transform::RigidTransform;

/// Counts and intermediate values recorded along the way.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub input_source_points: usize,
    pub input_target_points: usize,
    /// Sizes after voxel downsampling.
    pub source_points: usize,
    pub target_points: usize,
    pub source_features: usize,
    pub target_features: usize,
    /// Mutual top-k `k` actually used.
    pub top_k: usize,
    /// Whether filtering had to fall back to a larger `k`.
    pub top_k_retried: bool,
    pub correspondences: usize,
    pub filtered_source_points: usize,
    pub filtered_target_points: usize,
    pub coarse_inliers: usize,
    pub hypotheses_scored: usize,
    pub keypoints: Vec<Point3<f64>>,
    pub covering_radius: f64,
    pub aggregation_radius: f64,
    pub patch_sizes: Vec<usize>,
    /// Patches not entering fusion (too small, degenerate, not converged).
    pub excluded_patches: Vec<usize>,
    pub fused_patches: Vec<usize>,
    /// Refinement fell back to a single local transform or the coarse pose.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub mode: RefineMode,
    pub coarse_transform: RigidTransform,
    pub local_results: Vec<LocalSolveResult>,
    pub final_transform: RigidTransform,
    pub diagnostics: Diagnostics,
}

impl RegistrationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Everything up to and including the coarse transform; shared by all
/// refinement modes.
#[derive(Debug, Clone)]
pub struct CoarseStage {
    /// Downsampled source with normals.
    pub source: PointCloud,
    /// Downsampled target with normals.
    pub target: PointCloud,
    pub matches: FilteredMatches,
    pub coarse: CoarseEstimate,
    pub diagnostics: Diagnostics,
}

fn features(source: &PointCloud, target: &PointCloud, cfg: &PipelineConfig) -> Result<(FeatureSet, FeatureSet)> {
    let extractor = cfg.build_extractor()?;
    match &extractor {
        Extractor::SeededAttention(_) => {
            // dense pairwise embeddings: attend over a farthest point subsample
            let reduce = |c: &PointCloud| -> Result<(PointCloud, Vec<usize>)> {
                if c.len() <= cfg.attention.max_points {
                    return Ok((c.clone(), (0..c.len()).collect()));
                }
                let keys = farthest_point_sample(c, cfg.attention.max_points)?;
                Ok((c.select(&keys.indices), keys.indices))
            };
            let (s, smap) = reduce(source)?;
            let (t, tmap) = reduce(target)?;
            let (fs, ft) = extractor.extract_pair(&s, &t)?;
            Ok((fs.remap(&smap)?, ft.remap(&tmap)?))
        }
        Extractor::ClassicalDescriptor(_) => extractor.extract_pair(source, target),
    }
}

/// Downsampling, normals, features, correlation filtering and coarse pose.
pub fn coarse_stage(source: &PointCloud, target: &PointCloud, cfg: &PipelineConfig) -> Result<CoarseStage> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud.at(Stage::Downsample));
    }
    let mut diag = Diagnostics {
        input_source_points: source.len(),
        input_target_points: target.len(),
        ..Diagnostics::default()
    };

    let down = |c: &PointCloud| c.voxel_downsample(cfg.voxel_size).map_err(|e| e.at(Stage::Downsample));
    let (k_hat, l_hat) = (down(source)?, down(target)?);
    let normals = |c: &PointCloud| c.estimate_normals(cfg.normal_k).map_err(|e| e.at(Stage::Normals));
    let (k_hat, l_hat) = (normals(&k_hat)?, normals(&l_hat)?);
    diag.source_points = k_hat.len();
    diag.target_points = l_hat.len();

    let (fs, ft) = features(&k_hat, &l_hat, cfg).map_err(|e| e.at(Stage::Features))?;
    diag.source_features = fs.len();
    diag.target_features = ft.len();

    let s = gaussian_correlation(&fs, &ft).map_err(|e| e.at(Stage::Filtering))?;
    let k = cfg.topk.k_for(fs.len().min(ft.len()));
    let filter = |k| filter_matches(&s, k, &fs, &ft, &k_hat, &l_hat);
    let matches = match filter(k) {
        Ok(m) if m.correspondences.len() >= 3 => m,
        Ok(_) | Err(Error::NoMutualMatches { .. }) => {
            diag.top_k_retried = true;
            debug!("top-{k} filtering too sparse, retrying with k = {}", k + 1);
            filter(k + 1).map_err(|e| e.at(Stage::Filtering))?
        }
        Err(e) => return Err(e.at(Stage::Filtering)),
    };
    diag.top_k = matches.k;
    diag.correspondences = matches.correspondences.len();
    diag.filtered_source_points = matches.filtered_source.len();
    diag.filtered_target_points = matches.filtered_target.len();

    let coarse = coarse_transform(&matches.correspondences, &k_hat, &l_hat, &cfg.consensus, cfg.seed)
        .map_err(|e| e.at(Stage::Coarse))?;
    diag.coarse_inliers = coarse.inliers.len();
    diag.hypotheses_scored = coarse.hypotheses_scored;
    debug!(
        "coarse: {} correspondences (k = {}), {} inliers",
        diag.correspondences, diag.top_k, diag.coarse_inliers
    );

    Ok(CoarseStage {
        source: k_hat,
        target: l_hat,
        matches,
        coarse,
        diagnostics: diag,
    })
}

/// Refinement of a coarse stage under `mode`.
pub fn refine(stage: &CoarseStage, cfg: &PipelineConfig, mode: RefineMode) -> Result<RegistrationResult> {
    let t_c = stage.coarse.transform;
    let mut diag = stage.diagnostics.clone();
    let finish = |local_results, final_transform, diagnostics| RegistrationResult {
        mode,
        coarse_transform: t_c,
        local_results,
        final_transform,
        diagnostics,
    };
    if mode == RefineMode::CoarseOnly {
        return Ok(finish(Vec::new(), t_c, diag));
    }

    let plane_target = PlaneTarget::new(stage.matches.filtered_target.clone()).map_err(|e| e.at(Stage::Local))?;

    if mode == RefineMode::GlobalOnly {
        let res = local_patch_optimize(0, &stage.source, &plane_target, &t_c, &cfg.local)
            .map_err(|e| e.at(Stage::Local))?;
        let (t_f, degraded) = if res.converged { (res.transform, false) } else { (t_c, true) };
        diag.degraded = degraded;
        diag.patch_sizes = vec![stage.source.len()];
        if degraded {
            diag.excluded_patches = vec![0];
        } else {
            diag.fused_patches = vec![0];
        }
        return Ok(finish(vec![res], t_f, diag));
    }

    let n = cfg.keypoints.min(stage.source.len());
    let keys = farthest_point_sample(&stage.source, n).map_err(|e| e.at(Stage::Keypoints))?;
    let index = stage.source.build_index().map_err(|e| e.at(Stage::Keypoints))?;
    let patches = aggregate_patches(&stage.source, &index, &keys, &cfg.patches).map_err(|e| e.at(Stage::Keypoints))?;
    diag.keypoints = keys.points.clone();
    diag.covering_radius = keys.covering_radius;
    diag.aggregation_radius = patches.aggregation_radius;
    diag.patch_sizes = patches.patches.iter().map(|p| p.indices.len()).collect();

    let locals = patches
        .patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.too_small {
                Ok(LocalSolveResult::excluded(i, t_c, LocalStatus::PatchTooSmall))
            } else {
                local_patch_optimize(i, &p.cloud, &plane_target, &t_c, &cfg.local)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at(Stage::Local))?;

    let fused = global_fuse(&keys, &locals, &t_c);
    diag.excluded_patches = locals.iter().filter(|l| !l.converged).map(|l| l.patch).collect();
    diag.fused_patches = fused.used_patches.clone();
    diag.degraded = fused.degraded;
    if !fused.transform.is_valid() {
        return Err(Error::Degenerate("fused transform left SO(3)".into()).at(Stage::Fusion));
    }
    Ok(finish(locals, fused.transform, diag))
}

/// Registers `source` onto `target`: the returned final transform maps
/// source coordinates into the target frame.
pub fn register(source: &PointCloud, target: &PointCloud, cfg: &PipelineConfig) -> Result<RegistrationResult> {
    let stage = coarse_stage(source, target, cfg)?;
    refine(&stage, cfg, cfg.mode)
}
