//! Fast point feature histograms: Darboux-frame angle triples between each
//! point and its radius neighbours, binned, then blended with the
//! neighbours' own histograms weighted by inverse distance.

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, FeatureSet};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const BINS: usize = 11;
pub(crate) const DIM: usize = 3 * BINS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorConfig {
    /// Neighbourhood radius (meters).
    pub radius: f64,
    /// Neighbours for normal estimation when the input has no normals.
    pub normal_k: usize,
    /// Points with fewer valid neighbours get no descriptor.
    pub min_neighbors: usize,
}

impl DescriptorConfig {
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            radius: 5.0 * voxel_size,
            normal_k: 20,
            min_neighbors: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::invalid("descriptor.radius", "must be positive"));
        }
        if self.normal_k < 3 {
            return Err(Error::invalid("descriptor.normal_k", "must be >= 3"));
        }
        if self.min_neighbors == 0 {
            return Err(Error::invalid("descriptor.min_neighbors", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

#[derive(Debug, Clone, Default)]
pub struct HistogramDescriptor {
    pub config: DescriptorConfig,
}

impl HistogramDescriptor {
    pub fn new(config: DescriptorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

/// `(f1, f2, f3)` angle features of an oriented point pair, or `None` if the
/// points coincide. `f1 ∈ [-π, π]`, `f2, f3 ∈ [-1, 1]`.
pub(crate) fn pair_features(
    p1: &Point3<f64>,
    n1: &Vector3<f64>,
    p2: &Point3<f64>,
    n2: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    let mut dp = p2 - p1;
    let dist = dp.norm();
    if dist == 0.0 {
        return None;
    }
    let angle1 = n1.dot(&dp) / dist;
    let angle2 = n2.dot(&dp) / dist;
    let (src_n, tgt_n, f3) = if angle1.abs().clamp(0.0, 1.0).acos() > angle2.abs().clamp(0.0, 1.0).acos() {
        dp = -dp;
        (n2, n1, -angle2)
    } else {
        (n1, n2, angle1)
    };
    let v = dp.cross(src_n);
    let v_norm = v.norm();
    if v_norm == 0.0 {
        return Some((0.0, 0.0, f3));
    }
    let v = v / v_norm;
    let w = src_n.cross(&v);
    let f2 = v.dot(tgt_n);
    let f1 = w.dot(tgt_n).atan2(src_n.dot(tgt_n));
    Some((f1, f2, f3))
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = ((value - lo) / (hi - lo) * BINS as f64).floor();
    (b.max(0.0) as usize).min(BINS - 1)
}

impl FeatureExtractor for HistogramDescriptor {
    fn name(&self) -> &'static str {
        "classical-descriptor"
    }

    fn extract(&self, cloud: &PointCloud) -> Result<FeatureSet> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let owned;
        let cloud = if cloud.has_normals() {
            cloud
        } else {
            owned = cloud.estimate_normals(self.config.normal_k)?;
            &owned
        };
        let pts = cloud.points();
        let normals = cloud.normals().expect("normals present");
        let index = cloud.build_index()?;
        let radius = self.config.radius;

        let neighbourhoods: Vec<Vec<(usize, f64)>> = (0..pts.len())
            .into_par_iter()
            .map(|i| {
                if !cloud.normal_is_valid(i) {
                    return Vec::new();
                }
                let nbs: Vec<(usize, f64)> = index
                    .within_radius(&pts[i], radius)
                    .into_iter()
                    .filter(|n| n.index != i && n.distance_squared > 0.0 && cloud.normal_is_valid(n.index))
                    .map(|n| (n.index, n.distance()))
                    .collect();
                if nbs.len() < self.config.min_neighbors {
                    Vec::new()
                } else {
                    nbs
                }
            })
            .collect();

        let spfh: Vec<Option<[f64; DIM]>> = (0..pts.len())
            .into_par_iter()
            .map(|i| {
                let nbs = &neighbourhoods[i];
                if nbs.is_empty() {
                    return None;
                }
                let mut h = [0.0; DIM];
                let mut count = 0.0;
                for &(j, _) in nbs {
                    if let Some((f1, f2, f3)) = pair_features(&pts[i], &normals[i], &pts[j], &normals[j]) {
                        h[bin(f1, -PI, PI)] += 1.0;
                        h[BINS + bin(f2, -1.0, 1.0)] += 1.0;
                        h[2 * BINS + bin(f3, -1.0, 1.0)] += 1.0;
                        count += 1.0;
                    }
                }
                if count == 0.0 {
                    return None;
                }
                h.iter_mut().for_each(|v| *v /= count);
                Some(h)
            })
            .collect();

        let rows: Vec<(usize, [f64; DIM])> = (0..pts.len())
            .into_par_iter()
            .filter_map(|i| {
                let own = spfh[i]?;
                let mut blend = [0.0; DIM];
                let mut total = 0.0;
                for &(j, d) in &neighbourhoods[i] {
                    if let Some(h) = &spfh[j] {
                        let w = 1.0 / d;
                        blend.iter_mut().zip(h).for_each(|(b, v)| *b += w * v);
                        total += w;
                    }
                }
                let mut out = own;
                if total > 0.0 {
                    out.iter_mut().zip(&blend).for_each(|(o, b)| *o += b / total);
                }
                Some((i, out))
            })
            .collect();

        if rows.len() < 3 {
            return Err(Error::Degenerate(format!(
                "only {} of {} points have a supported descriptor neighbourhood",
                rows.len(),
                pts.len()
            )));
        }
        let indices = rows.iter().map(|(i, _)| *i).collect();
        let data = rows.iter().flat_map(|(_, h)| h.iter().copied()).collect();
        FeatureSet::from_rows(DIM, data, indices)
    }
}
