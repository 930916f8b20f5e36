//! Key region selection: farthest point sampling seeded at the centroid and
//! aggregation of neighbouring points into per-keypoint patches.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::index::{squared_distance, NeighborIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    /// Indices into the sampled cloud, in selection order.
    pub indices: Vec<usize>,
    pub points: Vec<Point3<f64>>,
    /// Largest remaining point-to-set distance when sampling stopped.
    pub covering_radius: f64,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Farthest point sampling of `n` points.
///
/// The first pick is the cloud point nearest the centroid; each next pick
/// maximizes the distance to the selected set. Ties go to the lower index.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize) -> Result<KeypointSet> {
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    if n > cloud.len() {
        return Err(Error::NotEnoughPoints {
            needed: n,
            available: cloud.len(),
        });
    }
    let pts = cloud.points();
    let centroid = cloud.centroid().ok_or(Error::EmptyCloud)?;
    let first = argmin(pts.iter().map(|p| squared_distance(p, &centroid)));

    let mut selected = vec![false; pts.len()];
    let mut min_d2 = vec![f64::INFINITY; pts.len()];
    let mut indices = Vec::with_capacity(n);
    let mut next = first;
    loop {
        indices.push(next);
        selected[next] = true;
        let s = pts[next];
        for (i, p) in pts.iter().enumerate() {
            let d2 = squared_distance(p, &s);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        // farthest remaining point; also the covering radius once we stop
        let mut best: Option<(usize, f64)> = None;
        for (i, &d2) in min_d2.iter().enumerate() {
            if !selected[i] && best.is_none_or(|(_, b)| d2 > b) {
                best = Some((i, d2));
            }
        }
        match best {
            Some((i, _)) if indices.len() < n => next = i,
            other => {
                let covering_radius = other.map_or(0.0, |(_, d2)| d2.sqrt());
                return Ok(KeypointSet {
                    points: indices.iter().map(|&i| pts[i]).collect(),
                    indices,
                    covering_radius,
                });
            }
        }
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    /// All points within `covering_radius × radius_factor` of the keypoint.
    #[default]
    Radius,
    /// Nearest points within that radius, capped at `knn_cap`.
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub radius_factor: f64,
    pub mode: PatchMode,
    pub knn_cap: usize,
    /// Patches smaller than this are flagged and skipped by local optimization.
    pub min_points: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            radius_factor: 1.5,
            mode: PatchMode::Radius,
            knn_cap: 512,
            min_points: 10,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_factor > 0.0 && self.radius_factor.is_finite()) {
            return Err(Error::invalid("radius_factor", "must be positive"));
        }
        if self.knn_cap == 0 {
            return Err(Error::invalid("knn_cap", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub keypoint: usize,
    /// Indices into the aggregated cloud, nearest first (the keypoint leads).
    pub indices: Vec<usize>,
    pub cloud: PointCloud,
    /// Set when the patch is below `min_points`.
    pub too_small: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub aggregation_radius: f64,
}

impl PatchSet {
    /// Distinct cloud points covered by at least one patch.
    pub fn coverage(&self, cloud_len: usize) -> usize {
        let mut hit = vec![false; cloud_len];
        for p in &self.patches {
            for &i in &p.indices {
                hit[i] = true;
            }
        }
        hit.into_iter().filter(|h| *h).count()
    }
}

pub fn aggregate_patches(
    cloud: &PointCloud,
    index: &NeighborIndex,
    keys: &KeypointSet,
    config: &PatchConfig,
) -> Result<PatchSet> {
    config.validate()?;
    if index.len() != cloud.len() {
        return Err(Error::ShapeMismatch("index does not belong to cloud".into()));
    }
    let radius = keys.covering_radius * config.radius_factor;
    let patches = keys
        .indices
        .iter()
        .map(|&k| {
            if k >= cloud.len() {
                return Err(Error::invalid("keypoint", format!("index {k} out of range")));
            }
            let mut hits = index.within_radius(&cloud.points()[k], radius);
            if config.mode == PatchMode::Knn {
                hits.truncate(config.knn_cap);
            }
            // the keypoint leads even if coincident points tie with it
            let mut indices: Vec<usize> = std::iter::once(k)
                .chain(hits.into_iter().map(|n| n.index).filter(|&i| i != k))
                .collect();
            if config.mode == PatchMode::Knn {
                indices.truncate(config.knn_cap);
            }
            Ok(Patch {
                keypoint: k,
                cloud: cloud.select(&indices),
                too_small: indices.len() < config.min_points,
                indices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        patches,
        aggregation_radius: radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn square_corners() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let k = farthest_point_sample(&c, 2).unwrap();
        assert_eq!(k.indices, vec![0, 3]);
        assert!((k.covering_radius - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exhaustive_sampling_has_zero_radius() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let k = farthest_point_sample(&c, 3).unwrap();
        assert_eq!(k.covering_radius, 0.0);
        let mut sorted = k.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn too_many_keypoints_is_an_error() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(farthest_point_sample(&c, 2).is_err());
        assert!(farthest_point_sample(&c, 0).is_err());
    }

    #[test]
    fn saturated_radius_takes_whole_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = PointCloud::new((0..50).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect())
            .unwrap();
        let idx = c.build_index().unwrap();
        let mut keys = farthest_point_sample(&c, 1).unwrap();
        keys.covering_radius = 10.0;
        let p = aggregate_patches(&c, &idx, &keys, &PatchConfig::default()).unwrap();
        assert_eq!(p.patches[0].indices.len(), 50);
        assert_eq!(p.patches[0].indices[0], keys.indices[0]);
    }

    #[test]
    fn vanishing_radius_keeps_only_keypoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = PointCloud::new((0..100).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect())
            .unwrap();
        let idx = c.build_index().unwrap();
        let keys = farthest_point_sample(&c, 8).unwrap();
        let cfg = PatchConfig {
            radius_factor: 1e-12,
            ..PatchConfig::default()
        };
        let p = aggregate_patches(&c, &idx, &keys, &cfg).unwrap();
        for (patch, &k) in p.patches.iter().zip(&keys.indices) {
            assert_eq!(patch.indices, vec![k]);
            assert!(patch.too_small);
        }
    }

    #[test]
    fn knn_mode_caps_patch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = PointCloud::new((0..500).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect())
            .unwrap();
        let idx = c.build_index().unwrap();
        let keys = farthest_point_sample(&c, 4).unwrap();
        let cfg = PatchConfig {
            mode: PatchMode::Knn,
            knn_cap: 20,
            ..PatchConfig::default()
        };
        let p = aggregate_patches(&c, &idx, &keys, &cfg).unwrap();
        for patch in &p.patches {
            assert_eq!(patch.indices.len(), 20);
            for &i in &patch.indices {
                assert!((c.points()[i] - c.points()[patch.keypoint]).norm() <= p.aggregation_radius);
            }
        }
    }
}
