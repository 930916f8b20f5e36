//! Rigid-invariant geometric structure embeddings: sinusoidal encodings of
//! pairwise distances and of triplet angles against each point's nearest
//! neighbours, projected and combined per point pair.

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Frequency base of the sinusoidal channels.
const WAVELENGTH_BASE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    /// Distance sensitivity (meters).
    pub sigma_d: f64,
    /// Angular sensitivity (radians).
    pub sigma_a: f64,
    /// Channels per embedding; even.
    pub dim: usize,
    /// Neighbours per point used for the angular term.
    pub k_angular: usize,
}

impl EmbeddingConfig {
    /// Defaults scaled to a voxel size: `sigma_d = 4 voxels`, `sigma_a = 15°`.
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            sigma_d: 4.0 * voxel_size,
            sigma_a: 15f64.to_radians(),
            dim: 64,
            k_angular: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::invalid("sigma_d", "must be positive"));
        }
        if !(self.sigma_a > 0.0 && self.sigma_a.is_finite()) {
            return Err(Error::invalid("sigma_a", "must be positive"));
        }
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::invalid("dim", format!("must be even and >= 2, got {}", self.dim)));
        }
        if self.k_angular == 0 {
            return Err(Error::invalid("k_angular", "must be >= 1"));
        }
        Ok(())
    }
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

/// Writes `sin/cos(value / base^(2c/dim))` pairs into `out`.
pub fn sinusoidal_channels(value: f64, out: &mut [f64]) {
    let dim = out.len();
    for c in 0..dim / 2 {
        let arg = value / WAVELENGTH_BASE.powf(2.0 * c as f64 / dim as f64);
        let (s, co) = arg.sin_cos();
        out[2 * c] = s;
        out[2 * c + 1] = co;
    }
}

/// Dense `(n, n, dim)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTensor {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PairTensor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.n + j) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest absolute entrywise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.n != other.n || self.dim != other.dim {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())),
        )
    }
}

pub type DistanceEmbedding = PairTensor;
/// Projected, combined per-pair embedding `e_ij`.
pub type GeometricEmbedding = PairTensor;

/// `(n, n, k, dim)` triplet angle encodings. `flagged` counts triplets whose
/// angle was undefined (coincident points) and set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularEmbedding {
    n: usize,
    k: usize,
    dim: usize,
    data: Vec<f64>,
    neighbours: Vec<Vec<usize>>,
    pub flagged: usize,
}

impl AngularEmbedding {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Encoding of angle `∠(p_x − p_i, p_j − p_i)` for the `x`-th neighbour of `i`.
    pub fn get(&self, i: usize, j: usize, x: usize) -> &[f64] {
        let off = ((i * self.n + j) * self.k + x) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Neighbour set used for point `i`.
    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if (self.n, self.k, self.dim) != (other.n, other.k, other.dim) {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())),
        )
    }
}

pub fn pairwise_distance_embedding(cloud: &PointCloud, cfg: &EmbeddingConfig) -> Result<DistanceEmbedding> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let pts = cloud.points();
    let (n, dim) = (pts.len(), cfg.dim);
    let mut data = vec![0.0; n * n * dim];
    data.par_chunks_mut(n * dim).enumerate().for_each(|(i, row)| {
        for (j, out) in row.chunks_mut(dim).enumerate() {
            let d = (pts[i] - pts[j]).norm();
            sinusoidal_channels(d / cfg.sigma_d, out);
        }
    });
    Ok(PairTensor { n, dim, data })
}

/// Angle between `a` and `b` in `[0, π]`, `None` if either is zero.
pub fn vector_angle(a: &nalgebra::Vector3<f64>, b: &nalgebra::Vector3<f64>) -> Option<f64> {
    if a.norm_squared() == 0.0 || b.norm_squared() == 0.0 {
        return None;
    }
    Some(a.cross(b).norm().atan2(a.dot(b)))
}

/// Nearest `k` neighbours of every point, excluding the point itself.
fn neighbour_sets(points: &[Point3<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    let index = crate::index::NeighborIndex::build(points)?;
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .knn(p, k + 1)
                .into_iter()
                .map(|nb| nb.index)
                .filter(|&j| j != i)
                .take(k)
                .collect()
        })
        .collect())
}

pub fn triplet_angular_embedding(cloud: &PointCloud, cfg: &EmbeddingConfig) -> Result<AngularEmbedding> {
    cfg.validate()?;
    let pts = cloud.points();
    let (n, k, dim) = (pts.len(), cfg.k_angular, cfg.dim);
    if n <= k {
        return Err(Error::NotEnoughPoints {
            needed: k + 1,
            available: n,
        });
    }
    let neighbours = neighbour_sets(pts, k)?;
    let mut data = vec![0.0; n * n * k * dim];
    let flagged: usize = data
        .par_chunks_mut(n * k * dim)
        .enumerate()
        .map(|(i, row)| {
            let mut flagged = 0;
            for (j, pair) in row.chunks_mut(k * dim).enumerate() {
                let dj = pts[j] - pts[i];
                for (x, out) in pair.chunks_mut(dim).enumerate() {
                    let dx = pts[neighbours[i][x]] - pts[i];
                    let angle = vector_angle(&dx, &dj).unwrap_or_else(|| {
                        flagged += 1;
                        0.0
                    });
                    sinusoidal_channels(angle / cfg.sigma_a, out);
                }
            }
            flagged
        })
        .sum();
    Ok(AngularEmbedding {
        n,
        k,
        dim,
        data,
        neighbours,
        flagged,
    })
}

/// `e_ij = e^D_ij · W_D + max_x (e^A_ijx · W_A)` with row-vector products
/// and an elementwise max over the neighbour axis.
pub fn geometric_structure_embedding(
    distance: &DistanceEmbedding,
    angular: &AngularEmbedding,
    w_distance: &DMatrix<f64>,
    w_angular: &DMatrix<f64>,
) -> Result<GeometricEmbedding> {
    let (n, dim) = (distance.n, distance.dim);
    if angular.n != n || angular.dim != dim {
        return Err(Error::ShapeMismatch(format!(
            "distance embedding ({n}, {n}, {dim}) vs angular ({}, {}, {}, {})",
            angular.n, angular.n, angular.k, angular.dim
        )));
    }
    for (name, w) in [("W_D", w_distance), ("W_A", w_angular)] {
        if w.nrows() != dim || w.ncols() != dim {
            return Err(Error::ShapeMismatch(format!(
                "{name} is {}x{}, expected {dim}x{dim}",
                w.nrows(),
                w.ncols()
            )));
        }
    }
    let k = angular.k;
    // row-vector times matrix == column-major matrix transposed times vector
    let wd_t = w_distance.transpose();
    let wa_t = w_angular.transpose();
    let mut data = vec![0.0; n * n * dim];
    data.par_chunks_mut(n * dim).enumerate().for_each(|(i, row)| {
        let mut proj = vec![0.0; dim];
        let mut best = vec![0.0; dim];
        for (j, out) in row.chunks_mut(dim).enumerate() {
            matvec(&wd_t, distance.get(i, j), out);
            best.fill(f64::NEG_INFINITY);
            for x in 0..k {
                matvec(&wa_t, angular.get(i, j, x), &mut proj);
                for (b, p) in best.iter_mut().zip(&proj) {
                    *b = b.max(*p);
                }
            }
            for (o, b) in out.iter_mut().zip(&best) {
                *o += b;
            }
        }
    });
    Ok(PairTensor { n, dim, data })
}

fn matvec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    // m is column-major: out = m * v
    out.fill(0.0);
    for (c, &vc) in v.iter().enumerate() {
        if vc == 0.0 {
            continue;
        }
        for (o, &mrc) in out.iter_mut().zip(m.column(c).iter()) {
            *o += mrc * vc;
        }
    }
}

/// Convenience: distance + angular + projection in one call.
pub fn embed_cloud(
    cloud: &PointCloud,
    cfg: &EmbeddingConfig,
    w_distance: &DMatrix<f64>,
    w_angular: &DMatrix<f64>,
) -> Result<GeometricEmbedding> {
    let d = pairwise_distance_embedding(cloud, cfg)?;
    let a = triplet_angular_embedding(cloud, cfg)?;
    geometric_structure_embedding(&d, &a, w_distance, w_angular)
}
