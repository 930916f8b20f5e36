//! Point cloud container, density normalization and normal estimation.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::NeighborIndex;
use crate::transform::RigidTransform;

/// Tolerance on `‖n‖ = 1` for stored normals.
pub const NORMAL_TOLERANCE: f64 = 1e-6;

/// Ordered 3D points (meters) with optional per-point unit normals.
///
/// A normal may be flagged invalid (degenerate neighbourhood); invalid normals
/// are still stored as unit vectors but are skipped by plane correspondence
/// search.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
    normal_valid: Vec<bool>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("points", format!("non-finite coordinate at point {i}")));
        }
        Ok(Self {
            points,
            normals: None,
            normal_valid: Vec::new(),
        })
    }

    /// Attaches normals; each must have unit norm within [`NORMAL_TOLERANCE`].
    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let valid = vec![true; normals.len()];
        Self::with_flagged_normals(points, normals, valid)
    }

    pub fn with_flagged_normals(
        points: Vec<Point3<f64>>,
        normals: Vec<Vector3<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if normals.len() != cloud.points.len() || valid.len() != normals.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points, {} normals, {} validity flags",
                cloud.points.len(),
                normals.len(),
                valid.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| !((n.norm() - 1.0).abs() <= NORMAL_TOLERANCE))
        {
            return Err(Error::invalid(
                "normals",
                format!("normal {i} has norm {}", normals[i].norm()),
            ));
        }
        cloud.normals = Some(normals);
        cloud.normal_valid = valid;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// `false` when there are no normals or the normal at `i` is flagged.
    pub fn normal_is_valid(&self, i: usize) -> bool {
        self.normals.is_some() && self.normal_valid[i]
    }

    pub fn valid_normal_count(&self) -> usize {
        self.normal_valid.iter().filter(|v| **v).count()
    }

    pub fn without_normals(&self) -> Self {
        Self {
            points: self.points.clone(),
            normals: None,
            normal_valid: Vec::new(),
        }
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().map(|p| p.coords).sum();
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// Sub-cloud of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            normal_valid: if self.normals.is_some() {
                indices.iter().map(|&i| self.normal_valid[i]).collect()
            } else {
                Vec::new()
            },
        }
    }

    /// Points `p ↦ Rp + t`, normals `n ↦ Rn`.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.transform_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| t.transform_vector(v)).collect()),
            normal_valid: self.normal_valid.clone(),
        }
    }

    pub fn build_index(&self) -> Result<NeighborIndex> {
        NeighborIndex::build(&self.points)
    }

    /// Replaces each occupied voxel of edge `voxel_size` by the centroid of its
    /// points. Output order follows first occupancy in input order; normals
    /// are dropped.
    pub fn voxel_downsample(&self, voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid(
                "voxel_size",
                format!("must be positive and finite, got {voxel_size}"),
            ));
        }
        let mut slots: HashMap<[i64; 3], usize> = HashMap::with_capacity(self.points.len() / 4);
        let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
        for p in &self.points {
            let key = voxel_key(p, voxel_size);
            let slot = *slots.entry(key).or_insert_with(|| {
                sums.push((Vector3::zeros(), 0));
                sums.len() - 1
            });
            sums[slot].0 += p.coords;
            sums[slot].1 += 1;
        }
        let points = sums
            .into_iter()
            .map(|(sum, count)| Point3::from(sum / count as f64))
            .collect();
        Self::new(points)
    }

    /// Normals from the smallest-eigenvalue eigenvector of the covariance of
    /// each point's `k` nearest neighbours (plus itself), oriented toward the
    /// cloud centroid.
    pub fn estimate_normals(&self, k: usize) -> Result<Self> {
        let viewpoint = self.centroid().ok_or(Error::EmptyCloud)?;
        self.estimate_normals_toward(k, &viewpoint)
    }

    pub fn estimate_normals_toward(&self, k: usize, viewpoint: &Point3<f64>) -> Result<Self> {
        if k < 3 {
            return Err(Error::invalid("k", format!("need at least 3 neighbours, got {k}")));
        }
        if self.points.len() < k + 1 {
            return Err(Error::NotEnoughPoints {
                needed: k + 1,
                available: self.points.len(),
            });
        }
        let index = self.build_index()?;
        let estimates: Vec<(Vector3<f64>, bool)> = self
            .points
            .par_iter()
            .map(|p| {
                let neighbours: Vec<Point3<f64>> = index
                    .knn(p, k + 1)
                    .iter()
                    .map(|n| self.points[n.index])
                    .collect();
                let (normal, valid) = fit_plane_normal(&neighbours);
                (orient_toward(normal, p, viewpoint), valid)
            })
            .collect();
        let (normals, valid) = estimates.into_iter().unzip();
        Self::with_flagged_normals(self.points.clone(), normals, valid)
    }
}

fn voxel_key(p: &Point3<f64>, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Plane normal of a neighbourhood and whether it is well defined (the
/// neighbourhood is not collinear or coincident).
pub(crate) fn fit_plane_normal(points: &[Point3<f64>]) -> (Vector3<f64>, bool) {
    let n = points.len() as f64;
    let mean: Vector3<f64> = points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, middle, large) = (order[0], order[1], order[2]);
    let normal = eig.eigenvectors.column(small).normalize();
    let lmax = eig.eigenvalues[large];
    let valid = lmax > 0.0 && eig.eigenvalues[middle] > 1e-10 * lmax && normal.iter().all(|v| v.is_finite());
    if valid {
        (normal, true)
    } else {
        (Vector3::z(), false)
    }
}

fn orient_toward(normal: Vector3<f64>, p: &Point3<f64>, viewpoint: &Point3<f64>) -> Vector3<f64> {
    let to_view = viewpoint - p;
    let d = normal.dot(&to_view);
    if d.abs() > 1e-12 * to_view.norm().max(1e-300) {
        return if d < 0.0 { -normal } else { normal };
    }
    // viewpoint in the tangent plane: canonical sign, first non-zero component positive
    match normal.iter().find(|v| v.abs() > 1e-12) {
        Some(v) if *v < 0.0 => -normal,
        _ => normal,
    }
}
