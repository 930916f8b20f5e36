//! Local point-to-plane refinement of key-region patches and global fusion of
//! the per-patch transforms.
//!
//! Each patch point `a` is matched to the target point `b` (with normal `n`)
//! among its nearest candidates that minimizes `|(T(a) − b)·n|`; the patch
//! transform minimizes `Σ ((T(a) − b)·n)²` by Gauss-Newton over a twist
//! applied on the left and pivoting about the patch centroid.

use nalgebra::{Matrix6, Point3, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::index::NeighborIndex;
use crate::keyregion::KeypointSet;
use crate::transform::{fit_rigid, RigidTransform};

/// Target cloud with normals and its index.
#[derive(Debug, Clone)]
pub struct PlaneTarget {
    cloud: PointCloud,
    index: NeighborIndex,
}

impl PlaneTarget {
    pub fn new(cloud: PointCloud) -> Result<Self> {
        if !cloud.has_normals() {
            return Err(Error::invalid("target", "plane target needs normals"));
        }
        let index = cloud.build_index()?;
        Ok(Self { cloud, index })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    fn anchor(&self, j: usize) -> (&Point3<f64>, &Vector3<f64>) {
        (&self.cloud.points()[j], &self.cloud.normals().expect("normals")[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCorrespondence {
    /// Index of the source point within the patch.
    pub source: usize,
    /// Target anchor point index.
    pub anchor: usize,
    pub normal: Vector3<f64>,
}

/// Among the `candidates` nearest target points with valid normals, the one
/// whose tangent plane is closest to `point`. `None` when every candidate
/// normal is invalid.
pub fn find_plane_correspondence(
    point: &Point3<f64>,
    target: &PlaneTarget,
    candidates: usize,
) -> Option<(usize, Vector3<f64>, f64)> {
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for nb in target.index.knn(point, candidates) {
        if !target.cloud.normal_is_valid(nb.index) {
            continue;
        }
        let (b, n) = target.anchor(nb.index);
        let r = (point - b).dot(n);
        if best.is_none_or(|(_, _, br)| r.abs() < br.abs()) {
            best = Some((nb.index, *n, r));
        }
    }
    best
}

/// `r_i = (T(a_i) − b_i)·n_i`.
pub fn point_to_plane_residuals(
    patch: &[Point3<f64>],
    correspondences: &[PlaneCorrespondence],
    target: &PlaneTarget,
    t: &RigidTransform,
) -> Vec<f64> {
    correspondences
        .iter()
        .map(|c| {
            let (b, _) = target.anchor(c.anchor);
            (t.transform_point(&patch[c.source]) - b).dot(&c.normal)
        })
        .collect()
}

/// Left perturbation `Δ(ξ) ∘ T` with `Δ` rotating by `ω = ξ[0..3]` about
/// `pivot` and translating by `v = ξ[3..6]`.
pub fn perturb(t: &RigidTransform, twist: &Vector6<f64>, pivot: &Point3<f64>) -> RigidTransform {
    let omega = twist.fixed_rows::<3>(0).into_owned();
    let v = twist.fixed_rows::<3>(3).into_owned();
    let rot = RigidTransform::from_twist(&omega, &Vector3::zeros());
    let shift = pivot.coords + v - rot.rotation() * pivot.coords;
    RigidTransform::from_twist(&omega, &shift).compose(t)
}

/// Rows `∂r_i/∂ξ` at `ξ = 0` for [`perturb`]: `[((T(a) − c) × n)ᵀ, nᵀ]`.
pub fn residual_jacobian(
    patch: &[Point3<f64>],
    correspondences: &[PlaneCorrespondence],
    t: &RigidTransform,
    pivot: &Point3<f64>,
) -> Vec<Vector6<f64>> {
    correspondences
        .iter()
        .map(|c| {
            let p = t.transform_point(&patch[c.source]);
            let rot = (p - pivot).cross(&c.normal);
            Vector6::new(rot.x, rot.y, rot.z, c.normal.x, c.normal.y, c.normal.z)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSolveConfig {
    pub max_iterations: usize,
    /// Stop once the accepted twist norm falls below this.
    pub twist_tolerance: f64,
    /// Nearest target points examined per source point.
    pub candidates: usize,
    /// Correspondences farther than this from their anchor are dropped (meters).
    pub distance_gate: f64,
    pub min_correspondences: usize,
    /// Smallest/largest eigenvalue ratio of the scale-normalized normal
    /// matrix below which the patch is considered degenerate.
    pub degeneracy_ratio: f64,
    pub max_step_halvings: usize,
}

impl LocalSolveConfig {
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            max_iterations: 50,
            twist_tolerance: 1e-6,
            candidates: 5,
            distance_gate: 3.0 * voxel_size,
            min_correspondences: 6,
            degeneracy_ratio: 1e-3,
            max_step_halvings: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("local.max_iterations", "must be >= 1"));
        }
        if self.candidates == 0 {
            return Err(Error::invalid("local.candidates", "must be >= 1"));
        }
        if !(self.distance_gate > 0.0) {
            return Err(Error::invalid("local.distance_gate", "must be positive"));
        }
        if self.min_correspondences < 6 {
            return Err(Error::invalid("local.min_correspondences", "must be >= 6"));
        }
        if !(self.twist_tolerance > 0.0) || !(self.degeneracy_ratio >= 0.0) {
            return Err(Error::invalid("local", "tolerances must be positive"));
        }
        Ok(())
    }
}

impl Default for LocalSolveConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalStatus {
    Converged,
    /// No step could reduce the objective; treated as converged.
    Stationary,
    /// The correspondence set repeated the one from two iterations earlier,
    /// so the iterates alternate between two fixed solutions; treated as
    /// converged.
    Cycle,
    MaxIterations,
    Degenerate,
    TooFewCorrespondences,
    PatchTooSmall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSolveResult {
    pub patch: usize,
    pub transform: RigidTransform,
    /// RMS point-to-plane residual after the last accepted step (meters);
    /// `None` when the patch was excluded before any step.
    pub rms: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub status: LocalStatus,
    pub correspondences: usize,
    /// `(before, after)` sum of squared residuals of every accepted step,
    /// both on that iteration's correspondence set.
    pub steps: Vec<(f64, f64)>,
}

impl LocalSolveResult {
    pub fn excluded(patch: usize, t_init: RigidTransform, status: LocalStatus) -> Self {
        Self {
            patch,
            transform: t_init,
            rms: None,
            iterations: 0,
            converged: false,
            status,
            correspondences: 0,
            steps: Vec::new(),
        }
    }
}

fn gather(
    patch: &[Point3<f64>],
    target: &PlaneTarget,
    t: &RigidTransform,
    cfg: &LocalSolveConfig,
) -> Vec<PlaneCorrespondence> {
    let gate2 = cfg.distance_gate * cfg.distance_gate;
    patch
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let p = t.transform_point(a);
            let (anchor, normal, _) = find_plane_correspondence(&p, target, cfg.candidates)?;
            let (b, _) = target.anchor(anchor);
            ((p - b).norm_squared() <= gate2).then_some(PlaneCorrespondence {
                source: i,
                anchor,
                normal,
            })
        })
        .collect()
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|r| r * r).sum()
}

/// Gauss-Newton point-to-plane refinement of one patch against `target`,
/// starting from `t_init`.
pub fn local_patch_optimize(
    patch_id: usize,
    patch: &PointCloud,
    target: &PlaneTarget,
    t_init: &RigidTransform,
    cfg: &LocalSolveConfig,
) -> Result<LocalSolveResult> {
    cfg.validate()?;
    let pts = patch.points();
    let mut t = *t_init;
    let mut steps = Vec::new();
    let mut rms = None;
    let mut used = 0;
    let mut status = LocalStatus::MaxIterations;
    let mut iterations = 0;
    let mut history: [Vec<PlaneCorrespondence>; 2] = [Vec::new(), Vec::new()];

    while iterations < cfg.max_iterations {
        iterations += 1;
        let corr = gather(pts, target, &t, cfg);
        used = corr.len();
        if corr.len() < cfg.min_correspondences {
            status = LocalStatus::TooFewCorrespondences;
            break;
        }
        if iterations > 2 && corr == history[0] {
            status = LocalStatus::Cycle;
            break;
        }
        let moved: Vec<Point3<f64>> = corr.iter().map(|c| t.transform_point(&pts[c.source])).collect();
        let pivot = Point3::from(moved.iter().map(|p| p.coords).sum::<Vector3<f64>>() / moved.len() as f64);
        let scale = (moved.iter().map(|p| (p - pivot).norm_squared()).sum::<f64>() / moved.len() as f64)
            .sqrt()
            .max(1e-9);

        let residuals = point_to_plane_residuals(pts, &corr, target, &t);
        let jac = residual_jacobian(pts, &corr, &t, &pivot);
        // rotation columns divided by the patch radius so both blocks are in meters
        let unscale = Vector6::new(1.0 / scale, 1.0 / scale, 1.0 / scale, 1.0, 1.0, 1.0);
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (row, r) in jac.iter().zip(&residuals) {
            let row = row.component_mul(&unscale);
            h += row * row.transpose();
            g += row * *r;
        }
        let eig = SymmetricEigen::new(h);
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        if !(lmax > 0.0) || lmin < cfg.degeneracy_ratio * lmax {
            status = LocalStatus::Degenerate;
            break;
        }
        let Some(step_scaled) = h.cholesky().map(|c| c.solve(&(-g))) else {
            status = LocalStatus::Degenerate;
            break;
        };
        let step = step_scaled.component_mul(&unscale);

        let before = sum_sq(&residuals);
        let mut factor = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_step_halvings {
            let candidate = perturb(&t, &(step * factor), &pivot);
            let after = sum_sq(&point_to_plane_residuals(pts, &corr, target, &candidate));
            if after <= before {
                accepted = Some((candidate, after));
                break;
            }
            factor *= 0.5;
        }
        let Some((next, after)) = accepted else {
            rms = Some((before / corr.len() as f64).sqrt());
            status = LocalStatus::Stationary;
            break;
        };
        t = next;
        steps.push((before, after));
        rms = Some((after / corr.len() as f64).sqrt());
        history.swap(0, 1);
        history[1] = corr;
        if (step * factor).norm() < cfg.twist_tolerance {
            status = LocalStatus::Converged;
            break;
        }
    }

    Ok(LocalSolveResult {
        patch: patch_id,
        transform: t,
        rms,
        iterations,
        converged: matches!(status, LocalStatus::Converged | LocalStatus::Stationary | LocalStatus::Cycle),
        status,
        correspondences: used,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub transform: RigidTransform,
    /// Patches whose keypoints entered the least-squares fit.
    pub used_patches: Vec<usize>,
    /// Fewer than three usable patches or collinear keypoints.
    pub degraded: bool,
}

/// Rigid least squares from keypoints `a_i` to their locally refined images
/// `b_i = T_i(a_i)` over converged patches. Falls back to the best single
/// local transform, or to `fallback` if none converged.
pub fn global_fuse(keys: &KeypointSet, locals: &[LocalSolveResult], fallback: &RigidTransform) -> FusionResult {
    let usable: Vec<&LocalSolveResult> = locals
        .iter()
        .filter(|l| l.converged && l.patch < keys.len())
        .collect();
    let a: Vec<Point3<f64>> = usable.iter().map(|l| keys.points[l.patch]).collect();
    let b: Vec<Point3<f64>> = usable
        .iter()
        .zip(&a)
        .map(|(l, p)| l.transform.transform_point(p))
        .collect();
    if let Ok(transform) = fit_rigid(&a, &b, None) {
        return FusionResult {
            transform,
            used_patches: usable.iter().map(|l| l.patch).collect(),
            degraded: false,
        };
    }
    let best = usable
        .iter()
        .min_by(|x, y| {
            let (rx, ry) = (x.rms.unwrap_or(f64::INFINITY), y.rms.unwrap_or(f64::INFINITY));
            rx.total_cmp(&ry).then(x.patch.cmp(&y.patch))
        });
    match best {
        Some(l) => FusionResult {
            transform: l.transform,
            used_patches: vec![l.patch],
            degraded: true,
        },
        None => FusionResult {
            transform: *fallback,
            used_patches: Vec::new(),
            degraded: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_target(points: &[[f64; 3]], normal: Vector3<f64>) -> PlaneTarget {
        let pts: Vec<_> = points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect();
        let normals = vec![normal; pts.len()];
        PlaneTarget::new(PointCloud::with_normals(pts, normals).unwrap()).unwrap()
    }

    fn grid(n: usize, step: f64) -> Vec<[f64; 3]> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push([i as f64 * step, j as f64 * step, 0.0]);
            }
        }
        v
    }

    #[test]
    fn in_plane_point_has_zero_residual() {
        let target = plane_target(&grid(5, 0.1), Vector3::z());
        let (_, _, r) = find_plane_correspondence(&Point3::new(0.17, 0.22, 0.0), &target, 5).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn height_above_plane_is_residual() {
        let target = plane_target(&grid(5, 0.1), Vector3::z());
        let (_, n, r) = find_plane_correspondence(&Point3::new(0.2, 0.2, 0.037), &target, 5).unwrap();
        assert_eq!(n, Vector3::z());
        assert!((r.abs() - 0.037).abs() < 1e-15);
    }

    #[test]
    fn facing_plane_beats_tangential_one() {
        // nearest candidate has a normal nearly parallel to the offset (large
        // residual); the second lies on a plane containing the query
        let pts = vec![Point3::new(0.1, 0.0, 0.0), Point3::new(0.0, 0.15, 0.0)];
        let normals = vec![Vector3::x(), Vector3::z()];
        let target = PlaneTarget::new(PointCloud::with_normals(pts, normals).unwrap()).unwrap();
        let (j, _, r) = find_plane_correspondence(&Point3::origin(), &target, 5).unwrap();
        assert_eq!(j, 1);
        assert_eq!(r, 0.0);
        let (j1, _, r1) = find_plane_correspondence(&Point3::origin(), &target, 1).unwrap();
        assert_eq!(j1, 0);
        assert!((r1 + 0.1).abs() < 1e-15);
    }

    #[test]
    fn invalid_normals_are_never_matched() {
        let pts = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        let cloud = PointCloud::with_flagged_normals(pts, vec![Vector3::z(); 2], vec![false, false]).unwrap();
        let target = PlaneTarget::new(cloud).unwrap();
        assert!(find_plane_correspondence(&Point3::origin(), &target, 2).is_none());
    }

    #[test]
    fn pure_offset_gives_constant_residuals() {
        let target = plane_target(&grid(6, 0.1), Vector3::z());
        let patch: Vec<_> = grid(4, 0.1).iter().map(|p| Point3::new(p[0] + 0.05, p[1] + 0.05, 0.02)).collect();
        let corr: Vec<PlaneCorrespondence> = patch
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (anchor, normal, _) = find_plane_correspondence(p, &target, 3).unwrap();
                PlaneCorrespondence { source: i, anchor, normal }
            })
            .collect();
        let r = point_to_plane_residuals(&patch, &corr, &target, &RigidTransform::identity());
        assert!(r.iter().all(|v| (v - 0.02).abs() < 1e-15));
    }

    #[test]
    fn single_plane_patch_is_degenerate() {
        let target = plane_target(&grid(20, 0.05), Vector3::z());
        let patch = PointCloud::new(grid(8, 0.05).iter().map(|p| Point3::new(p[0] + 0.2, p[1] + 0.2, 0.0)).collect())
            .unwrap();
        let init = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.01));
        let res = local_patch_optimize(0, &patch, &target, &init, &LocalSolveConfig::default()).unwrap();
        assert_eq!(res.status, LocalStatus::Degenerate);
        assert!(!res.converged);
    }

    #[test]
    fn too_few_correspondences_is_reported() {
        let target = plane_target(&grid(3, 0.05), Vector3::z());
        let patch = PointCloud::new(vec![Point3::new(5.0, 5.0, 5.0); 10]).unwrap();
        let res =
            local_patch_optimize(3, &patch, &target, &RigidTransform::identity(), &LocalSolveConfig::default()).unwrap();
        assert_eq!(res.status, LocalStatus::TooFewCorrespondences);
        assert_eq!(res.patch, 3);
    }

    fn keys(points: &[[f64; 3]]) -> KeypointSet {
        KeypointSet {
            indices: (0..points.len()).collect(),
            points: points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
            covering_radius: 1.0,
        }
    }

    fn local(patch: usize, t: RigidTransform, converged: bool) -> LocalSolveResult {
        LocalSolveResult {
            patch,
            transform: t,
            rms: Some(0.01 * patch as f64),
            iterations: 3,
            converged,
            status: if converged { LocalStatus::Converged } else { LocalStatus::Degenerate },
            correspondences: 100,
            steps: vec![],
        }
    }

    #[test]
    fn identical_locals_fuse_to_themselves() {
        let k = keys(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let t = RigidTransform::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.3, Vector3::new(0.1, -0.2, 0.3));
        let locals: Vec<_> = (0..4).map(|i| local(i, t, true)).collect();
        let f = global_fuse(&k, &locals, &RigidTransform::identity());
        assert!(!f.degraded);
        assert!((f.transform.to_homogeneous() - t.to_homogeneous()).amax() < 1e-12);
    }

    #[test]
    fn fusion_falls_back_when_underdetermined() {
        let k = keys(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let t = RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0));
        // only two converged
        let locals = vec![local(0, t, true), local(1, t, true), local(3, t, false)];
        let f = global_fuse(&k, &locals, &RigidTransform::identity());
        assert!(f.degraded);
        assert_eq!(f.used_patches, vec![0]);
        // collinear keypoints
        let locals = vec![local(0, t, true), local(1, t, true), local(2, t, true)];
        assert!(global_fuse(&k, &locals, &RigidTransform::identity()).degraded);
        // nothing converged
        let fb = RigidTransform::from_translation(Vector3::new(9.0, 0.0, 0.0));
        let f = global_fuse(&k, &[local(0, t, false)], &fb);
        assert_eq!(f.transform, fb);
        assert!(f.used_patches.is_empty());
    }
}
