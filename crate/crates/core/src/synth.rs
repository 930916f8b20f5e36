//! Synthetic cross-modality pairs: a base shape is degraded twice with
//! different density, noise, crop and outlier settings, and the second copy
//! is moved by a random rigid transform.
//!
//! All randomness comes from `ChaCha8Rng` seeded explicitly, so every output
//! is a pure function of its inputs and seed.

use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rand::seq::index::sample;
use rayon::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::io::{load_cloud, save_cloud, CloudFormat};
use crate::transform::RigidTransform;

/// Minimum size of a generated or degraded cloud.
pub const MIN_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    PlaneGrid,
    Box,
    Sphere,
    WavySurface,
    CompositeRoom,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::PlaneGrid,
        Shape::Box,
        Shape::Sphere,
        Shape::WavySurface,
        Shape::CompositeRoom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::PlaneGrid => "plane-grid",
            Shape::Box => "box",
            Shape::Sphere => "sphere",
            Shape::WavySurface => "wavy-surface",
            Shape::CompositeRoom => "composite-room",
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("shape", format!("unknown shape `{s}`")))
    }
}

/// Axis-aligned rectangle `origin + u·a + v·b`, `u, v ∈ [0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    origin: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
}

impl Rect {
    fn area(&self) -> f64 {
        self.a.cross(&self.b).norm()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3<f64> {
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        Point3::from(self.origin + self.a * u + self.b * v)
    }
}

/// The five faces of an axis-aligned box other than its bottom.
fn box_faces(min: [f64; 3], size: [f64; 3]) -> Vec<Rect> {
    let o = Vector3::from(min);
    let (x, y, z) = (
        Vector3::new(size[0], 0.0, 0.0),
        Vector3::new(0.0, size[1], 0.0),
        Vector3::new(0.0, 0.0, size[2]),
    );
    vec![
        Rect { origin: o + z, a: x, b: y },
        Rect { origin: o, a: x, b: z },
        Rect { origin: o + y, a: x, b: z },
        Rect { origin: o, a: y, b: z },
        Rect { origin: o + x, a: y, b: z },
    ]
}

/// Floor, two full walls, a low wall and furniture at asymmetric positions:
/// planes in every orientation so that point-to-plane alignment is observable.
fn room_surfaces() -> Vec<Rect> {
    let (w, d, h) = (2.0, 1.6, 1.2);
    let mut s = vec![
        Rect {
            origin: Vector3::zeros(),
            a: Vector3::new(w, 0.0, 0.0),
            b: Vector3::new(0.0, d, 0.0),
        },
        Rect {
            origin: Vector3::zeros(),
            a: Vector3::new(0.0, d, 0.0),
            b: Vector3::new(0.0, 0.0, h),
        },
        Rect {
            origin: Vector3::zeros(),
            a: Vector3::new(w, 0.0, 0.0),
            b: Vector3::new(0.0, 0.0, h),
        },
        Rect {
            origin: Vector3::new(w, 0.0, 0.0),
            a: Vector3::new(0.0, d, 0.0),
            b: Vector3::new(0.0, 0.0, 0.5 * h),
        },
    ];
    s.extend(box_faces([1.1, 0.75, 0.0], [0.6, 0.4, 0.45])); // table block
    s.extend(box_faces([0.05, 0.9, 0.0], [0.3, 0.5, 0.9])); // cabinet
    s.extend(box_faces([0.55, 0.3, 0.0], [0.25, 0.2, 0.2])); // crate
    s.extend(box_faces([1.6, 0.15, 0.0], [0.25, 0.25, 0.6])); // column
    s
}

fn sample_surfaces(surfaces: &[Rect], n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let areas: Vec<f64> = surfaces.iter().map(Rect::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = surfaces.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    chosen = i;
                    break;
                }
                pick -= a;
            }
            surfaces[chosen].sample(rng)
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Deterministic base cloud of `points` points for `(shape, points, seed)`.
pub fn generate_base(shape: Shape, points: usize, seed: u64) -> Result<PointCloud> {
    if points < MIN_POINTS {
        return Err(Error::NotEnoughPoints {
            needed: MIN_POINTS,
            available: points,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Point3<f64>> = match shape {
        Shape::PlaneGrid => {
            // jittered grid on [-1, 1]² at z = 0
            let side = (points as f64).sqrt().ceil() as usize;
            let step = 2.0 / side as f64;
            (0..points)
                .map(|i| {
                    let (r, c) = (i / side, i % side);
                    let (u, v): (f64, f64) = (rng.random(), rng.random());
                    Point3::new(-1.0 + (c as f64 + u) * step, -1.0 + (r as f64 + v) * step, 0.0)
                })
                .collect()
        }
        Shape::Box => sample_surfaces(&box_faces_closed([-0.5, -0.35, -0.2], [1.0, 0.7, 0.4]), points, &mut rng),
        Shape::Sphere => (0..points).map(|_| Point3::from(unit_vector(&mut rng))).collect(),
        Shape::WavySurface => (0..points)
            .map(|_| {
                let (x, y): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                Point3::new(x, y, 0.15 * (3.0 * x).sin() * (2.0 * y).cos() + 0.05 * x)
            })
            .collect(),
        Shape::CompositeRoom => sample_surfaces(&room_surfaces(), points, &mut rng),
    };
    PointCloud::new(pts)
}

fn box_faces_closed(min: [f64; 3], size: [f64; 3]) -> Vec<Rect> {
    let mut faces = box_faces(min, size);
    faces.push(Rect {
        origin: Vector3::from(min),
        a: Vector3::new(size[0], 0.0, 0.0),
        b: Vector3::new(0.0, size[1], 0.0),
    });
    faces
}

/// Simulated sensor characteristics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    /// Fraction of base points kept, in (0, 1].
    pub density_keep_fraction: f64,
    /// Isotropic Gaussian noise per coordinate (meters).
    pub noise_sigma: f64,
    /// Fraction of the kept points surviving the half-space crop, in (0, 1].
    pub overlap_fraction: f64,
    /// Outliers added, as a fraction of the cropped cloud, in [0, 1).
    pub outlier_fraction: f64,
    /// Margin by which the bounding box is grown for outliers (meters).
    pub outlier_scale: f64,
}

impl ModalitySpec {
    pub const IDENTITY: ModalitySpec = ModalitySpec {
        density_keep_fraction: 1.0,
        noise_sigma: 0.0,
        overlap_fraction: 1.0,
        outlier_fraction: 0.0,
        outlier_scale: 0.0,
    };

    /// Sparse, noisier modality of the default corpus (LiDAR-like stand-in).
    pub fn sparse_default() -> Self {
        Self {
            density_keep_fraction: 0.2,
            noise_sigma: 0.01,
            overlap_fraction: 0.7,
            outlier_fraction: 0.05,
            outlier_scale: 0.1,
        }
    }

    /// Dense, cleaner modality of the default corpus (depth-camera-like stand-in).
    pub fn dense_default() -> Self {
        Self {
            density_keep_fraction: 1.0,
            noise_sigma: 0.005,
            overlap_fraction: 0.85,
            outlier_fraction: 0.05,
            outlier_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Config {
            field: field.into(),
            message: message.into(),
        };
        if !(self.density_keep_fraction > 0.0 && self.density_keep_fraction <= 1.0) {
            return Err(bad("density_keep_fraction", "must be in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(bad("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(bad("overlap_fraction", "must be in (0, 1]"));
        }
        if !(self.outlier_fraction >= 0.0 && self.outlier_fraction < 1.0) {
            return Err(bad("outlier_fraction", "must be in [0, 1)"));
        }
        if !(self.outlier_scale >= 0.0 && self.outlier_scale.is_finite()) {
            return Err(bad("outlier_scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Indices of `cloud` kept by the density and crop steps of [`degrade`],
/// in ascending order.
fn surviving_indices(cloud: &PointCloud, spec: &ModalitySpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = cloud.len();
    let keep = ((spec.density_keep_fraction * n as f64).round() as usize).min(n);
    let mut kept: Vec<usize> = if keep == n {
        (0..n).collect()
    } else {
        sample(rng, n, keep).into_vec()
    };
    kept.sort_unstable();
    if spec.overlap_fraction < 1.0 && !kept.is_empty() {
        let dir = unit_vector(rng);
        let mut proj: Vec<(f64, usize)> = kept.iter().map(|&i| (cloud.points()[i].coords.dot(&dir), i)).collect();
        proj.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let m = ((spec.overlap_fraction * kept.len() as f64).round() as usize).min(kept.len());
        kept = proj[..m].iter().map(|&(_, i)| i).collect();
        kept.sort_unstable();
    }
    kept
}

/// Degraded copy of `cloud` together with the base indices that survived
/// (outliers are appended after them and have no base index).
pub fn degrade_with_indices(cloud: &PointCloud, spec: &ModalitySpec, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = surviving_indices(cloud, spec, &mut rng);
    let mut pts: Vec<Point3<f64>> = kept.iter().map(|&i| cloud.points()[i]).collect();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for p in &mut pts {
            *p += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let outliers = (spec.outlier_fraction * pts.len() as f64).round() as usize;
    if outliers > 0 {
        let (lo, hi) = PointCloud::new(pts.clone())?.bounds().ok_or(Error::EmptyCloud)?;
        let margin = Vector3::repeat(spec.outlier_scale);
        let (lo, hi) = (lo.coords - margin, hi.coords + margin);
        for _ in 0..outliers {
            let u = Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            pts.push(Point3::from(lo + (hi - lo).component_mul(&u)));
        }
    }
    if pts.len() < MIN_POINTS {
        return Err(Error::NotEnoughPoints {
            needed: MIN_POINTS,
            available: pts.len(),
        });
    }
    Ok((PointCloud::new(pts)?, kept))
}

/// Keep a seeded subset, crop by a seeded half-space, add Gaussian noise and
/// uniform outliers around the bounding box.
pub fn degrade(cloud: &PointCloud, spec: &ModalitySpec, seed: u64) -> Result<PointCloud> {
    degrade_with_indices(cloud, spec, seed).map(|(c, _)| c)
}

/// Rotation about a uniformly random axis by an angle uniform in
/// `[0, rot_max_deg]`, translation uniform in the ball of radius `trans_max`.
pub fn random_transform(rot_max_deg: f64, trans_max: f64, rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = unit_vector(rng);
    let angle = rng.random::<f64>() * rot_max_deg.to_radians();
    let dir = unit_vector(rng);
    let radius = trans_max * rng.random::<f64>().cbrt();
    RigidTransform::from_axis_angle(&axis, angle, dir * radius)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps source coordinates into the target frame.
    pub ground_truth: RigidTransform,
    pub seed: u64,
    pub source_spec: ModalitySpec,
    pub target_spec: ModalitySpec,
    /// Base indices behind the first points of each cloud (before outliers).
    pub source_base_indices: Vec<usize>,
    pub target_base_indices: Vec<usize>,
    pub base_len: usize,
}

pub fn generate_pair(
    base: &PointCloud,
    source_spec: &ModalitySpec,
    target_spec: &ModalitySpec,
    rot_max_deg: f64,
    trans_max: f64,
    seed: u64,
) -> Result<SyntheticPair> {
    if !(rot_max_deg >= 0.0 && rot_max_deg <= 180.0) {
        return Err(Error::invalid("rot_max", "must be in [0, 180] degrees"));
    }
    if !(trans_max >= 0.0 && trans_max.is_finite()) {
        return Err(Error::invalid("trans_max", "must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (source_seed, target_seed) = (rng.random::<u64>(), rng.random::<u64>());
    let ground_truth = random_transform(rot_max_deg, trans_max, &mut rng);
    let (source, source_base_indices) = degrade_with_indices(base, source_spec, source_seed)?;
    let (target, target_base_indices) = degrade_with_indices(base, target_spec, target_seed)?;
    Ok(SyntheticPair {
        source,
        target: target.transformed(&ground_truth),
        ground_truth,
        seed,
        source_spec: *source_spec,
        target_spec: *target_spec,
        source_base_indices,
        target_base_indices,
        base_len: base.len(),
    })
}

/// Corpus recipe. Modality values are invented desk-scale stand-ins for a
/// sparse/noisy sensor versus a dense/clean one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub seed: u64,
    pub shape: Shape,
    pub base_points: usize,
    pub source: ModalitySpec,
    pub target: ModalitySpec,
    pub rot_max_deg: f64,
    pub trans_max: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            pairs: 50,
            seed: 2024,
            shape: Shape::CompositeRoom,
            base_points: 40_000,
            source: ModalitySpec::sparse_default(),
            target: ModalitySpec::dense_default(),
            rot_max_deg: 45.0,
            trans_max: 0.5,
        }
    }
}

impl CorpusSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .unwrap_or("<root>")
                .to_string();
            Error::Config { field, message }
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let prefixed = |side: &str, e: Error| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("{side}.{field}"),
                message,
            },
            other => other,
        };
        if self.pairs == 0 {
            return Err(Error::Config {
                field: "pairs".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.base_points < MIN_POINTS {
            return Err(Error::Config {
                field: "base_points".into(),
                message: format!("must be >= {MIN_POINTS}"),
            });
        }
        if !(self.rot_max_deg >= 0.0 && self.rot_max_deg <= 180.0) {
            return Err(Error::Config {
                field: "rot_max_deg".into(),
                message: "must be in [0, 180]".into(),
            });
        }
        if !(self.trans_max >= 0.0 && self.trans_max.is_finite()) {
            return Err(Error::Config {
                field: "trans_max".into(),
                message: "must be finite and >= 0".into(),
            });
        }
        self.source.validate().map_err(|e| prefixed("source", e))?;
        self.target.validate().map_err(|e| prefixed("target", e))?;
        Ok(())
    }

    /// Seed of pair `i`; every pair has its own base sample and degradations.
    pub fn pair_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn pair_id(i: usize) -> String {
        format!("pair_{i:03}")
    }

    pub fn generate(&self, i: usize) -> Result<SyntheticPair> {
        let seed = self.pair_seed(i);
        let base = generate_base(self.shape, self.base_points, seed)?;
        generate_pair(&base, &self.source, &self.target, self.rot_max_deg, self.trans_max, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub source: String,
    pub target: String,
    pub ground_truth: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Writes every pair as two PLY files plus `manifest.json` into `dir`.
pub fn write_corpus(spec: &CorpusSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pairs = (0..spec.pairs)
        .map(|i| {
            let pair = spec.generate(i)?;
            let id = CorpusSpec::pair_id(i);
            let (source, target) = (format!("{id}_source.ply"), format!("{id}_target.ply"));
            save_cloud(dir.join(&source), &pair.source, CloudFormat::PlyAscii)?;
            save_cloud(dir.join(&target), &pair.target, CloudFormat::PlyAscii)?;
            Ok(ManifestEntry {
                id,
                seed: pair.seed,
                source,
                target,
                ground_truth: pair.ground_truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { spec: *spec, pairs };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads the clouds of one manifest entry.
pub fn load_corpus_pair(dir: &Path, entry: &ManifestEntry) -> Result<(PointCloud, PointCloud)> {
    let path = |f: &str| -> PathBuf { dir.join(f) };
    Ok((
        load_cloud(path(&entry.source), CloudFormat::PlyAscii)?,
        load_cloud(path(&entry.target), CloudFormat::PlyAscii)?,
    ))
}

/// Fraction of `pair`'s source points (before crop, i.e. relative to the
/// density-kept count) whose ground-truth-mapped position has a target point
/// within `radius`. Brute force.
pub fn measured_overlap(pair: &SyntheticPair, radius: f64) -> f64 {
    let inv = pair.ground_truth.inverse();
    let target: Vec<Point3<f64>> = pair.target.points().iter().map(|p| inv.transform_point(p)).collect();
    let r2 = radius * radius;
    let real_source = &pair.source.points()[..pair.source_base_indices.len()];
    let hits = real_source
        .par_iter()
        .filter(|p| target.iter().any(|q| (*p - q).norm_squared() <= r2))
        .count();
    let kept = (pair.source_spec.density_keep_fraction * pair.base_len as f64).round();
    hits as f64 / kept
}
