//! Python bindings: point clouds, rigid transforms, configuration,
//! registration, synthetic pairs, metrics and the benchmark harness.

use std::path::PathBuf;

use ::crossreg as core;
use core::eval::{run_ablation, run_benchmark, CorpusDir, CrossSourceDir, PairSource};
use core::io::{load_cloud_auto, save_cloud, CloudFormat};
use core::synth::{CorpusSpec as CoreCorpusSpec, MANIFEST_FILE};
use nalgebra::{Point3, Vector3};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

create_exception!(crossreg, CrossregError, PyException, "Registration or pipeline failure.");

fn to_py(e: core::Error) -> PyErr {
    match &e {
        core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        core::Error::Config { .. } | core::Error::InvalidParameter { .. } => PyValueError::new_err(e.to_string()),
        _ => CrossregError::new_err(e.to_string()),
    }
}

type Point = (f64, f64, f64);

#[pyclass(name = "PointCloud", module = "crossreg", frozen)]
struct PyPointCloud {
    inner: core::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<Point>) -> PyResult<Self> {
        let pts = points.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
        Ok(Self {
            inner: core::PointCloud::new(pts).map_err(to_py)?,
        })
    }

    /// Loads `.ply`, `.pcd` or whitespace-separated XYZ by extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_cloud_auto(path).map_err(to_py)?,
        })
    }

    /// Writes the cloud, choosing the format by extension.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let format = CloudFormat::from_path(&path);
        save_cloud(path, &self.inner, format).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points, normals: {})", self.inner.len(), self.inner.has_normals())
    }

    fn points(&self) -> Vec<Point> {
        self.inner.points().iter().map(|p| (p.x, p.y, p.z)).collect()
    }

    /// Unit normals, or `None` if the cloud has none.
    fn normals(&self) -> Option<Vec<Point>> {
        self.inner
            .normals()
            .map(|ns| ns.iter().map(|n| (n.x, n.y, n.z)).collect())
    }

    fn centroid(&self) -> Option<Point> {
        self.inner.centroid().map(|p| (p.x, p.y, p.z))
    }

    fn voxel_downsample(&self, voxel_size: f64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.voxel_downsample(voxel_size).map_err(to_py)?,
        })
    }

    fn estimate_normals(&self, k: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.estimate_normals(k).map_err(to_py)?,
        })
    }

    fn transformed(&self, transform: &PyRigidTransform) -> Self {
        Self {
            inner: self.inner.transformed(&transform.inner),
        }
    }

    /// Farthest point sampling: `(indices, covering_radius)`.
    fn farthest_point_sample(&self, n: usize) -> PyResult<(Vec<usize>, f64)> {
        let keys = core::keyregion::farthest_point_sample(&self.inner, n).map_err(to_py)?;
        Ok((keys.indices, keys.covering_radius))
    }
}

#[pyclass(name = "RigidTransform", module = "crossreg", frozen)]
struct PyRigidTransform {
    inner: core::RigidTransform,
}

#[pymethods]
impl PyRigidTransform {
    /// From a 4×4 homogeneous matrix given as rows.
    #[new]
    fn new(matrix: [[f64; 4]; 4]) -> PyResult<Self> {
        Ok(Self {
            inner: core::RigidTransform::from_rows(&matrix).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn identity() -> Self {
        Self {
            inner: core::RigidTransform::identity(),
        }
    }

    /// Rotation by `angle` radians about `axis`, then translation.
    #[staticmethod]
    #[pyo3(signature = (axis, angle, translation = (0.0, 0.0, 0.0)))]
    fn from_axis_angle(axis: Point, angle: f64, translation: Point) -> PyResult<Self> {
        let axis = vector(axis);
        if axis.norm() == 0.0 {
            return Err(PyValueError::new_err("axis must be non-zero"));
        }
        Ok(Self {
            inner: core::RigidTransform::from_axis_angle(&axis, angle, vector(translation)),
        })
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        self.inner.to_rows()
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.inner.rotation();
        [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]])
    }

    fn translation(&self) -> Point {
        let t = self.inner.translation();
        (t.x, t.y, t.z)
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    /// `self ∘ other`: applies `other` first.
    fn compose(&self, other: &PyRigidTransform) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn apply(&self, points: Vec<Point>) -> Vec<Point> {
        points
            .into_iter()
            .map(|(x, y, z)| {
                let p = self.inner.transform_point(&Point3::new(x, y, z));
                (p.x, p.y, p.z)
            })
            .collect()
    }

    /// `(rotation error in degrees, translation error in meters)` against `truth`.
    fn errors(&self, truth: &PyRigidTransform) -> PyResult<(f64, f64)> {
        core::eval::transform_errors(&self.inner, &truth.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("RigidTransform({:?})", self.inner.to_rows())
    }
}

fn vector(v: Point) -> Vector3<f64> {
    Vector3::new(v.0, v.1, v.2)
}

#[pyclass(name = "PipelineConfig", module = "crossreg")]
struct PyPipelineConfig {
    inner: core::PipelineConfig,
}

#[pymethods]
impl PyPipelineConfig {
    /// Defaults, with length parameters scaled to `voxel_size`.
    #[new]
    #[pyo3(signature = (voxel_size = 0.05))]
    fn new(voxel_size: f64) -> PyResult<Self> {
        let inner = core::PipelineConfig::for_voxel(voxel_size);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: core::PipelineConfig::from_json(text).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// `coarse-only`, `global-only` or `key-regions`.
    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[setter]
    fn set_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.mode = mode.parse().map_err(to_py)?;
        Ok(())
    }

    /// `seeded-attention` or `classical-descriptor`.
    #[getter]
    fn extractor(&self) -> &'static str {
        self.inner.extractor.as_str()
    }

    #[setter]
    fn set_extractor(&mut self, kind: &str) -> PyResult<()> {
        self.inner.extractor = kind.parse().map_err(to_py)?;
        Ok(())
    }

    #[getter]
    fn voxel_size(&self) -> f64 {
        self.inner.voxel_size
    }

    #[getter]
    fn keypoints(&self) -> usize {
        self.inner.keypoints
    }

    #[setter]
    fn set_keypoints(&mut self, n: usize) -> PyResult<()> {
        let mut cfg = self.inner;
        cfg.keypoints = n;
        cfg.validate().map_err(to_py)?;
        self.inner = cfg;
        Ok(())
    }
}

#[pyclass(name = "RegistrationResult", module = "crossreg", frozen)]
struct PyRegistrationResult {
    inner: core::RegistrationResult,
}

#[pymethods]
impl PyRegistrationResult {
    #[getter]
    fn final_transform(&self) -> PyRigidTransform {
        PyRigidTransform {
            inner: self.inner.final_transform,
        }
    }

    #[getter]
    fn coarse_transform(&self) -> PyRigidTransform {
        PyRigidTransform {
            inner: self.inner.coarse_transform,
        }
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    /// Refinement fell back to a single patch or the coarse transform.
    #[getter]
    fn degraded(&self) -> bool {
        self.inner.diagnostics.degraded
    }

    #[getter]
    fn fused_patches(&self) -> Vec<usize> {
        self.inner.diagnostics.fused_patches.clone()
    }

    #[getter]
    fn correspondences(&self) -> usize {
        self.inner.diagnostics.correspondences
    }

    /// Full result, including per-patch solves and diagnostics.
    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Registers `source` onto `target`; the final transform maps source
/// coordinates into the target frame.
#[pyfunction]
#[pyo3(signature = (source, target, config = None))]
fn register(
    py: Python<'_>,
    source: &PyPointCloud,
    target: &PyPointCloud,
    config: Option<&PyPipelineConfig>,
) -> PyResult<PyRegistrationResult> {
    let cfg = config.map_or_else(core::PipelineConfig::default, |c| c.inner);
    let (src, tgt) = (&source.inner, &target.inner);
    let inner = py.detach(|| core::register(src, tgt, &cfg)).map_err(to_py)?;
    Ok(PyRegistrationResult { inner })
}

/// Synthetic corpus recipe; pairs are generated on demand.
#[pyclass(name = "CorpusSpec", module = "crossreg", frozen)]
struct PyCorpusSpec {
    inner: CoreCorpusSpec,
}

#[pymethods]
impl PyCorpusSpec {
    /// Default corpus, optionally overriding pair count, seed and base size.
    #[new]
    #[pyo3(signature = (pairs = None, seed = None, base_points = None))]
    fn new(pairs: Option<usize>, seed: Option<u64>, base_points: Option<usize>) -> PyResult<Self> {
        let mut inner = CoreCorpusSpec::default();
        inner.pairs = pairs.unwrap_or(inner.pairs);
        inner.seed = seed.unwrap_or(inner.seed);
        inner.base_points = base_points.unwrap_or(inner.base_points);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCorpusSpec::from_json(text).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.pairs
    }

    /// Pair `i` as `(source, target, ground_truth)`.
    fn generate(&self, py: Python<'_>, i: usize) -> PyResult<(PyPointCloud, PyPointCloud, PyRigidTransform)> {
        if i >= self.inner.pairs {
            return Err(PyIndexError::new_err(format!("pair {i} of {}", self.inner.pairs)));
        }
        let spec = self.inner;
        let pair = py.detach(|| spec.generate(i)).map_err(to_py)?;
        Ok((
            PyPointCloud { inner: pair.source },
            PyPointCloud { inner: pair.target },
            PyRigidTransform {
                inner: pair.ground_truth,
            },
        ))
    }

    /// Writes PLY clouds and the manifest into `out_dir`.
    fn write(&self, py: Python<'_>, out_dir: PathBuf) -> PyResult<usize> {
        let spec = self.inner;
        let manifest = py
            .detach(|| core::synth::write_corpus(&spec, &out_dir))
            .map_err(to_py)?;
        Ok(manifest.pairs.len())
    }
}

fn open_pairs(corpus: &PathBuf) -> core::Result<Box<dyn PairSource>> {
    if corpus.join(MANIFEST_FILE).is_file() {
        Ok(Box::new(CorpusDir::open(corpus)?))
    } else {
        Ok(Box::new(CrossSourceDir::discover(corpus)?))
    }
}

/// Benchmarks a corpus (a directory or an in-memory `CorpusSpec`) and
/// returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (corpus, config = None, repeats = 1))]
fn evaluate(
    py: Python<'_>,
    corpus: &Bound<'_, PyAny>,
    config: Option<&PyPipelineConfig>,
    repeats: usize,
) -> PyResult<String> {
    let cfg = config.map_or_else(core::PipelineConfig::default, |c| c.inner);
    let pairs = pair_source(corpus)?;
    let report = py.detach(|| run_benchmark(pairs.as_ref(), &cfg, repeats)).map_err(to_py)?;
    Ok(report.to_json())
}

/// Coarse-only, global-only and key-region refinement; JSON report.
#[pyfunction]
#[pyo3(signature = (corpus, config = None, repeats = 1))]
fn ablate(
    py: Python<'_>,
    corpus: &Bound<'_, PyAny>,
    config: Option<&PyPipelineConfig>,
    repeats: usize,
) -> PyResult<String> {
    let cfg = config.map_or_else(core::PipelineConfig::default, |c| c.inner);
    let pairs = pair_source(corpus)?;
    let report = py.detach(|| run_ablation(pairs.as_ref(), &cfg, repeats)).map_err(to_py)?;
    Ok(report.to_json())
}

fn pair_source(corpus: &Bound<'_, PyAny>) -> PyResult<Box<dyn PairSource>> {
    if let Ok(spec) = corpus.cast::<PyCorpusSpec>() {
        return Ok(Box::new(spec.get().inner));
    }
    let path: PathBuf = corpus.extract()?;
    open_pairs(&path).map_err(to_py)
}

/// `(rotation error in degrees, translation error in meters)`.
#[pyfunction]
fn transform_errors(estimate: &PyRigidTransform, truth: &PyRigidTransform) -> PyResult<(f64, f64)> {
    core::eval::transform_errors(&estimate.inner, &truth.inner).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "crossreg")]
fn crossreg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CrossregError", m.py().get_type::<CrossregError>())?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyRegistrationResult>()?;
    m.add_class::<PyCorpusSpec>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(transform_errors, m)?)?;
    Ok(())
}
