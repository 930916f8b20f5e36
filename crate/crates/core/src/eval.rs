//! Registration metrics, recall, and the benchmark / ablation harness.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::config::{PipelineConfig, RefineMode, Thresholds};
use crate::error::{Error, Result};
use crate::io::{load_cloud_auto, load_transform};
use crate::pipeline::{coarse_stage, refine};
use crate::synth::{load_corpus_pair, CorpusSpec, Manifest};
use crate::transform::RigidTransform;

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by the metrics.
const METRIC_ROTATION_TOLERANCE: f64 = 1e-6;

fn check_rotation(name: &'static str, r: &Matrix3<f64>) -> Result<()> {
    let gram = r.transpose() * r - Matrix3::identity();
    if !r.iter().all(|v| v.is_finite())
        || gram.amax() > METRIC_ROTATION_TOLERANCE
        || (r.determinant() - 1.0).abs() > METRIC_ROTATION_TOLERANCE
    {
        return Err(Error::invalid(name, "not a rotation matrix"));
    }
    Ok(())
}

/// Geodesic rotation distance in degrees, the angle `θ` of `D = R̂Rᵀ` with
/// `cos θ = (tr(D) − 1)/2`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `sin θ` taken from the
/// antisymmetric part of `D`: the plain `acos` form loses about `√ε` near
/// zero (≈1e-6°), this one stays accurate over the whole range.
pub fn rotation_error(r_hat: &Matrix3<f64>, r: &Matrix3<f64>) -> Result<f64> {
    check_rotation("r_hat", r_hat)?;
    check_rotation("r", r)?;
    let d = r_hat * r.transpose();
    let cos = (d.trace() - 1.0) / 2.0;
    let sin = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm() / 2.0;
    Ok(sin.atan2(cos).to_degrees())
}

/// `‖t̂ − t‖₂` in meters.
pub fn translation_error(t_hat: &Vector3<f64>, t: &Vector3<f64>) -> f64 {
    (t_hat - t).norm()
}

/// `(RE°, TE m)` of an estimate against ground truth.
pub fn transform_errors(estimate: &RigidTransform, truth: &RigidTransform) -> Result<(f64, f64)> {
    Ok((
        rotation_error(estimate.rotation(), truth.rotation())?,
        translation_error(estimate.translation(), truth.translation()),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub pair_id: String,
    pub repeat: usize,
    pub seed: u64,
    /// `None` when registration failed.
    pub rotation_error_deg: Option<f64>,
    pub translation_error_m: Option<f64>,
    pub recalled: bool,
    /// Registration failure message, if any.
    pub error: Option<String>,
}

impl PairEvaluation {
    pub fn from_errors(pair_id: &str, repeat: usize, seed: u64, re: f64, te: f64, thresholds: &Thresholds) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            repeat,
            seed,
            rotation_error_deg: Some(re),
            translation_error_m: Some(te),
            recalled: re < thresholds.rotation_deg && te < thresholds.translation_m,
            error: None,
        }
    }

    pub fn failed(pair_id: &str, repeat: usize, seed: u64, error: impl std::fmt::Display) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            repeat,
            seed,
            rotation_error_deg: None,
            translation_error_m: None,
            recalled: false,
            error: Some(error.to_string()),
        }
    }
}

/// Fraction of evaluations with both errors strictly below the thresholds.
pub fn recall(evals: &[PairEvaluation], thresholds: &Thresholds) -> Result<f64> {
    if evals.is_empty() {
        return Err(Error::invalid("evals", "empty evaluation set"));
    }
    let hits = evals
        .iter()
        .filter(|e| match (e.rotation_error_deg, e.translation_error_m) {
            (Some(re), Some(te)) => re < thresholds.rotation_deg && te < thresholds.translation_m,
            _ => false,
        })
        .count();
    Ok(hits as f64 / evals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub recalled: usize,
    pub recall: f64,
    /// Means over recalled pairs only; `None` if nothing was recalled.
    pub mean_rotation_error_deg: Option<f64>,
    pub mean_translation_error_m: Option<f64>,
    pub failures: usize,
}

pub fn summarize(evals: &[PairEvaluation], thresholds: &Thresholds) -> Result<Summary> {
    let recall = recall(evals, thresholds)?;
    let recalled: Vec<&PairEvaluation> = evals.iter().filter(|e| e.recalled).collect();
    let mean = |f: fn(&PairEvaluation) -> Option<f64>| {
        (!recalled.is_empty()).then(|| recalled.iter().filter_map(|e| f(e)).sum::<f64>() / recalled.len() as f64)
    };
    Ok(Summary {
        total: evals.len(),
        recalled: recalled.len(),
        recall,
        mean_rotation_error_deg: mean(|e| e.rotation_error_deg),
        mean_translation_error_m: mean(|e| e.translation_error_m),
        failures: evals.iter().filter(|e| e.error.is_some()).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTiming {
    pub pair_id: String,
    pub repeat: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadFailure {
    pub pair_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub mode: RefineMode,
    pub repeats: usize,
    pub config: PipelineConfig,
    pub summary: Summary,
    /// Sorted by pair id, then repeat.
    pub evaluations: Vec<PairEvaluation>,
    /// Pairs that could not be loaded; excluded from every aggregate.
    pub read_failures: Vec<ReadFailure>,
    /// Wall-clock seconds per pair and repeat; the only nondeterministic field.
    pub timings: Vec<PairTiming>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without the wall-clock timings, for reproducibility comparisons.
    pub fn to_json_without_timings(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("timings");
        }
        serde_json::to_string_pretty(&value).expect("report serializes")
    }

    /// One line per pair and repeat: `pair_id,repeat,re_deg,te_m,recalled`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,repeat,rotation_error_deg,translation_error_m,recalled\n");
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for e in &self.evaluations {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.pair_id,
                e.repeat,
                fmt(e.rotation_error_deg),
                fmt(e.translation_error_m),
                e.recalled
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let s = &self.summary;
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
        let mut out = format!(
            "mode {}  repeats {}  pairs {}  read failures {}\n",
            self.mode.as_str(),
            self.repeats,
            s.total,
            self.read_failures.len()
        );
        out.push_str(&format!(
            "recall {:.4} ({}/{})  mean RE {} deg  mean TE {} m  (recalled pairs only)  registration failures {}\n",
            s.recall,
            s.recalled,
            s.total,
            opt(s.mean_rotation_error_deg, 3),
            opt(s.mean_translation_error_m, 4),
            s.failures
        ));
        out
    }
}

/// Registration benchmark of every mode on identical coarse stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reports: Vec<BenchmarkReport>,
}

impl AblationReport {
    pub fn report(&self, mode: RefineMode) -> Option<&BenchmarkReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
        let mut out = format!("{:<12} {:>8} {:>12} {:>12}\n", "mode", "recall", "mean RE deg", "mean TE m");
        for r in &self.reports {
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>12} {:>12}\n",
                r.mode.as_str(),
                r.summary.recall,
                opt(r.summary.mean_rotation_error_deg, 3),
                opt(r.summary.mean_translation_error_m, 4)
            ));
        }
        out
    }
}

/// A registration pair with known ground truth.
#[derive(Debug, Clone)]
pub struct GroundTruthPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: RigidTransform,
}

/// Indexed collection of pairs that may be loaded lazily.
pub trait PairSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pair_id(&self, i: usize) -> String;

    fn load(&self, i: usize) -> Result<GroundTruthPair>;
}

/// Pairs already in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryPairs {
    pub pairs: Vec<(String, GroundTruthPair)>,
}

impl PairSource for MemoryPairs {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair_id(&self, i: usize) -> String {
        self.pairs[i].0.clone()
    }

    fn load(&self, i: usize) -> Result<GroundTruthPair> {
        Ok(self.pairs[i].1.clone())
    }
}

/// A corpus directory written by [`crate::synth::write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl CorpusDir {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::load(&dir)?;
        Ok(Self { dir, manifest })
    }
}

impl PairSource for CorpusDir {
    fn len(&self) -> usize {
        self.manifest.pairs.len()
    }

    fn pair_id(&self, i: usize) -> String {
        self.manifest.pairs[i].id.clone()
    }

    fn load(&self, i: usize) -> Result<GroundTruthPair> {
        let entry = &self.manifest.pairs[i];
        let (source, target) = load_corpus_pair(&self.dir, entry)?;
        Ok(GroundTruthPair {
            source,
            target,
            ground_truth: entry.ground_truth,
        })
    }
}

/// A corpus recipe generates its pairs on demand.
impl PairSource for CorpusSpec {
    fn len(&self) -> usize {
        self.pairs
    }

    fn pair_id(&self, i: usize) -> String {
        CorpusSpec::pair_id(i)
    }

    fn load(&self, i: usize) -> Result<GroundTruthPair> {
        let pair = self.generate(i)?;
        Ok(GroundTruthPair {
            source: pair.source,
            target: pair.target,
            ground_truth: pair.ground_truth,
        })
    }
}

/// Loader for an external cross-source benchmark laid out as one directory
/// per pair, each holding exactly two `.ply` clouds and a `T_gt.txt` 4×4
/// transform. The alphabetically first cloud is the source and the ground
/// truth maps it onto the second. The layout is assumed, not verified
/// against a distribution of the dataset.
#[derive(Debug, Clone)]
pub struct CrossSourceDir {
    pub pairs: Vec<PathBuf>,
}

pub const GROUND_TRUTH_FILE: &str = "T_gt.txt";

impl CrossSourceDir {
    /// Collects every directory below `root` containing `T_gt.txt`, sorted.
    pub fn discover(root: impl AsRef<Path>) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut stack = vec![root.as_ref().to_path_buf()];
        while let Some(dir) = stack.pop() {
            let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            for entry in entries {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                }
            }
            if dir.join(GROUND_TRUTH_FILE).is_file() {
                pairs.push(dir);
            }
        }
        pairs.sort();
        Ok(Self { pairs })
    }
}

impl PairSource for CrossSourceDir {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair_id(&self, i: usize) -> String {
        self.pairs[i].display().to_string()
    }

    fn load(&self, i: usize) -> Result<GroundTruthPair> {
        let dir = &self.pairs[i];
        let mut clouds: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
            .collect();
        clouds.sort();
        if clouds.len() != 2 {
            return Err(Error::invalid(
                "pair directory",
                format!("{} holds {} .ply files, expected 2", dir.display(), clouds.len()),
            ));
        }
        Ok(GroundTruthPair {
            source: load_cloud_auto(&clouds[0])?,
            target: load_cloud_auto(&clouds[1])?,
            ground_truth: load_transform(dir.join(GROUND_TRUTH_FILE))?,
        })
    }
}

struct Outcome {
    evaluation: PairEvaluation,
    seconds: f64,
}

/// Runs each pair `repeats` times with seed `config.seed + repeat`, refining
/// the shared coarse stage under every mode in `modes`.
fn evaluate_modes(
    pairs: &dyn PairSource,
    config: &PipelineConfig,
    repeats: usize,
    modes: &[RefineMode],
) -> Result<Vec<BenchmarkReport>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats", "must be >= 1"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("dataset", "no pairs"));
    }
    config.validate()?;

    // (pair index, per-mode outcomes per repeat) or a read failure
    let results: Vec<(String, std::result::Result<Vec<Vec<Outcome>>, String>)> = (0..pairs.len())
        .into_par_iter()
        .map(|i| {
            let id = pairs.pair_id(i);
            let pair = match pairs.load(i) {
                Ok(p) => p,
                Err(e) => return (id, Err(e.to_string())),
            };
            let per_repeat = (0..repeats)
                .map(|repeat| {
                    let seed = config.seed.wrapping_add(repeat as u64);
                    let cfg = PipelineConfig { seed, ..*config };
                    let start = Instant::now();
                    let stage = coarse_stage(&pair.source, &pair.target, &cfg);
                    let shared = start.elapsed().as_secs_f64();
                    modes
                        .iter()
                        .map(|&mode| {
                            let start = Instant::now();
                            let evaluation = match &stage {
                                Err(e) => PairEvaluation::failed(&id, repeat, seed, e),
                                Ok(stage) => match refine(stage, &cfg, mode)
                                    .and_then(|r| transform_errors(&r.final_transform, &pair.ground_truth))
                                {
                                    Ok((re, te)) => {
                                        PairEvaluation::from_errors(&id, repeat, seed, re, te, &config.thresholds)
                                    }
                                    Err(e) => PairEvaluation::failed(&id, repeat, seed, e),
                                },
                            };
                            Outcome {
                                evaluation,
                                seconds: shared + start.elapsed().as_secs_f64(),
                            }
                        })
                        .collect()
                })
                .collect();
            (id, Ok(per_repeat))
        })
        .collect();

    let mut read_failures = Vec::new();
    let mut per_mode: Vec<Vec<Outcome>> = modes.iter().map(|_| Vec::new()).collect();
    for (id, result) in results {
        match result {
            Err(message) => {
                warn!("skipping pair {id}: {message}");
                read_failures.push(ReadFailure { pair_id: id, message });
            }
            Ok(repeats) => {
                for outcomes in repeats {
                    for (slot, outcome) in per_mode.iter_mut().zip(outcomes) {
                        slot.push(outcome);
                    }
                }
            }
        }
    }
    read_failures.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    if per_mode[0].is_empty() {
        return Err(Error::invalid("dataset", "every pair failed to load"));
    }

    modes
        .iter()
        .zip(per_mode)
        .map(|(&mode, mut outcomes)| {
            outcomes.sort_by(|a, b| {
                (a.evaluation.pair_id.as_str(), a.evaluation.repeat)
                    .cmp(&(b.evaluation.pair_id.as_str(), b.evaluation.repeat))
            });
            let timings = outcomes
                .iter()
                .map(|o| PairTiming {
                    pair_id: o.evaluation.pair_id.clone(),
                    repeat: o.evaluation.repeat,
                    seconds: o.seconds,
                })
                .collect();
            let evaluations: Vec<PairEvaluation> = outcomes.into_iter().map(|o| o.evaluation).collect();
            Ok(BenchmarkReport {
                mode,
                repeats,
                config: PipelineConfig { mode, ..*config },
                summary: summarize(&evaluations, &config.thresholds)?,
                evaluations,
                read_failures: read_failures.clone(),
                timings,
            })
        })
        .collect()
}

/// Registers every pair `repeats` times under `config.mode`.
pub fn run_benchmark(pairs: &dyn PairSource, config: &PipelineConfig, repeats: usize) -> Result<BenchmarkReport> {
    let mut reports = evaluate_modes(pairs, config, repeats, &[config.mode])?;
    Ok(reports.remove(0))
}

/// Coarse-only, global-only and key-region refinement on the same coarse
/// stages.
pub fn run_ablation(pairs: &dyn PairSource, config: &PipelineConfig, repeats: usize) -> Result<AblationReport> {
    Ok(AblationReport {
        reports: evaluate_modes(pairs, config, repeats, &RefineMode::ALL)?,
    })
}
