//! Feature correlation, mutual top-k correspondence filtering and the coarse
//! rigid estimate.

use std::fmt::Write as _;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::transform::{fit_rigid, RigidTransform};

/// Dense `rows × cols` similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// `s_ij = exp(-‖h_i − h_j‖²)` over all feature pairs.
pub fn gaussian_correlation(source: &FeatureSet, target: &FeatureSet) -> Result<CorrelationMatrix> {
    if source.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            source.dim(),
            target.dim()
        )));
    }
    let (rows, cols) = (source.len(), target.len());
    let mut data = vec![0.0; rows * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            let hi = source.feature(i);
            for (j, s) in row.iter_mut().enumerate() {
                let d2: f64 = hi
                    .iter()
                    .zip(target.feature(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                *s = (-d2).exp();
            }
        });
    }
    Ok(CorrelationMatrix { rows, cols, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Index pairs between two clouds with confidence weights in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    /// Validates weights, duplicates and (when sizes are given) index range.
    pub fn new(pairs: Vec<Correspondence>, bounds: Option<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(pairs.len());
        for c in &pairs {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::invalid("weight", format!("{} not in (0, 1]", c.weight)));
            }
            if let Some((ns, nt)) = bounds {
                if c.source >= ns || c.target >= nt {
                    return Err(Error::invalid(
                        "correspondence",
                        format!("({}, {}) out of range ({ns}, {nt})", c.source, c.target),
                    ));
                }
            }
            if !seen.insert((c.source, c.target)) {
                return Err(Error::invalid(
                    "correspondence",
                    format!("duplicate pair ({}, {})", c.source, c.target),
                ));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `source,target,weight` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,target,weight\n");
        for c in &self.pairs {
            let _ = writeln!(s, "{},{},{}", c.source, c.target, c.weight);
        }
        s
    }
}

/// Indices of the `k` largest values, ties to the lower index.
fn top_k(values: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = values.enumerate().collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Matrix positions `(row, col)` where `col` is in the top-k of its row and
/// `row` in the top-k of its column; sorted by row then column.
pub fn mutual_topk(s: &CorrelationMatrix, k: usize) -> Result<CorrespondenceSet> {
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    let row_best: Vec<Vec<usize>> = (0..s.rows)
        .into_par_iter()
        .map(|r| top_k(s.row(r).iter().copied(), k))
        .collect();
    let col_best: Vec<Vec<usize>> = (0..s.cols)
        .into_par_iter()
        .map(|c| top_k((0..s.rows).map(|r| s.get(r, c)), k))
        .collect();
    let mut pairs = Vec::new();
    for (r, cols) in row_best.iter().enumerate() {
        let mut cols = cols.clone();
        cols.sort_unstable();
        for c in cols {
            if col_best[c].contains(&r) {
                pairs.push(Correspondence {
                    source: r,
                    target: c,
                    weight: s.get(r, c),
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoMutualMatches { k });
    }
    Ok(CorrespondenceSet { pairs })
}

/// Mutual top-k `k` as a function of the number of candidate matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopKSchedule {
    /// `k = 1` up to this many candidates.
    pub k1_max: usize,
    /// `k = 2` up to this many; `k = 3` above.
    pub k2_max: usize,
}

impl Default for TopKSchedule {
    fn default() -> Self {
        Self {
            k1_max: 1000,
            k2_max: 2500,
        }
    }
}

impl TopKSchedule {
    pub fn k_for(&self, candidates: usize) -> usize {
        if candidates <= self.k1_max {
            1
        } else if candidates <= self.k2_max {
            2
        } else {
            3
        }
    }
}

/// Surviving correspondences in cloud indices plus the participating points.
#[derive(Debug, Clone)]
pub struct FilteredMatches {
    pub correspondences: CorrespondenceSet,
    pub k: usize,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub filtered_source: PointCloud,
    pub filtered_target: PointCloud,
}

/// Mutual top-k over `s` (rows/cols are feature rows), remapped to cloud
/// indices. Filtered clouds keep points in ascending index order.
pub fn filter_matches(
    s: &CorrelationMatrix,
    k: usize,
    source_features: &FeatureSet,
    target_features: &FeatureSet,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<FilteredMatches> {
    if s.rows != source_features.len() || s.cols != target_features.len() {
        return Err(Error::ShapeMismatch("correlation matrix does not match feature sets".into()));
    }
    let raw = mutual_topk(s, k)?;
    let pairs: Vec<Correspondence> = raw
        .pairs
        .iter()
        .map(|c| Correspondence {
            source: source_features.point_index(c.source),
            target: target_features.point_index(c.target),
            weight: c.weight,
        })
        .collect();
    let correspondences = CorrespondenceSet::new(pairs, Some((source.len(), target.len())))?;
    let mut source_indices: Vec<usize> = correspondences.pairs.iter().map(|c| c.source).collect();
    let mut target_indices: Vec<usize> = correspondences.pairs.iter().map(|c| c.target).collect();
    source_indices.sort_unstable();
    source_indices.dedup();
    target_indices.sort_unstable();
    target_indices.dedup();
    Ok(FilteredMatches {
        filtered_source: source.select(&source_indices),
        filtered_target: target.select(&target_indices),
        correspondences,
        k,
        source_indices,
        target_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub enabled: bool,
    pub iterations: usize,
    /// Inlier distance (meters); defaults to three voxels.
    pub inlier_threshold: f64,
    /// Minimal samples whose pairwise edge lengths disagree by more than this
    /// ratio are skipped before scoring.
    pub edge_ratio: f64,
    /// Refit the winner on its inliers with the weighted closed form.
    pub refit: bool,
}

impl ConsensusConfig {
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            enabled: true,
            iterations: 20_000,
            inlier_threshold: 3.0 * voxel_size,
            edge_ratio: 0.9,
            refit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.iterations == 0 {
            return Err(Error::invalid("consensus.iterations", "must be >= 1"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::invalid("consensus.inlier_threshold", "must be positive"));
        }
        if !(self.edge_ratio > 0.0 && self.edge_ratio <= 1.0) {
            return Err(Error::invalid("consensus.edge_ratio", "must be in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self::for_voxel(0.05)
    }
}

#[derive(Debug, Clone)]
pub struct CoarseEstimate {
    pub transform: RigidTransform,
    /// Positions (into the correspondence list) of inliers under the final transform.
    pub inliers: Vec<usize>,
    pub hypotheses_scored: usize,
}

fn endpoints(
    corr: &CorrespondenceSet,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<(Vec<Point3<f64>>, Vec<Point3<f64>>, Vec<f64>)> {
    let (ns, nt) = (source.len(), target.len());
    let mut a = Vec::with_capacity(corr.len());
    let mut b = Vec::with_capacity(corr.len());
    let mut w = Vec::with_capacity(corr.len());
    for c in corr.pairs() {
        if c.source >= ns || c.target >= nt {
            return Err(Error::invalid(
                "correspondence",
                format!("({}, {}) out of range ({ns}, {nt})", c.source, c.target),
            ));
        }
        a.push(source.points()[c.source]);
        b.push(target.points()[c.target]);
        w.push(c.weight);
    }
    Ok((a, b, w))
}

/// Weighted closed-form rigid fit over all correspondences.
pub fn weighted_fit(corr: &CorrespondenceSet, source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    let (a, b, w) = endpoints(corr, source, target)?;
    fit_rigid(&a, &b, Some(&w))
}

fn inliers_of(t: &RigidTransform, a: &[Point3<f64>], b: &[Point3<f64>], thresh2: f64) -> Vec<usize> {
    (0..a.len())
        .filter(|&i| (t.transform_point(&a[i]) - b[i]).norm_squared() < thresh2)
        .collect()
}

fn edges_consistent(a: &[Point3<f64>], b: &[Point3<f64>], sample: &[usize; 3], ratio: f64) -> bool {
    for (x, y) in [(0, 1), (0, 2), (1, 2)] {
        let da = (a[sample[x]] - a[sample[y]]).norm();
        let db = (b[sample[x]] - b[sample[y]]).norm();
        if da < ratio * db || db < ratio * da {
            return false;
        }
    }
    true
}

/// Coarse transform from correspondences: the weighted closed-form fit, or
/// with consensus enabled, the minimal-sample hypothesis with the most
/// inliers (optionally refit on them).
pub fn coarse_transform(
    corr: &CorrespondenceSet,
    source: &PointCloud,
    target: &PointCloud,
    consensus: &ConsensusConfig,
    seed: u64,
) -> Result<CoarseEstimate> {
    consensus.validate()?;
    let (a, b, w) = endpoints(corr, source, target)?;
    if a.len() < 3 {
        return Err(Error::NotEnoughPoints {
            needed: 3,
            available: a.len(),
        });
    }
    let thresh2 = consensus.inlier_threshold * consensus.inlier_threshold;
    if !consensus.enabled {
        let transform = fit_rigid(&a, &b, Some(&w))?;
        let inliers = inliers_of(&transform, &a, &b, thresh2);
        return Ok(CoarseEstimate {
            transform,
            inliers,
            hypotheses_scored: 1,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<[usize; 3]> = (0..consensus.iterations)
        .filter_map(|_| {
            let i = rng.random_range(0..a.len());
            let j = rng.random_range(0..a.len());
            let k = rng.random_range(0..a.len());
            (i != j && j != k && i != k).then_some([i, j, k])
        })
        .collect();
    let scored: Vec<(usize, usize, RigidTransform)> = samples
        .par_iter()
        .enumerate()
        .filter(|(_, s)| edges_consistent(&a, &b, s, consensus.edge_ratio))
        .filter_map(|(order, s)| {
            let sa = [a[s[0]], a[s[1]], a[s[2]]];
            let sb = [b[s[0]], b[s[1]], b[s[2]]];
            let t = fit_rigid(&sa, &sb, None).ok()?;
            let count = (0..a.len())
                .filter(|&i| (t.transform_point(&a[i]) - b[i]).norm_squared() < thresh2)
                .count();
            Some((order, count, t))
        })
        .collect();
    let hypotheses_scored = scored.len();
    // most inliers, earliest sample on ties
    let best = scored
        .into_iter()
        .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)));
    let mut transform = match best {
        Some((_, count, t)) if count >= 3 => t,
        _ => {
            return Err(Error::Degenerate(
                "no consensus hypothesis with at least 3 inliers".into(),
            ))
        }
    };
    let mut inliers = inliers_of(&transform, &a, &b, thresh2);
    if consensus.refit && inliers.len() >= 3 {
        let ia: Vec<_> = inliers.iter().map(|&i| a[i]).collect();
        let ib: Vec<_> = inliers.iter().map(|&i| b[i]).collect();
        let iw: Vec<_> = inliers.iter().map(|&i| w[i]).collect();
        if let Ok(refit) = fit_rigid(&ia, &ib, Some(&iw)) {
            let refit_inliers = inliers_of(&refit, &a, &b, thresh2);
            if refit_inliers.len() >= inliers.len() {
                transform = refit;
                inliers = refit_inliers;
            }
        }
    }
    Ok(CoarseEstimate {
        transform,
        inliers,
        hypotheses_scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(rows: &[&[f64]]) -> FeatureSet {
        let dim = rows[0].len();
        FeatureSet::from_rows(dim, rows.iter().flat_map(|r| r.iter().copied()).collect(), (0..rows.len()).collect())
            .unwrap()
    }

    #[test]
    fn correlation_closed_forms() {
        let a = features(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let s = gaussian_correlation(&a, &a).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert!((s.get(0, 1) - (-2.0f64).exp()).abs() < 1e-12);
        assert!((s.get(0, 2) - (-4.0f64).exp()).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.135_335_283_236_612_7).abs() < 1e-12);
        assert!((s.get(0, 2) - 0.018_315_638_888_734_18).abs() < 1e-12);
    }

    #[test]
    fn diagonal_dominant_matrix_keeps_diagonal() {
        let n = 5;
        let data = (0..n * n).map(|x| if x % (n + 1) == 0 { 1.0 } else { 0.1 }).collect();
        let s = CorrelationMatrix::from_rows(n, n, data).unwrap();
        let got: Vec<(usize, usize)> = mutual_topk(&s, 1).unwrap().pairs().iter().map(|c| (c.source, c.target)).collect();
        assert_eq!(got, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn two_by_two_mutual_check() {
        let s = CorrelationMatrix::from_rows(2, 2, vec![0.9, 0.8, 0.85, 0.7]).unwrap();
        let got: Vec<(usize, usize)> = mutual_topk(&s, 1).unwrap().pairs().iter().map(|c| (c.source, c.target)).collect();
        assert_eq!(got, vec![(0, 0)]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = CorrelationMatrix::from_rows(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let got: Vec<(usize, usize)> = mutual_topk(&s, 1).unwrap().pairs().iter().map(|c| (c.source, c.target)).collect();
        assert_eq!(got, vec![(0, 0)]);
    }

    #[test]
    fn global_maximum_is_always_mutual() {
        // the largest entry is the best of its row and its column, so only an
        // empty matrix can produce no pairs
        let s = CorrelationMatrix::from_rows(2, 3, vec![0.5, 0.9, 0.1, 0.95, 0.1, 0.92]).unwrap();
        let got: Vec<(usize, usize)> = mutual_topk(&s, 1).unwrap().pairs().iter().map(|c| (c.source, c.target)).collect();
        assert_eq!(got, vec![(0, 1), (1, 0)]);
        assert!(matches!(mutual_topk(&s, 0), Err(Error::InvalidParameter { .. })));
        let empty = CorrelationMatrix::from_rows(0, 0, vec![]).unwrap();
        assert!(matches!(mutual_topk(&empty, 1), Err(Error::NoMutualMatches { k: 1 })));
    }

    #[test]
    fn schedule_breakpoints() {
        let s = TopKSchedule::default();
        assert_eq!(s.k_for(250), 1);
        assert_eq!(s.k_for(1000), 1);
        assert_eq!(s.k_for(1001), 2);
        assert_eq!(s.k_for(2500), 2);
        assert_eq!(s.k_for(2501), 3);
    }

    #[test]
    fn correspondence_set_validation() {
        let ok = Correspondence { source: 0, target: 1, weight: 0.5 };
        assert!(CorrespondenceSet::new(vec![ok], Some((1, 2))).is_ok());
        assert!(CorrespondenceSet::new(vec![ok, ok], None).is_err());
        assert!(CorrespondenceSet::new(vec![Correspondence { weight: 0.0, ..ok }], None).is_err());
        assert!(CorrespondenceSet::new(vec![ok], Some((1, 1))).is_err());
        let csv = CorrespondenceSet::new(vec![ok], None).unwrap().to_csv();
        assert_eq!(csv, "source,target,weight\n0,1,0.5\n");
    }
}
