//! Acceptance criteria 1–10. Runs as a plain binary so every criterion is
//! evaluated and reported even when an earlier one fails; exits non-zero if
//! any criterion fails.
//!
//! Oracles (rigid fits, farthest point sampling, finite differences) are
//! written here independently of the library code they check.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use crossreg::embedding::EmbeddingConfig;
use crossreg::eval::{rotation_error, run_ablation, run_benchmark, transform_errors, translation_error};
use crossreg::features::{AttentionConfig, FeatureSet, SeededAttention};
use crossreg::keyregion::{farthest_point_sample, KeypointSet};
use crossreg::local::{
    local_patch_optimize, perturb, point_to_plane_residuals, residual_jacobian, global_fuse, LocalSolveConfig,
    LocalSolveResult, LocalStatus, PlaneCorrespondence, PlaneTarget,
};
use crossreg::matching::{coarse_transform, gaussian_correlation, ConsensusConfig, Correspondence, CorrespondenceSet};
use crossreg::synth::{generate_base, CorpusSpec, Shape};
use crossreg::{PipelineConfig, PointCloud, RefineMode, RigidTransform};
use nalgebra::{Matrix3, Matrix4, Point3, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rigid(rng: &mut ChaCha8Rng, max_angle: f64, max_shift: f64) -> RigidTransform {
    let axis = unit(rng);
    let angle = rng.random_range(0.0..=max_angle);
    let shift = unit(rng) * rng.random_range(0.0..=max_shift);
    RigidTransform::from_axis_angle(&axis, angle, shift)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            )
        })
        .collect()
}

fn max_entry_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let dr = (a.rotation() - b.rotation()).abs().max();
    let dt = (a.translation() - b.translation()).abs().max();
    dr.max(dt)
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    *RigidTransform::from_axis_angle(&Vector3::z(), deg.to_radians(), Vector3::zeros()).rotation()
}

// ---------------------------------------------------------------------------
// 1. metric correctness

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let id = Matrix3::identity();
    let re180 = rotation_error(&id, &rot_z(180.0)).unwrap();
    let rx90 = *RigidTransform::from_axis_angle(&Vector3::x(), PI / 2.0, Vector3::zeros()).rotation();
    let re90 = rotation_error(&id, &rx90).unwrap();
    let te = translation_error(&Vector3::zeros(), &Vector3::new(0.1, 0.2, 0.2));
    let elapsed = start.elapsed();
    let pass = (re180 - 180.0).abs() <= 1e-6
        && (re90 - 90.0).abs() <= 1e-6
        && (te - 0.3).abs() <= 1e-12
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "RE(I,Rz180)={re180:.9} RE(I,Rx90)={re90:.9} (tol 1e-6); TE={te:.15} (tol 1e-12); {elapsed:.2?} (< 1 s)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. embedding rigid invariance

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i);
        let cloud = PointCloud::new(random_cloud(&mut rng, 48, 0.5)).unwrap();
        let t = random_rigid(&mut rng, PI, 2.0);
        let moved = cloud.transformed(&t);
        let attention = SeededAttention::new(AttentionConfig {
            embedding: EmbeddingConfig::for_voxel(0.05),
            seed: i,
            ..AttentionConfig::default()
        })
        .unwrap();
        let a = attention.embed(&cloud).unwrap();
        let b = attention.embed(&moved).unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap_or(f64::INFINITY));
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!("20 clouds x 20 rigid transforms: max |e - e'| = {worst:.3e} (tol 1e-9); {elapsed:.2?} (< 30 s)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Gaussian correlation

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 16;
    let n = 64;
    let rows: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let set = FeatureSet::from_rows(dim, rows, (0..n).collect()).unwrap();
    let s = gaussian_correlation(&set, &set).unwrap();
    let mut in_range = true;
    let mut diag_err: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = s.get(i, j);
            in_range &= v > 0.0 && v <= 1.0;
        }
        diag_err = diag_err.max((s.get(i, i) - 1.0).abs());
    }
    // orthogonal and antipodal unit pairs in every coordinate direction
    let mut orth_err: f64 = 0.0;
    let mut anti_err: f64 = 0.0;
    for axis in 0..dim {
        let other = (axis + 1) % dim;
        let mut e = vec![0.0; dim];
        e[axis] = 1.0;
        let mut f = vec![0.0; dim];
        f[other] = 1.0;
        let mut g = vec![0.0; dim];
        g[axis] = -1.0;
        let a = FeatureSet::from_rows(dim, e, vec![0]).unwrap();
        let b = FeatureSet::from_rows(dim, [f, g].concat(), vec![0, 1]).unwrap();
        let s = gaussian_correlation(&a, &b).unwrap();
        orth_err = orth_err.max((s.get(0, 0) - (-2f64).exp()).abs());
        anti_err = anti_err.max((s.get(0, 1) - (-4f64).exp()).abs());
    }
    let pass = in_range && diag_err == 0.0 && orth_err <= 1e-12 && anti_err <= 1e-12;
    outcome(
        pass,
        format!(
            "s in (0,1]: {in_range}; |s(h,h)-1| = {diag_err:.1e} (exact); |s(orth)-e^-2| = {orth_err:.1e}, \
             |s(anti)-e^-4| = {anti_err:.1e} (tol 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. farthest point sampling vs brute force

fn d2(a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let (x, y, z) = (a.x - b.x, a.y - b.y, a.z - b.z);
    x * x + y * y + z * z
}

/// Brute-force reference: recomputes every point-to-set distance from
/// scratch at each step; ties go to the lower index.
fn fps_reference(points: &[Point3<f64>], n: usize) -> Vec<usize> {
    let sum = points.iter().fold(Vector3::zeros(), |s, p| s + p.coords);
    let centroid = Point3::from(sum / points.len() as f64);
    let mut first = 0;
    for i in 1..points.len() {
        if d2(&points[i], &centroid) < d2(&points[first], &centroid) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let dist = chosen.iter().map(|&c| d2(p, &points[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, b)| dist > b) {
                best = Some((i, dist));
            }
        }
        chosen.push(best.expect("enough points").0);
    }
    chosen
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut mismatches = 0;
    for c in 0..100 {
        let n_points = rng.random_range(8..=1000);
        let points: Vec<Point3<f64>> = if c % 4 == 0 {
            // integer lattice with duplicates: exact distance ties everywhere
            (0..n_points)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-3..=3) as f64,
                        rng.random_range(-3..=3) as f64,
                        rng.random_range(-3..=3) as f64,
                    )
                })
                .collect()
        } else {
            random_cloud(&mut rng, n_points, 1.0)
        };
        let cloud = PointCloud::new(points.clone()).unwrap();
        for n in [1, 2, 4, 8] {
            let got = farthest_point_sample(&cloud, n).unwrap().indices;
            checked += 1;
            if got != fps_reference(&points, n) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} runs (100 clouds, n in {{1,2,4,8}}, 25 lattice clouds with ties): {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------------------
// 5. rigid least squares vs oracles

/// Weighted rigid fit by SVD of `Σ w (b − b̄)(a − ā)ᵀ`.
fn svd_oracle(a: &[Point3<f64>], b: &[Point3<f64>], w: &[f64]) -> RigidTransform {
    let total: f64 = w.iter().sum();
    let ca = a.iter().zip(w).fold(Vector3::zeros(), |s, (p, w)| s + p.coords * *w) / total;
    let cb = b.iter().zip(w).fold(Vector3::zeros(), |s, (p, w)| s + p.coords * *w) / total;
    let mut m = Matrix3::zeros();
    for ((p, q), w) in a.iter().zip(b).zip(w) {
        m += (q.coords - cb) * (p.coords - ca).transpose() * *w;
    }
    // m = U S Vᵀ maximizes tr(Rᵀ m) at R = U diag(1, 1, det(U Vᵀ)) Vᵀ
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    RigidTransform::new(r, cb - r * ca).unwrap()
}

/// Horn's closed form: the rotation quaternion is the top eigenvector of a
/// symmetric 4×4 matrix built from the cross-covariance.
fn quaternion_oracle(a: &[Point3<f64>], b: &[Point3<f64>], w: &[f64]) -> RigidTransform {
    let total: f64 = w.iter().sum();
    let ca = a.iter().zip(w).fold(Vector3::zeros(), |s, (p, w)| s + p.coords * *w) / total;
    let cb = b.iter().zip(w).fold(Vector3::zeros(), |s, (p, w)| s + p.coords * *w) / total;
    let mut s = Matrix3::zeros();
    for ((p, q), w) in a.iter().zip(b).zip(w) {
        s += (p.coords - ca) * (q.coords - cb).transpose() * *w;
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let top = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(top);
    let (q0, qx, qy, qz) = (q[0], q[1], q[2], q[3]);
    let r = Matrix3::new(
        q0 * q0 + qx * qx - qy * qy - qz * qz,
        2.0 * (qx * qy - q0 * qz),
        2.0 * (qx * qz + q0 * qy),
        2.0 * (qy * qx + q0 * qz),
        q0 * q0 - qx * qx + qy * qy - qz * qz,
        2.0 * (qy * qz - q0 * qx),
        2.0 * (qz * qx - q0 * qy),
        2.0 * (qz * qy + q0 * qx),
        q0 * q0 - qx * qx - qy * qy + qz * qz,
    );
    RigidTransform::new(r, cb - r * ca).unwrap()
}

fn correspondence_problem(
    rng: &mut ChaCha8Rng,
    noise: f64,
) -> (PointCloud, PointCloud, CorrespondenceSet, Vec<f64>, RigidTransform) {
    let m = rng.random_range(3..=200);
    let truth = random_rigid(rng, PI, 3.0);
    let a = random_cloud(rng, m, 1.0);
    let b: Vec<Point3<f64>> = a
        .iter()
        .map(|p| truth.transform_point(p) + Vector3::from_fn(|_, _| rng.random_range(-noise..=noise)))
        .collect();
    let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..=1.0)).collect();
    let pairs = (0..m)
        .map(|i| Correspondence {
            source: i,
            target: i,
            weight: weights[i],
        })
        .collect();
    let set = CorrespondenceSet::new(pairs, Some((m, m))).unwrap();
    (PointCloud::new(a).unwrap(), PointCloud::new(b).unwrap(), set, weights, truth)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let closed = ConsensusConfig {
        enabled: false,
        ..ConsensusConfig::default()
    };
    let consensus = ConsensusConfig::default();
    let mut coarse_dev: f64 = 0.0;
    let mut consensus_dev: f64 = 0.0;
    let mut fuse_dev: f64 = 0.0;
    let mut oracle_dev: f64 = 0.0;
    let mut exact_re: f64 = 0.0;
    let mut exact_te: f64 = 0.0;
    let mut exact = |est: &RigidTransform, truth: &RigidTransform| {
        let (re, te) = transform_errors(est, truth).unwrap();
        exact_re = exact_re.max(re);
        exact_te = exact_te.max(te);
    };
    for s in 0..100u64 {
        // noisy correspondences (noise below the consensus threshold): the
        // consensus refit keeps every pair, so both paths equal the full fit
        let (a, b, set, w, _) = correspondence_problem(&mut rng, 0.02);
        let oracle = svd_oracle(a.points(), b.points(), &w);
        oracle_dev = oracle_dev.max(max_entry_diff(&oracle, &quaternion_oracle(a.points(), b.points(), &w)));
        let t = coarse_transform(&set, &a, &b, &closed, s).unwrap().transform;
        coarse_dev = coarse_dev.max(max_entry_diff(&t, &oracle));
        let t = coarse_transform(&set, &a, &b, &consensus, s).unwrap().transform;
        consensus_dev = consensus_dev.max(max_entry_diff(&t, &oracle));

        // noiseless: exact recovery
        let (a, b, set, _, truth) = correspondence_problem(&mut rng, 0.0);
        exact(&coarse_transform(&set, &a, &b, &closed, s).unwrap().transform, &truth);
        exact(&coarse_transform(&set, &a, &b, &consensus, s).unwrap().transform, &truth);

        // fusion of keypoints moved by distinct local transforms
        let k = rng.random_range(3..=12);
        let keys = random_cloud(&mut rng, k, 2.0);
        let keyset = KeypointSet {
            indices: (0..k).collect(),
            points: keys.clone(),
            covering_radius: 1.0,
        };
        let base = random_rigid(&mut rng, PI, 2.0);
        let locals: Vec<LocalSolveResult> = (0..k)
            .map(|i| {
                let jitter = random_rigid(&mut rng, 0.05, 0.05);
                let mut l = LocalSolveResult::excluded(i, jitter.compose(&base), LocalStatus::Converged);
                l.converged = true;
                l
            })
            .collect();
        let images: Vec<Point3<f64>> = locals
            .iter()
            .zip(&keys)
            .map(|(l, p)| l.transform.transform_point(p))
            .collect();
        let fused = global_fuse(&keyset, &locals, &RigidTransform::identity());
        fuse_dev = fuse_dev.max(max_entry_diff(&fused.transform, &svd_oracle(&keys, &images, &vec![1.0; k])));

        let same: Vec<LocalSolveResult> = locals
            .iter()
            .map(|l| LocalSolveResult {
                transform: base,
                ..l.clone()
            })
            .collect();
        exact(&global_fuse(&keyset, &same, &RigidTransform::identity()).transform, &base);
    }
    let pass = coarse_dev <= 1e-9
        && consensus_dev <= 1e-9
        && fuse_dev <= 1e-9
        && oracle_dev <= 1e-9
        && exact_re < 1e-6
        && exact_te < 1e-9;
    outcome(
        pass,
        format!(
            "100 sets: max entry dev coarse {coarse_dev:.1e}, consensus {consensus_dev:.1e}, fuse {fuse_dev:.1e}, \
             svd vs quaternion oracle {oracle_dev:.1e} (tol 1e-9); noiseless RE {exact_re:.1e} deg (< 1e-6), \
             TE {exact_te:.1e} (< 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. local solve convergence

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let voxel = 0.05;
    let target = generate_base(Shape::CompositeRoom, 60_000, 600)
        .unwrap()
        .voxel_downsample(voxel)
        .unwrap()
        .estimate_normals(20)
        .unwrap();
    let target = PlaneTarget::new(target).unwrap();
    // independently sampled source surface; normals only for patch selection
    let source = generate_base(Shape::CompositeRoom, 60_000, 601)
        .unwrap()
        .voxel_downsample(voxel)
        .unwrap()
        .estimate_normals(20)
        .unwrap();
    let index = source.build_index().unwrap();
    let cfg = LocalSolveConfig::for_voxel(voxel);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_re, mut worst_te, mut worst_iters) = (0.0f64, 0.0f64, 0usize);
    let mut failures = Vec::new();
    let mut monotone = true;
    let mut redraws = 0;
    for p in 0..50 {
        // a patch must see planes of at least three orientations (the
        // smallest eigenvalue of its mean normal scatter is bounded away
        // from zero); single-plane or two-plane patches are unobservable
        // for any point-to-plane solver
        let patch = loop {
            let center = source.points()[rng.random_range(0..source.len())];
            let ids: Vec<usize> = index.within_radius(&center, 0.6).into_iter().map(|n| n.index).collect();
            let normals = source.normals().unwrap();
            let scatter = ids.iter().fold(Matrix3::zeros(), |m, &i| m + normals[i] * normals[i].transpose())
                / ids.len() as f64;
            if SymmetricEigen::new(scatter).eigenvalues.min() >= 0.05 {
                break source.select(&ids).without_normals();
            }
            redraws += 1;
        };
        let centroid = patch.centroid().unwrap();
        // 5° about a random axis through the patch centroid, then 5 cm
        let rot = RigidTransform::from_axis_angle(&unit(&mut rng), 5f64.to_radians(), Vector3::zeros());
        let shift = unit(&mut rng) * 0.05;
        let init = RigidTransform::new(*rot.rotation(), centroid.coords - rot.rotation() * centroid.coords + shift)
            .unwrap();
        let res = local_patch_optimize(p, &patch, &target, &init, &cfg).unwrap();
        let (re, te) = transform_errors(&res.transform, &RigidTransform::identity()).unwrap();
        monotone &= res.steps.iter().all(|(before, after)| after <= before);
        worst_re = worst_re.max(re);
        worst_te = worst_te.max(te);
        worst_iters = worst_iters.max(res.iterations);
        if !res.converged || re >= 0.5 || te >= 0.01 || res.iterations > 30 {
            failures.push(format!("patch {p} ({} pts): {:?} it {} RE {re:.3} TE {te:.4}", patch.len(), res.status, res.iterations));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && monotone && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "50 patches at 5 deg / 0.05 m ({redraws} unobservable draws skipped): worst RE {worst_re:.4} deg (< 0.5), TE {worst_te:.5} m (< 0.01), \
             iterations {worst_iters} (<= 30), monotone accepted steps: {monotone}; {elapsed:.2?} (< 60 s){}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Jacobian vs central differences

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(6..=40);
        let anchors = random_cloud(&mut rng, m, 1.0);
        let normals: Vec<Vector3<f64>> = (0..m).map(|_| unit(&mut rng)).collect();
        let target = PlaneTarget::new(PointCloud::with_normals(anchors, normals.clone()).unwrap()).unwrap();
        let patch = random_cloud(&mut rng, m, 1.0);
        let corr: Vec<PlaneCorrespondence> = (0..m)
            .map(|i| PlaneCorrespondence {
                source: i,
                anchor: (i * 7 + 3) % m,
                normal: normals[(i * 7 + 3) % m],
            })
            .collect();
        let t = random_rigid(&mut rng, PI, 2.0);
        let pivot = Point3::from(unit(&mut rng) * rng.random_range(0.0..2.0));
        let jac = residual_jacobian(&patch, &corr, &t, &pivot);
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..6 {
            let mut xi = Vector6::zeros();
            xi[k] = h;
            let plus = point_to_plane_residuals(&patch, &corr, &target, &perturb(&t, &xi, &pivot));
            let minus = point_to_plane_residuals(&patch, &corr, &target, &perturb(&t, &(-xi), &pivot));
            for (i, row) in jac.iter().enumerate() {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                num += (fd - row[k]).powi(2);
                den += row[k] * row[k];
            }
        }
        worst = worst.max((num / den).sqrt());
    }
    outcome(
        worst <= 1e-5,
        format!("100 random states, step 1e-6: worst relative Frobenius error {worst:.2e} (tol 1e-5)"),
    )
}

// ---------------------------------------------------------------------------
// 8–10. end to end on the default corpus

fn end_to_end() -> (Outcome, Outcome, Outcome) {
    let corpus = CorpusSpec::default();
    let config = PipelineConfig::default();

    let start = Instant::now();
    let ablation = run_ablation(&corpus, &config, 1).unwrap();
    let elapsed = start.elapsed();
    let summary = |mode| ablation.report(mode).unwrap().summary.clone();
    let (coarse, global, regions) = (
        summary(RefineMode::CoarseOnly),
        summary(RefineMode::GlobalOnly),
        summary(RefineMode::KeyRegions),
    );
    let mean = |v: Option<f64>| v.unwrap_or(f64::INFINITY);

    let c8 = outcome(
        regions.recall >= 0.90
            && mean(regions.mean_rotation_error_deg) <= 3.0
            && mean(regions.mean_translation_error_m) <= 0.05
            && elapsed < Duration::from_secs(300),
        format!(
            "recall {:.2} (>= 0.90), mean recalled RE {:.3} deg (<= 3), TE {:.4} m (<= 0.05), {} failures; \
             {elapsed:.1?} for all three modes (< 5 min)",
            regions.recall,
            mean(regions.mean_rotation_error_deg),
            mean(regions.mean_translation_error_m),
            regions.failures
        ),
    );

    let c9 = outcome(
        regions.recall >= global.recall && global.recall >= coarse.recall && regions.recall - coarse.recall >= 0.05,
        format!(
            "recall coarse-only {:.2} / global-only {:.2} / key-regions {:.2} (need regions >= global >= coarse \
             and regions - coarse >= 0.05); \
             mean RE {:.3} / {:.3} / {:.3} deg, TE {:.4} / {:.4} / {:.4} m",
            coarse.recall,
            global.recall,
            regions.recall,
            mean(coarse.mean_rotation_error_deg),
            mean(global.mean_rotation_error_deg),
            mean(regions.mean_rotation_error_deg),
            mean(coarse.mean_translation_error_m),
            mean(global.mean_translation_error_m),
            mean(regions.mean_translation_error_m),
        ),
    );

    let first = ablation.report(RefineMode::KeyRegions).unwrap().to_json_without_timings();
    let second = run_benchmark(&corpus, &config, 1).unwrap().to_json_without_timings();
    let c10 = outcome(
        first == second,
        format!(
            "two evaluations of the 50-pair corpus, seed {}: reports ({} bytes) bitwise {}",
            config.seed,
            first.len(),
            if first == second { "identical" } else { "different" }
        ),
    );
    (c8, c9, c10)
}

fn report(n: usize, o: &Outcome) {
    println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

/// `ACCEPTANCE_ONLY=6,7` restricts the run to the listed criteria.
fn selected() -> Vec<usize> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=10).collect(),
    }
}

fn main() {
    let only = selected();
    let unit_criteria: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    let mut results = Vec::new();
    for (n, run) in unit_criteria {
        if only.contains(&n) {
            let o = run();
            report(n, &o);
            results.push((n, o));
        }
    }
    if [8, 9, 10].iter().any(|n| only.contains(n)) {
        let (c8, c9, c10) = end_to_end();
        for (n, o) in [(8, c8), (9, c9), (10, c10)] {
            if only.contains(&n) {
                report(n, &o);
                results.push((n, o));
            }
        }
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria run pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
