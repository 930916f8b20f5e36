use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossreg::eval::transform_errors;
use crossreg::io::load_transform;
use crossreg::synth::Manifest;
use serde_json::Value;

fn crossreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sample_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample_corpus")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn info_prints_a_valid_default_config() {
    let out = crossreg(&["info"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let json = &text[text.find('{').unwrap()..];
    let cfg: Value = serde_json::from_str(json).unwrap();
    assert_eq!(cfg["keypoints"], 8);
    assert_eq!(cfg["patches"]["radius_factor"], 1.5);
    assert_eq!(cfg["voxel_size"], 0.05);
}

#[test]
fn self_registration_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = sample_corpus().join("pair_000_target.ply");
    let out = crossreg(&["register", s(&cloud), s(&cloud), "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let t = load_transform(dir.path().join("transform.txt")).unwrap();
    let (re, te) = transform_errors(&t, &crossreg::RigidTransform::identity()).unwrap();
    assert!(re < 0.1 && te < 0.005, "RE {re} TE {te}");
    assert!(dir.path().join("registered_source.ply").is_file());
    let result = read_json(&dir.path().join("result.json"));
    assert_eq!(result["mode"], "key-regions");
}

#[test]
fn corpus_pair_registers_within_recall_thresholds() {
    let corpus = sample_corpus();
    let manifest = Manifest::load(&corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for entry in &manifest.pairs {
        let out_dir = dir.path().join(&entry.id);
        let out = crossreg(&[
            "register",
            s(&corpus.join(&entry.source)),
            s(&corpus.join(&entry.target)),
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let t = load_transform(out_dir.join("transform.txt")).unwrap();
        let (re, te) = transform_errors(&t, &entry.ground_truth).unwrap();
        assert!(re < 15.0 && te < 0.3, "{}: RE {re} TE {te}", entry.id);
    }
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let missing = dir.path().join("nowhere.ply");
    let out = crossreg(&["register", s(&missing), s(&missing), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nowhere.ply"), "{}", stderr(&out));
    assert!(!out_dir.exists(), "no partial output");
}

#[test]
fn stage_failures_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.xyz");
    std::fs::write(&tiny, "0 0 0\n1 0 0\n0 1 0\n0 0 1\n1 1 1\n").unwrap();
    let out = crossreg(&["register", s(&tiny), s(&tiny), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), 11, "{}", stderr(&out));
    assert!(stderr(&out).contains("normals"), "{}", stderr(&out));
}

#[test]
fn unparsable_cloud_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ply");
    std::fs::write(&bad, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n").unwrap();
    let out = crossreg(&["register", s(&bad), s(&bad), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn invalid_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"local": {"max_iterations": 0}}"#).unwrap();
    let cloud = sample_corpus().join("pair_000_source.ply");
    let out = crossreg(&["register", s(&cloud), s(&cloud), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("local.max_iterations"), "{}", stderr(&out));

    std::fs::write(&cfg, r#"{"keypionts": 8}"#).unwrap();
    let out = crossreg(&["register", s(&cloud), s(&cloud), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("keypionts"), "{}", stderr(&out));
}

#[test]
fn conflicting_mode_flags_are_a_usage_error() {
    let cloud = sample_corpus().join("pair_000_source.ply");
    let out = crossreg(&["register", s(&cloud), s(&cloud), "--no-logo", "--go-only"]);
    assert_eq!(code(&out), 2);
    let out = crossreg(&["register", s(&cloud), s(&cloud), "--extractor", "sift"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_default_pair_count_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    // default pair count with small base clouds
    std::fs::write(&spec, r#"{"base_points": 1500}"#).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&crossreg(&["synth", s(&spec), "--out", s(&a)])), 0);
    assert_eq!(code(&crossreg(&["synth", s(&spec), "--out", s(&b)])), 0);
    assert_eq!(code(&crossreg(&["synth", s(&spec), "--seed", "99", "--out", s(&c)])), 0);
    let (ma, mb, mc) = (Manifest::load(&a).unwrap(), Manifest::load(&b).unwrap(), Manifest::load(&c).unwrap());
    assert_eq!(ma.pairs.len(), 50);
    let ply_files = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ply"))
        .count();
    assert_eq!(ply_files, 100);
    let truths = |m: &Manifest| m.pairs.iter().map(|p| p.ground_truth).collect::<Vec<_>>();
    assert_eq!(truths(&ma), truths(&mb));
    assert_ne!(truths(&ma), truths(&mc));
    assert_eq!(mc.spec.seed, 99);
}

#[test]
fn synth_rejects_invalid_spec_fields() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"source": {"density_keep_fraction": 1.5, "noise_sigma": 0.0,
        "overlap_fraction": 1.0, "outlier_fraction": 0.0, "outlier_scale": 0.0}}"#)
    .unwrap();
    let out = crossreg(&["synth", s(&spec), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("source.density_keep_fraction"), "{}", stderr(&out));
}

fn without_timings(mut report: Value) -> Value {
    report.as_object_mut().unwrap().remove("timings");
    report
}

#[test]
fn evaluate_is_deterministic_and_consistent_with_its_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    for r in [&r1, &r2] {
        let out = crossreg(&["evaluate", s(&sample_corpus()), "--seed", "3", "--out", s(r)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (a, b) = (read_json(&r1), read_json(&r2));
    assert_eq!(without_timings(a.clone()), without_timings(b));
    let recall = a["summary"]["recall"].as_f64().unwrap();

    // recount from the per-pair CSV
    let csv = std::fs::read_to_string(r1.with_extension("csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 2);
    let hits = rows
        .iter()
        .filter(|r| {
            let re: f64 = r[2].parse().unwrap_or(f64::INFINITY);
            let te: f64 = r[3].parse().unwrap_or(f64::INFINITY);
            re < 15.0 && te < 0.3
        })
        .count();
    assert_eq!(recall, hits as f64 / rows.len() as f64);
    assert_eq!(a["config"]["seed"], 3);
}

#[test]
fn evaluate_without_pairs_is_a_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossreg(&["evaluate", s(dir.path()), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn evaluate_reads_pair_directories_with_ground_truth_files() {
    let corpus = sample_corpus();
    let manifest = Manifest::load(&corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let entry = &manifest.pairs[0];
    let pair = dir.path().join("scene").join("pair");
    std::fs::create_dir_all(&pair).unwrap();
    // alphabetical order decides source vs target
    std::fs::copy(corpus.join(&entry.source), pair.join("a_source.ply")).unwrap();
    std::fs::copy(corpus.join(&entry.target), pair.join("b_target.ply")).unwrap();
    std::fs::write(pair.join("T_gt.txt"), crossreg::io::transform_to_text(&entry.ground_truth)).unwrap();
    let report = dir.path().join("r.json");
    let out = crossreg(&["evaluate", s(dir.path()), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&report)["summary"]["recall"], 1.0);
}

#[test]
fn mode_flags_select_the_refinement() {
    let dir = tempfile::tempdir().unwrap();
    for (flag, mode) in [("--no-logo", "coarse-only"), ("--go-only", "global-only")] {
        let report = dir.path().join(format!("{mode}.json"));
        let out = crossreg(&["evaluate", s(&sample_corpus()), flag, "--out", s(&report)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(read_json(&report)["mode"], mode);
    }
}

#[test]
fn ablation_reports_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("ablation.json");
    let out = crossreg(&["ablate", s(&sample_corpus()), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    for mode in ["coarse-only", "global-only", "key-regions"] {
        assert!(table.contains(mode), "{table}");
    }
    let json = read_json(&report);
    let recalls: Vec<f64> = json["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["summary"]["recall"].as_f64().unwrap())
        .collect();
    assert_eq!(recalls.len(), 3);
    assert!(recalls[2] >= recalls[0] && recalls[1] >= recalls[0], "{recalls:?}");
}

#[test]
fn ablation_saturates_on_an_easy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("easy.json");
    let identity = r#"{"density_keep_fraction": 1.0, "noise_sigma": 0.0, "overlap_fraction": 1.0,
        "outlier_fraction": 0.0, "outlier_scale": 0.0}"#;
    std::fs::write(
        &spec,
        format!(
            r#"{{"pairs": 2, "base_points": 6000, "rot_max_deg": 0.0, "trans_max": 0.0,
                "source": {identity}, "target": {identity}}}"#
        ),
    )
    .unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&crossreg(&["synth", s(&spec), "--out", s(&corpus)])), 0);
    let report = dir.path().join("ablation.json");
    let out = crossreg(&["ablate", s(&corpus), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for r in read_json(&report)["reports"].as_array().unwrap() {
        assert_eq!(r["summary"]["recall"], 1.0, "{}", r["mode"]);
    }
}
