use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epimatch::io::{read_match_csv, read_png};
use tempfile::TempDir;

fn epimatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epimatch"))
        .args(args)
        .env("EPIMATCH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = epimatch(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, json: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, json).unwrap();
        p
    }

    /// Two small procedural scenes with `views` views each.
    fn synth(&self, name: &str, views: usize) -> PathBuf {
        let cfg = self.config(
            &format!("{name}.json"),
            &format!(r#"{{"scenes": 2, "height": 56, "width": 70, "views_per_scene": {views}}}"#),
        );
        let out = self.path(name);
        ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&out)]);
        out
    }
}

const SMALL_TRAIN: &str = r#"{"epochs": 4, "embed_dim": 16, "heads": 2, "triplets_per_pair": 16,
    "pose_sampler": {"max_rotation": 0.017, "min_translation": 0.01, "max_translation": 0.015}}"#;

#[test]
fn synth_identity_pose_reproduces_source() {
    let fx = Fixture::new();
    let cfg = fx.config(
        "id.json",
        r#"{"scenes": 1, "height": 56, "width": 70, "views_per_scene": 1,
            "pose_sampler": {"max_rotation": 0.0, "min_translation": 0.0, "max_translation": 0.0},
            "photometric": {"brightness": 0.0, "saturation": 0.0},
            "depth_scale_range": [1.0, 1.0]}"#,
    );
    let out = fx.path("out");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    let scene = out.join("scene_000");
    assert_eq!(
        std::fs::read(scene.join("image.png")).unwrap(),
        std::fs::read(scene.join("view_000.png")).unwrap()
    );
    let gt = read_match_csv(&scene.join("view_000_gt.csv")).unwrap();
    assert_eq!(gt.len(), 56 * 70);
    assert!(gt.iter().all(|m| m.p_s == m.p_t));
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn synth_is_reproducible_and_layout_is_complete() {
    let fx = Fixture::new();
    let a = fx.synth("a", 2);
    let b = fx.synth("b", 2);
    for rel in [
        "scene_000/image.png",
        "scene_000/depth.dpt",
        "scene_000/intrinsics.json",
        "scene_001/view_001.png",
        "scene_001/view_001.dpt",
        "scene_001/view_001_gt.csv",
        "scene_001/view_001_pose.json",
    ] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let gt = std::fs::read_to_string(a.join("scene_000/view_000_gt.csv")).unwrap();
    assert!(gt.starts_with("us,vs,ut,vt\n"));
    let row = gt.lines().nth(1).unwrap();
    assert!(row.split(',').all(|f| f.split('.').nth(1).is_some_and(|d| d.len() == 6)), "{row}");
}

#[test]
fn synth_missing_depth_names_the_file() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 1);
    let broken = scenes.join("scene_000");
    std::fs::remove_file(broken.join("depth.dpt")).unwrap();
    let out = epimatch(&["synth", "--input", s(&broken), "--out", s(&fx.path("out"))]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("depth.dpt"), "{msg}");
}

#[test]
fn unknown_config_fields_and_bad_flags_exit_2() {
    let fx = Fixture::new();
    let cfg = fx.config("bad.json", r#"{"scenes": 1, "colour": true}"#);
    let out = epimatch(&["synth", "--config", s(&cfg), "--out", s(&fx.path("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(epimatch(&["synth", "--bogus"]).status.code(), Some(2));
}

#[test]
fn train_is_bit_reproducible_with_learning_rate_switch() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 1);
    let cfg = fx.config("train.json", SMALL_TRAIN);
    for run in ["a", "b"] {
        ok(&["train", "--config", s(&cfg), "--data", s(&scenes), "--out", s(&fx.path(run))]);
    }
    let ckpt = |run: &str| std::fs::read(fx.path(run).join("checkpoint.epiw")).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));
    let log = std::fs::read_to_string(fx.path("a").join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,mean_loss,n_triplets");
    assert_eq!(lines.len(), 1 + 4);
    let lr: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lr, vec![1e-4, 1e-4, 1e-4, 5e-5]);
}

#[test]
fn train_rejects_empty_data_and_reports_stalls() {
    let fx = Fixture::new();
    let empty = fx.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = epimatch(&["train", "--data", s(&empty), "--out", s(&fx.path("o1"))]);
    assert_eq!(out.status.code(), Some(2));

    // Motions that carry every pixel out of view leave nothing to mine.
    let scenes = fx.synth("scenes", 1);
    let cfg = fx.config(
        "far.json",
        r#"{"epochs": 3, "embed_dim": 16, "heads": 2,
            "pose_sampler": {"max_rotation": 0.0, "min_translation": 50.0, "max_translation": 50.0}}"#,
    );
    let out = epimatch(&["train", "--config", s(&cfg), "--data", s(&scenes), "--out", s(&fx.path("o2"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(fx.path("o2").join("manifest.json")).unwrap();
    assert!(manifest.contains("training stalled"));
}

#[test]
fn baseline_self_match_and_unrefined_centers() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 1);
    let img = scenes.join("scene_000/image.png");
    let cfg = fx.config("p.json", r#"{"embed_dim": 32}"#);
    let out = fx.path("self");
    ok(&["match", "--baseline", "--config", s(&cfg), "--source", s(&img), "--target", s(&img), "--json", "--out", s(&out)]);
    let m = read_match_csv(&out.join("matches.csv")).unwrap();
    assert_eq!(m.len(), 4 * 5);
    for c in &m {
        assert_eq!(c.score, Some(1.0));
        assert_eq!(c.p_s, c.p_t);
    }
    assert!(std::fs::read_to_string(out.join("matches.json")).unwrap().contains("elapsed_ms"));

    let view = scenes.join("scene_000/view_000.png");
    let run = |name: &str| {
        let out = fx.path(name);
        ok(&["match", "--baseline", "--no-refine", "--config", s(&cfg), "--source", s(&img), "--target", s(&view), "--out", s(&out)]);
        std::fs::read(out.join("matches.csv")).unwrap()
    };
    let first = run("nr1");
    assert_eq!(first, run("nr2"));
    let m = read_match_csv(&fx.path("nr1").join("matches.csv")).unwrap();
    assert!(!m.is_empty());
    for c in &m {
        for v in [c.p_s.u, c.p_s.v, c.p_t.u, c.p_t.v] {
            assert_eq!((v - 7.0).rem_euclid(14.0), 0.0, "{v}");
        }
    }
}

#[test]
fn match_needs_checkpoint_or_baseline_and_consistent_shapes() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 1);
    let img = scenes.join("scene_000/image.png");
    let out = epimatch(&["match", "--source", s(&img), "--target", s(&img), "--out", s(&fx.path("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let other = fx.path("other");
    ok(&["synth", "--config", s(&fx.config("o.json", r#"{"scenes": 1, "height": 42, "width": 56, "views_per_scene": 1}"#)), "--out", s(&other)]);
    let feat_dir = fx.path("feat");
    std::fs::create_dir_all(&feat_dir).unwrap();
    let fm = epimatch::embedding::pseudo_backbone(&read_png(&img).unwrap(), 14, 16, 0).unwrap();
    let feat = feat_dir.join("a.feat");
    epimatch::io::write_features(&fm, &feat).unwrap();
    let small = other.join("scene_000/image.png");
    let out = epimatch(&[
        "match", "--baseline", "--source", s(&feat), "--source-image", s(&small), "--target", s(&small), "--out", s(&fx.path("o2")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_of_ground_truth_has_full_precision() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 2);
    let out = fx.path("eval");
    let gt_csv = scenes.join("scene_000/view_000_gt.csv");
    ok(&[
        "eval",
        "--matches", s(&gt_csv),
        "--pose", s(&scenes.join("scene_000/view_000_pose.json")),
        "--intrinsics", s(&scenes.join("scene_000/intrinsics.json")),
        "--out", s(&out),
    ]);
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("metric,mean,std,n\n"));
    assert!(agg.contains("\nprecision,100.000000,"), "{agg}");

    let gt_dir = fx.path("gt_only");
    for scene in ["scene_000", "scene_001"] {
        std::fs::create_dir_all(gt_dir.join(scene)).unwrap();
        for v in ["view_000", "view_001"] {
            let name = format!("{v}_gt.csv");
            std::fs::copy(scenes.join(scene).join(&name), gt_dir.join(scene).join(&name)).unwrap();
        }
    }
    let out = fx.path("eval_dir");
    ok(&["eval", "--matches", s(&gt_dir), "--gt", s(&scenes), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"].as_array().unwrap().len(), 4);
    assert_eq!(report["aggregate"]["precision"]["mean"], 100.0);
    assert_eq!(report["pairs"][0]["id"], "scene_000/view_000_gt");
    assert!(report["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn eval_names_malformed_line_and_rejects_empty_sets() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 1);
    let bad = fx.config("bad.csv", "us,vs,ut,vt,score\n1,2,3,4,0.9\n1,2,x,4,0.9\n");
    let out = epimatch(&[
        "eval",
        "--matches", s(&bad),
        "--pose", s(&scenes.join("scene_000/view_000_pose.json")),
        "--intrinsics", s(&scenes.join("scene_000/intrinsics.json")),
        "--out", s(&fx.path("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("bad.csv:3"), "{msg}");

    let empty = fx.path("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = epimatch(&["eval", "--matches", s(&empty), "--gt", s(&scenes), "--out", s(&fx.path("o2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_with_too_few_matches_flags_undefined_metrics() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 1);
    let few = fx.config("few.csv", "us,vs,ut,vt,score\n10,10,11,10,0.99\n20,30,21,30,0.98\n");
    let out = fx.path("o");
    ok(&[
        "eval",
        "--matches", s(&few),
        "--pose", s(&scenes.join("scene_000/view_000_pose.json")),
        "--intrinsics", s(&scenes.join("scene_000/intrinsics.json")),
        "--out", s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let undefined = report["pairs"][0]["report"]["undefined"].as_object().unwrap();
    assert!(undefined.contains_key("inlier_percentage"));
    assert!(undefined.contains_key("fundamental_error"));
}

#[test]
fn eval_sequence_pairs_frames_at_stride() {
    assert_eq!(epimatch_cli::commands::eval::stride_pairs(18, 16), vec![(0, 16), (1, 17)]);
    assert!(epimatch_cli::commands::eval::stride_pairs(16, 16).is_empty());

    let fx = Fixture::new();
    let cfg = fx.config(
        "seq.json",
        r#"{"scenes": 1, "height": 56, "width": 70, "views_per_scene": 18,
            "pose_sampler": {"max_rotation": 0.01, "min_translation": 0.01, "max_translation": 0.02}}"#,
    );
    let scenes = fx.path("scenes");
    ok(&["synth", "--config", s(&cfg), "--out", s(&scenes)]);
    let seq = fx.path("seq");
    std::fs::create_dir_all(&seq).unwrap();
    let scene = scenes.join("scene_000");
    std::fs::copy(scene.join("intrinsics.json"), seq.join("intrinsics.json")).unwrap();
    for k in 0..18 {
        for ext in [".png", "_pose.json"] {
            let name = format!("view_{k:03}{ext}");
            std::fs::copy(scene.join(&name), seq.join(&name)).unwrap();
        }
    }
    let pcfg = fx.config("p.json", r#"{"embed_dim": 16}"#);
    let out = fx.path("eval");
    ok(&["eval", "--sequence", s(&seq), "--stride", "16", "--baseline", "--config", s(&pcfg), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let ids: Vec<&str> = report["pairs"].as_array().unwrap().iter().map(|p| p["id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["view_000-view_016", "view_001-view_017"]);
    assert_eq!(report["pairs"][0]["report"]["elapsed_ms"], 0.0);

    let out = epimatch(&["eval", "--sequence", s(&seq), "--stride", "18", "--baseline", "--out", s(&fx.path("e2"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_table_has_six_configuration_rows() {
    let fx = Fixture::new();
    let cfg = fx.config(
        "ablate.json",
        r#"{"height": 56, "width": 70, "train_scenes": 2, "test_scenes": 2, "test_pairs_per_scene": 2, "fixed_pose_count": 2,
            "train": {"epochs": 3, "embed_dim": 16, "heads": 2, "triplets_per_pair": 8,
                      "pose_sampler": {"max_rotation": 0.017, "min_translation": 0.01, "max_translation": 0.015}}}"#,
    );
    let out = fx.path("abl");
    ok(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "study,config,epipolar_error_mean,epipolar_error_std,precision_mean,precision_std,n_matches"
    );
    let configs: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(
        configs,
        ["baseline", "+adaptation", "+refinement", "+upsampling", "random_poses", "fixed_poses"]
    );
    for f in ["random_poses.epiw", "fixed_poses.epiw", "random_poses_loss.csv", "fixed_poses_loss.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn robustness_requires_two_scenes_and_separates_settings() {
    let fx = Fixture::new();
    let scenes = fx.synth("scenes", 2);
    let cfg = fx.config("p.json", r#"{"embed_dim": 32}"#);
    let out = epimatch(&[
        "robustness", "--baseline", "--config", s(&cfg), "--scenes", s(&scenes.join("scene_000")), "--out", s(&fx.path("o1")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = fx.path("rob");
    ok(&["robustness", "--baseline", "--config", s(&cfg), "--scenes", s(&scenes), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("robustness.csv")).unwrap();
    let lines: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines[0], ["setting", "n_pairs", "n_matches", "n_inliers"]);
    assert_eq!(lines[1][0], "cross_scene");
    assert_eq!(lines[2][0], "overlapping");
    let n = |row: &Vec<&str>, col: usize| row[col].parse::<usize>().unwrap();
    assert!(n(&lines[1], 2) < n(&lines[2], 2), "{csv}");
    assert!(n(&lines[1], 3) < n(&lines[2], 3), "{csv}");
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let fx = Fixture::new();
    let a = fx.synth("a", 1);
    let b = fx.path("b");
    ok(&["rerun", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    let ma: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["config"], mb["config"]);
    assert_eq!(ma["seed"], 5);
    assert!(!ma["outputs"].as_object().unwrap().is_empty());
}
