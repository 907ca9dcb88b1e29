use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plansense::cost::CostModel;
use plansense::metrics::sensitivity_of_detections;
use plansense::scene::Scene;
use plansense::sim::{perturb_detections, PerturbationSpec};
use serde_json::Value;

fn plansense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plansense")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = plansense(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn csv_body(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config: "));
    lines.skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

fn toy_scenes(root: &Path, count: &str, agents: &str) -> PathBuf {
    let dir = root.join(format!("toy_{count}_{agents}"));
    ok(&["--out", &s(&dir), "scenes", "generate", "--count", count, "--agents", agents, "--episode", "10"]);
    dir
}

#[test]
fn empty_scene_directory_is_an_input_error() {
    let root = tempfile::tempdir().unwrap();
    let empty = root.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = plansense(&["--out", &s(&root.path().join("o")), "fit", "--scenes", &s(&empty)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no scene files"));
}

#[test]
fn missing_model_and_bad_flags_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let scenes = toy_scenes(root.path(), "1", "1");
    let missing = root.path().join("nope.json");
    let out = plansense(&["--out", &s(&root.path().join("o")), "reopt", "--scenes", &s(&scenes), "--model", &s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(plansense(&["scenes", "generate", "--feature-set", "drive9"]).status.code(), Some(2));
    assert_eq!(plansense(&["--jobs", "0", "model"]).status.code(), Some(2));
}

#[test]
fn malformed_scene_is_named() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("bad");
    std::fs::create_dir(&dir).unwrap();
    std::fs::write(dir.join("broken.json"), "{\"dt\": 0.5}").unwrap();
    let out = plansense(&["--out", &s(&root.path().join("o")), "fit", "--scenes", &s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.json"));
}

#[test]
fn generated_scenes_are_seeded_and_record_their_config() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("s");
    ok(&["--out", &s(&dir), "--seed", "7", "scenes", "generate", "--count", "3", "--agents", "0", "--episode", "6"]);
    let names: Vec<String> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    let mut names = names;
    names.sort();
    assert_eq!(names, ["scene_000007.json", "scene_000008.json", "scene_000009.json"]);
    let scene = Scene::load(&dir.join("scene_000008.json")).unwrap();
    assert!(scene.agents.is_empty());
    assert_eq!(scene.ego.len(), 7);
    let meta = scene.meta.unwrap();
    assert_eq!(meta["config"]["seed"], 7);
    assert_eq!(meta["scene_seed"], 8);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let root = tempfile::tempdir().unwrap();
    let read = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    let a = root.path().join("a");
    let b = root.path().join("b");
    for (dir, jobs) in [(&a, "1"), (&b, "3")] {
        ok(&["--out", &s(dir), "--jobs", jobs, "scenes", "generate", "--count", "4", "--episode", "8"]);
    }
    assert_eq!(read(&a), read(&b));
}

#[test]
fn drive_fit_writes_six_weights() {
    let root = tempfile::tempdir().unwrap();
    let scenes = root.path().join("d");
    ok(&["--out", &s(&scenes), "scenes", "generate", "--count", "4", "--agents", "1", "--feature-set", "drive6", "--episode", "12"]);
    let out = root.path().join("fit");
    ok(&["--out", &s(&out), "fit", "--scenes", &s(&scenes), "--feature-set", "drive6"]);
    let model = json(&out.join("model.json"));
    assert_eq!(model["model"]["theta"].as_array().unwrap().len(), 6);
    assert_eq!(model["config"]["command"], "fit");
    let report = json(&out.join("fit_report.json"));
    assert_eq!(report["report"]["demos"], 4);
    assert!(report["report"]["planted_cosine"].as_f64().is_some());
}

#[test]
fn quartile_buckets_partition_the_agents() {
    let root = tempfile::tempdir().unwrap();
    let scenes = toy_scenes(root.path(), "5", "3");
    let model = root.path().join("m");
    ok(&["--out", &s(&model), "model"]);
    let out = root.path().join("e");
    ok(&[
        "--out", &s(&out), "evaluate", "--mode", "pred", "--scenes", &s(&scenes), "--model", &s(&model.join("model.json")),
        "--striate", "quartiles",
    ]);
    let agents = csv_body(&out.join("metrics.csv")).iter().filter(|r| r[1] == "ade").count();
    assert_eq!(agents, 15);
    let buckets = csv_body(&out.join("buckets.csv"));
    let ade: Vec<_> = buckets.iter().filter(|r| r[0] == "ade").collect();
    assert_eq!(ade.len(), 4);
    assert_eq!(ade.iter().map(|r| r[4].parse::<usize>().unwrap()).sum::<usize>(), agents);
}

#[test]
fn toward_prediction_costs_more_than_away() {
    let root = tempfile::tempdir().unwrap();
    let scenes = root.path().join("h");
    ok(&["--out", &s(&scenes), "scenes", "head-on"]);
    let model = root.path().join("m");
    ok(&["--out", &s(&model), "model", "--theta", "40,160,15,17", "--horizon", "8"]);
    let mut pi = Vec::new();
    let mut raw = Vec::new();
    for side in ["toward", "away"] {
        let out = root.path().join(side);
        ok(&[
            "--out", &s(&out), "evaluate", "--mode", "pred", "--frame", "0", "--scenes", &s(&scenes),
            "--model", &s(&model.join("model.json")), "--predictions", &s(&scenes.join(side)),
        ]);
        let report = json(&out.join("evaluate_pred.json"));
        let ade = &report["metrics"][0];
        assert_eq!(ade["metric"], "ade");
        raw.push(ade["raw"].as_f64().unwrap());
        pi.push(ade["pi"].as_f64().unwrap());
    }
    assert!((raw[0] - raw[1]).abs() <= 1e-15);
    assert!(pi[0] > 1.1 * pi[1], "{pi:?}");
}

#[test]
fn zero_sensitivity_keeps_pi_ap_equal_to_ap() {
    let root = tempfile::tempdir().unwrap();
    let scenes = toy_scenes(root.path(), "3", "2");
    // without agent terms every sensitivity is zero
    let model = root.path().join("m");
    ok(&["--out", &s(&model), "model", "--theta", "1,4,0,0"]);
    let out = root.path().join("e");
    ok(&["--out", &s(&out), "evaluate", "--mode", "det", "--scenes", &s(&scenes), "--model", &s(&model.join("model.json"))]);
    for row in csv_body(&out.join("ap.csv")) {
        assert_eq!(row[2], row[3], "{row:?}");
    }
}

#[test]
fn zero_noise_sweep_is_the_baseline_sensitivity() {
    let root = tempfile::tempdir().unwrap();
    let scenes = toy_scenes(root.path(), "2", "2");
    let model_dir = root.path().join("m");
    ok(&["--out", &s(&model_dir), "model"]);
    let out = root.path().join("sw");
    ok(&[
        "--out", &s(&out), "noise-sweep", "--scenes", &s(&scenes), "--model", &s(&model_dir.join("model.json")),
        "--grid", "0", "--trials", "3", "--frames", "0,4",
    ]);
    let model = CostModel::from_json(&json(&model_dir.join("model.json"))["model"].to_string()).unwrap();
    let mut all = Vec::new();
    for entry in std::fs::read_dir(&scenes).unwrap() {
        let scene = Scene::load(&entry.unwrap().path()).unwrap();
        for frame in [0, 4] {
            let dets = perturb_detections(&scene, frame, &PerturbationSpec { sigma: 0.0, seed: 0 }).unwrap();
            all.extend(sensitivity_of_detections(&model, &scene, &scene.ego, &dets).unwrap().magnitudes());
        }
    }
    let baseline = all.iter().sum::<f64>() / all.len() as f64;
    let got = json(&out.join("sweep.json"))["points"][0]["mean"].as_f64().unwrap();
    assert!((got - baseline).abs() <= 1e-12 * baseline.max(1.0), "{got} vs {baseline}");
}

#[test]
fn reopt_writes_one_file_per_scene_and_a_summary() {
    let root = tempfile::tempdir().unwrap();
    let scenes = root.path().join("d");
    ok(&["--out", &s(&scenes), "scenes", "generate", "--count", "2", "--agents", "1", "--feature-set", "drive6", "--noise", "0", "--episode", "12"]);
    let model = root.path().join("m");
    ok(&["--out", &s(&model), "model", "--feature-set", "drive6"]);
    let out = root.path().join("r");
    ok(&["--out", &s(&out), "reopt", "--scenes", &s(&scenes), "--model", &s(&model.join("model.json"))]);
    assert!(out.join("reopt/scene_000000.json").is_file());
    assert!(out.join("reopt/scene_000001.json").is_file());
    let rows = csv_body(&out.join("reopt_summary.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        let err: f64 = r[1].parse::<f64>().unwrap().max(r[2].parse().unwrap());
        assert!(err <= 0.05, "{r:?}");
    }
}
