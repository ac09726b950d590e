use std::path::Path;
use std::process::{Command, Output};

use docforge::layout::read_layouts;
use docforge::pipeline::PipelineConfig;
use image::GrayImage;

fn docforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docforge")).args(args).output().unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap_or("")).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn write_config(dir: &Path, config: &PipelineConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_json().unwrap()).unwrap();
    path.display().to_string()
}

fn save_mask(dir: &Path, name: &str, w: u32, h: u32, v: &[u8]) -> String {
    let path = dir.join(name);
    GrayImage::from_raw(w, h, v.to_vec()).unwrap().save(&path).unwrap();
    path.display().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = docforge(&["corpus-gen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "usage");
    assert!(rec["message"].as_str().unwrap().contains("--bogus"));
}

#[test]
fn missing_config_file_names_the_path() {
    let out = docforge(&["run", "--config", "missing.file", "--out", "x"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("missing.file"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"seed": 1}"#).unwrap();
    let out = docforge(&["corpus-gen", "--config", path.to_str().unwrap(), "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("version"));

    std::fs::write(&path, r#"{"version": 1, "sede": 1}"#).unwrap();
    let out = docforge(&["corpus-gen", "--config", path.to_str().unwrap(), "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("sede"));
}

#[test]
fn corpus_gen_honors_the_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.corpus.size = 30;
    let cfg = write_config(dir.path(), &config);
    let path = |n: &str| dir.path().join(n).display().to_string();
    for (name, seed) in [("a.json", "1"), ("b.json", "1"), ("c.json", "2")] {
        let out = docforge(&["corpus-gen", "--config", &cfg, "--seed", seed, "--out", &path(name)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |n: &str| std::fs::read(path(n)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
    assert_eq!(read_layouts(path("a.json")).unwrap().len(), 30);
    let manifest: serde_json::Value = serde_json::from_slice(&read("a.json.manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["command"], "corpus-gen");
}

#[test]
fn metrics_of_identical_masks_are_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let a = save_mask(dir.path(), "a.png", 3, 2, &[0, 1, 2, 3, 1, 0]);
    let out = docforge(&["metrics", "--pred", &a, "--truth", &a]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["accuracy"], 1.0);
    assert_eq!(m["macro_f1"], 1.0);
}

#[test]
fn metrics_hand_case_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let truth = save_mask(dir.path(), "t.png", 2, 2, &[0, 0, 1, 1]);
    let pred = save_mask(dir.path(), "p.png", 2, 2, &[0, 1, 1, 1]);
    let out = docforge(&["metrics", "--pred", &pred, "--truth", &truth]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["accuracy"], 0.75);
    assert!((m["per_class"][1]["f1"].as_f64().unwrap() - 0.8).abs() < 1e-12);

    let wide = save_mask(dir.path(), "w.png", 4, 1, &[0, 0, 1, 1]);
    let out = docforge(&["metrics", "--pred", &wide, "--truth", &truth]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "input");
}

#[test]
fn decorate_then_verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).display().to_string();
    let mut config = PipelineConfig::default();
    config.corpus.size = 3;
    let cfg = write_config(dir.path(), &config);
    assert!(docforge(&["corpus-gen", "--config", &cfg, "--out", &path("l.json")]).status.success());
    let out = docforge(&["decorate", "--config", &cfg, "--layouts", &path("l.json"), "--out", &path("ds")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ds/step_manifest.json").exists());
    assert!(docforge(&["verify", "--dir", &path("ds")]).status.success());

    let page = std::fs::read_dir(dir.path().join("ds/pages")).unwrap().next().unwrap().unwrap().path();
    std::fs::write(&page, b"not a png").unwrap();
    let out = docforge(&["verify", "--dir", &path("ds")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_with_an_impossible_margin_exits_with_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::default();
    config.page.width = 320;
    config.page.height = 400;
    config.corpus.size = 200;
    config.dlg.epochs = 1;
    config.dlg.validity_samples = 4;
    config.dlg.model.dim = 16;
    config.dlg.model.heads = 2;
    config.dlg.model.hidden = 16;
    config.dlg.model.ff_hidden = 16;
    config.quality.pages_per_class = 50;
    config.cross_domain.pages_per_class = 50;
    config.quality.train.epochs = 1;
    config.cross_domain.train.epochs = 1;
    config.quality.tau = 2.0;
    config.batch = 8;
    config.max_rounds = 1;
    let cfg = write_config(dir.path(), &config);
    let out_dir = dir.path().join("run").display().to_string();
    let out = docforge(&["run", "--config", &cfg, "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_record(&out)["error"], "quota_shortfall");
    assert!(dir.path().join("run/run_manifest.json").exists());
}
