//! End-to-end command-line tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dwm")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("dwm-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn write_tiny_config(dir: &Path, extra_train: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{
  "bev": {{"w": 16, "h": 16, "c": 8}},
  "model": {{"width": 48, "layers": 1, "heads": 4}},
  "render": {{"z": 4, "c_prime": 8, "samples_train": 8, "samples_eval": 16}},
  "train": {{"seed": 9, "batch_size": 1, "steps_phase_a": 2, "steps_joint": 4{extra_train}}}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn make_data_is_byte_deterministic() {
    let dir = tmp_dir("determinism");
    let cfg = write_tiny_config(&dir, "");
    for out in ["a.bin", "b.bin"] {
        let o = run(&[
            "make-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.join(out).to_str().unwrap(),
            "--scenes",
            "2",
            "--seed",
            "7",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        std::fs::read(dir.join("a.bin")).unwrap(),
        std::fs::read(dir.join("b.bin")).unwrap()
    );
    assert!(dir.join("a.manifest.json").exists(), "human-readable manifest");
}

#[test]
fn zero_scenes_is_a_valid_dataset() {
    let dir = tmp_dir("empty");
    let cfg = write_tiny_config(&dir, "");
    let out = dir.join("empty.bin");
    let o = run(&[
        "make-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--scenes",
        "0",
        "--seed",
        "1",
    ]);
    assert!(o.status.success());
    let ds = dwm_core::toyworld::read_dataset(&out).unwrap();
    assert_eq!(ds.samples.len(), 0);
}

#[test]
fn invalid_config_exits_2_with_no_outputs() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"seed": 1, "nonsense_key": true}}"#).unwrap();
    let out_file = dir.join("data.bin");
    let o = run(&[
        "make-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_file.to_str().unwrap(),
        "--scenes",
        "1",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out_file.exists(), "invalid config must produce zero output files");
}

#[test]
fn missing_data_exits_3() {
    let dir = tmp_dir("missing");
    let cfg = write_tiny_config(&dir, "");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.join("nope.bin").to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_generate_roundtrip() {
    let dir = tmp_dir("roundtrip");
    let cfg = write_tiny_config(&dir, "");
    let data = dir.join("data.bin");
    assert!(run(&[
        "make-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--scenes",
        "2",
        "--seed",
        "3",
    ])
    .status
    .success());

    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("run/model.ckpt").exists());
    assert!(dir.join("run/metrics.csv").exists());
    assert!(dir.join("run/config.json").exists(), "resolved config provenance");

    // eval twice -> identical CSV
    for out in ["eval1", "eval2"] {
        let o = run(&[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            dir.join("run/model.ckpt").to_str().unwrap(),
            "--out",
            dir.join(out).to_str().unwrap(),
            "--dump-ply",
            "--allow-empty",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        std::fs::read(dir.join("eval1/eval_report.csv")).unwrap(),
        std::fs::read(dir.join("eval2/eval_report.csv")).unwrap()
    );
    // --dump-ply writes 2 * (delta_t + 1) files per scene
    let ply_count = std::fs::read_dir(dir.join("eval1/ply")).unwrap().count();
    assert_eq!(ply_count, 2 * 4 * 2, "2 scenes x 2 kinds x 4 horizons");

    // generation: different ego plans give different futures
    let gen = |ego: &str, out: &str| {
        let o = run(&[
            "generate",
            "--ckpt",
            dir.join("run/model.ckpt").to_str().unwrap(),
            "--scene-seed",
            "5",
            "--ego",
            ego,
            "--out",
            dir.join(out).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).trim().to_string()
    };
    let ans_a = gen("0,0,0;0,0,0;0,0,0", "gen_stop");
    let ans_b = gen("2,0,0;4,0,0;6,0,0", "gen_go");
    assert_eq!(ans_a, ans_b, "caption does not depend on the ego plan");
    let a3 = std::fs::read(dir.join("gen_stop/gen_3s.ply")).unwrap();
    let b3 = std::fs::read(dir.join("gen_go/gen_3s.ply")).unwrap();
    assert_ne!(a3, b3, "different ego plans must yield different future clouds");
    // frame 0 is not conditioned on the plan
    assert_eq!(
        std::fs::read(dir.join("gen_stop/gen_0s.ply")).unwrap(),
        std::fs::read(dir.join("gen_go/gen_0s.ply")).unwrap()
    );
}

#[test]
fn malformed_ego_plan_exits_2() {
    let dir = tmp_dir("badego");
    let cfg = write_tiny_config(&dir, "");
    let data = dir.join("data.bin");
    assert!(run(&["make-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--scenes", "1", "--seed", "2"]).status.success());
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", dir.join("run").to_str().unwrap(), "--phase", "joint", "--max-steps", "0"]).status.success());
    let ckpt = dir.join("run/model.ckpt");
    for bad in ["1,2;3,4;5,6", "1,2,3", "a,b,c;d,e,f;g,h,i"] {
        let o = run(&[
            "generate",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--scene-seed",
            "1",
            "--ego",
            bad,
            "--out",
            dir.join("g").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(2), "plan `{bad}` must be rejected");
    }
}

#[test]
fn undefined_metric_exits_4_unless_allowed() {
    let dir = tmp_dir("metric4");
    // surface threshold above any reachable weight sum: every cloud is empty
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
  "bev": {"w": 16, "h": 16, "c": 8},
  "model": {"width": 48, "layers": 1, "heads": 4},
  "render": {"z": 4, "c_prime": 8, "samples_train": 8, "samples_eval": 8, "surface_eps": 2.0},
  "train": {"seed": 9, "batch_size": 1, "steps_phase_a": 0, "steps_joint": 0}
}"#,
    )
    .unwrap();
    let data = dir.join("data.bin");
    assert!(run(&["make-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--scenes", "1", "--seed", "4"]).status.success());
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", dir.join("run").to_str().unwrap()]).status.success());
    let ckpt = dir.join("run/model.ckpt");
    let o = run(&["eval", "--data", data.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", dir.join("e1").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["eval", "--data", data.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap(), "--out", dir.join("e2").to_str().unwrap(), "--allow-empty"]);
    assert!(o.status.success());
}

#[test]
fn interrupted_training_resumes_bitwise() {
    let dir = tmp_dir("resume");
    let cfg = write_tiny_config(&dir, "");
    let data = dir.join("data.bin");
    assert!(run(&["make-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--scenes", "2", "--seed", "6"]).status.success());

    // uninterrupted joint run
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", dir.join("full").to_str().unwrap(), "--phase", "joint"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // interrupted after 2 of 4 steps, then resumed
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", dir.join("part").to_str().unwrap(), "--phase", "joint", "--max-steps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.join("part").to_str().unwrap(),
        "--phase",
        "joint",
        "--resume",
        dir.join("part/model.ckpt").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(
        std::fs::read(dir.join("full/model.ckpt")).unwrap(),
        std::fs::read(dir.join("part/model.ckpt")).unwrap(),
        "resumed checkpoint must match the uninterrupted run byte for byte"
    );
}
