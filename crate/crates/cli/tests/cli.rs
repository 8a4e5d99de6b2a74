use std::path::Path;
use std::process::Command;

fn medmap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_medmap")).args(args).output().unwrap()
}

const TINY: &str = "height = 16\nwidth = 16\nn_samples = 24\nepochs = 1\nbatch_size = 4\nbase_channels = 2\nlatent_dim = 8\ndepth = 2\ndecoder_channels = 8\n";

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn help_lists_flags() {
    let out = medmap(&["train", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--config", "--out", "--seed", "--regime", "--medmap", "--anchor", "--alpha", "--set"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn unknown_flags_and_keys_are_config_errors() {
    assert_eq!(medmap(&["train", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let st = medmap(&["train", "--out", &out, "--seed", "0", "--set", "alhpa=1"]);
    assert_eq!(st.status.code(), Some(2));
    // seeds are mandatory
    let st = medmap(&["train", "--out", &out]);
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let st = medmap(&["eval", "--checkpoint", "/nonexistent/model.mmckpt"]);
    assert_eq!(st.status.code(), Some(3));
}

#[test]
fn train_eval_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let runs = dir.path().join("runs").display().to_string();
    for medmap_flag in ["on", "off"] {
        let st = medmap(&["train", "--config", &cfg, "--out", &runs, "--seed", "1", "--regime", "sls", "--medmap", medmap_flag]);
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    }
    let on = dir.path().join("runs/sls_adaptive_medmap-on_seed1");
    let off = dir.path().join("runs/sls_adaptive_medmap-off_seed1");
    let metrics = std::fs::read_to_string(on.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"align\""));
    assert!(!std::fs::read_to_string(off.join("metrics.json")).unwrap().contains("\"align\""));
    assert!(std::fs::read_to_string(on.join("config.cfg")).unwrap().contains("alpha = 0.125"));

    let ckpt = on.join("model.mmckpt").display().to_string();
    let eval_dir = dir.path().join("eval").display().to_string();
    let st = medmap(&["eval", "--config", &cfg, "--checkpoint", &ckpt, "--out", &eval_dir]);
    assert!(st.status.success());
    let csv = std::fs::read_to_string(dir.path().join("eval/dice.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",o") || l.contains(",x")).count(), 15);

    let st = medmap(&["gap", "--config", &cfg, "--checkpoint", &ckpt]);
    assert!(st.status.success());
    assert!(on.join("gap.json").is_file());

    let report = dir.path().join("report").display().to_string();
    let st = medmap(&["report", on.to_str().unwrap(), off.to_str().unwrap(), "--out", &report]);
    assert!(st.status.success());
    assert!(dir.path().join("report/delta_sls_adaptive_medmap-on_seed1.csv").is_file());
}

#[test]
fn gen_data_and_theory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data").display().to_string();
    let st = medmap(&["gen-data", "--out", &data, "--n-samples", "3", "--set", "height=16", "--set", "width=16"]);
    assert!(st.status.success());
    assert!(dir.path().join("data/manifest.json").is_file());

    let out = dir.path().join("theory").display().to_string();
    assert_eq!(medmap(&["theory", "--out", &out]).status.code(), Some(2));
    let st = medmap(&["theory", "--out", &out, "--seed", "0", "--instances", "20", "--sigmas", "0,1"]);
    assert!(st.status.success());
    let report = std::fs::read_to_string(dir.path().join("theory/theory_seed0.json")).unwrap();
    assert!(report.contains("counterexample_count"));
}
