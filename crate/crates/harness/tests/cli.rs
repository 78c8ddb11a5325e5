use std::process::Command;

fn pti() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pti"))
}

#[test]
fn invert_without_image_is_a_usage_error() {
    let out = pti().arg("invert").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--image"));
}

#[test]
fn unknown_subcommand_and_flag_fail() {
    assert!(!pti().arg("frobnicate").output().unwrap().status.success());
    assert!(!pti().args(["report", "--bogus"]).output().unwrap().status.success());
}

#[test]
fn unknown_experiment_is_rejected() {
    let out = pti().args(["experiment", "NoSuchStudy"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ReconTable"));
}

#[test]
fn missing_fixtures_name_the_build_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "fixtures = \"nothing-here\"\n").unwrap();
    let out = pti()
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["experiment", "ReconTable"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain"), "{err}");
}

#[test]
fn report_regenerates_summary_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("PivotDriftProbe");
    std::fs::create_dir_all(&run).unwrap();
    let results = r#"{
  "config_hash": "abc",
  "results": {
    "experiment": "PivotDriftProbe",
    "values": {"pivot_mse": 0.0001, "pivot_perceptual": 0.01, "pairwise_mse": 0.05, "pairs": 2016}
  }
}
"#;
    std::fs::write(run.join("results.json"), results).unwrap();
    let report = |expect: i32| {
        let out = pti().args(["--out", dir.path().to_str().unwrap(), "report"]).output().unwrap();
        assert_eq!(out.status.code(), Some(expect), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(run.join("summary.json")).unwrap()
    };
    let first = report(0);
    assert_eq!(report(0), first);

    std::fs::write(run.join("results.json"), results.replace("0.0001", "0.01")).unwrap();
    report(2);
}
