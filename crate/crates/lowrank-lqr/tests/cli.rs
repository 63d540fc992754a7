//! Thin checks of the command-line surface: exit codes, output layout, and
//! the exact CSV header.

use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_lowrank-lqr");

fn small_config(out_dir: &std::path::Path) -> String {
    format!(
        r#"{{
            "h": 5, "k": 20, "delta": 0.05, "c": 1.0, "c_w": 0.05, "r": 0.9,
            "warmup_override": 5, "search_budget": 10, "seed": 7, "n_seeds": 1,
            "out_dir": {:?}, "lowrank_m": [2], "fulldim": true,
            "env": {{"generator": {{"d": 6, "d_u": 2, "m": 2}}}}
        }}"#,
        out_dir
    )
}

#[test]
fn run_writes_csvs_with_exact_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, small_config(&out)).unwrap();

    let status = Command::new(BIN).arg("run").arg(&cfg).status().unwrap();
    assert!(status.success());

    let mut run_files = 0;
    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name.starts_with("run_") {
            run_files += 1;
            let text = std::fs::read_to_string(&path).unwrap();
            assert_eq!(
                text.lines().next().unwrap(),
                "episode,optimal_cost,policy_cost,regret,cum_regret,proj_err,G,beta,truth_in_region,delta_pp,seed,mode"
            );
            assert_eq!(text.lines().count(), 21);
        }
    }
    assert_eq!(run_files, 2, "one CSV per (mode, seed)");
    assert!(out.join("aggregate.csv").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let text = small_config(tmp.path()).replace("\"h\": 5", "\"h\": 5, \"typo_key\": 1");
    std::fs::write(&cfg, text).unwrap();
    let status = Command::new(BIN).arg("run").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_4() {
    let status = Command::new(BIN)
        .arg("run")
        .arg("/nonexistent/config.json")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn invalid_dimensions_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    // m > d is rejected at validation time.
    let text = small_config(tmp.path()).replace(r#""m": 2"#, r#""m": 9"#);
    std::fs::write(&cfg, text).unwrap();
    let status = Command::new(BIN).arg("run").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn verify_riccati_smoke() {
    let out = Command::new(BIN)
        .args(["verify-riccati", "--seed", "3", "--cases", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("pass"),
        "expected per-case lines, got: {}",
        text
    );
}

#[test]
fn spectrum_and_coverage_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, small_config(&out)).unwrap();

    let status = Command::new(BIN)
        .args(["spectrum"])
        .arg(&cfg)
        .args(["--samples", "500"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("spectrum.csv").exists());

    let cov = Command::new(BIN)
        .args(["coverage"])
        .arg(&cfg)
        .args(["--trials", "3"])
        .output()
        .unwrap();
    assert!(cov.status.success());
    assert!(String::from_utf8_lossy(&cov.stdout).contains("covered"));
}
