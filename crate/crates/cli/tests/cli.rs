use std::path::Path;
use std::process::{Command, Output};

fn vinit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vinit"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&vinit(&["--help"])), 0);
    assert_eq!(code(&vinit(&["--version"])), 0);
    assert_eq!(code(&vinit(&[])), 3);
    assert_eq!(code(&vinit(&["batch"])), 3);
    assert_eq!(code(&vinit(&["frobnicate"])), 3);
}

#[test]
fn bad_config_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let unknown = write(&dir.path().join("a.toml"), "bogus = 1\n");
    assert_eq!(
        code(&vinit(&["batch", "--config", &unknown, "--out", out])),
        3
    );
    let invalid = write(&dir.path().join("b.toml"), "m = 500\nM = 100\n");
    assert_eq!(
        code(&vinit(&["batch", "--config", &invalid, "--out", out])),
        3
    );
    let empty = write(&dir.path().join("c.toml"), "");
    assert_eq!(
        code(&vinit(&["batch", "--config", &empty, "--out", out])),
        3
    );
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        code(&vinit(&[
            "batch",
            "--config",
            missing.to_str().unwrap(),
            "--out",
            out
        ])),
        3
    );
}

#[test]
fn missing_or_broken_data_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let absent = dir.path().join("absent");
    assert_eq!(
        code(&vinit(&[
            "init",
            "--dataset",
            absent.to_str().unwrap(),
            "--out",
            out
        ])),
        2
    );
    let report = write(&dir.path().join("attempts.jsonl"), "{not json\n");
    assert_eq!(code(&vinit(&["report", &report])), 2);
}

#[test]
fn simulate_init_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        &dir.path().join("s.toml"),
        "[[scenario]]\nname = \"c\"\nprofiles = [\"helix\"]\ncount = 1\nfirst_seed = 3\n",
    );
    let data = dir.path().join("data");
    let sim = vinit(&[
        "simulate",
        "--config",
        &config,
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&sim), 0, "{}", String::from_utf8_lossy(&sim.stderr));
    let set = data.join("c-helix-3");
    for f in ["imu0.csv", "tracks.jsonl", "camera.json", "groundtruth.csv"] {
        assert!(set.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let init = vinit(&[
        "init",
        "--dataset",
        set.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&init), 0, "{}", String::from_utf8_lossy(&init.stderr));
    let stdout = String::from_utf8_lossy(&init.stdout);
    assert!(stdout.starts_with("initialized by") || stdout.starts_with("not initialized"));
    assert_eq!(
        run.join("initial_map.json").exists(),
        stdout.starts_with("initialized by")
    );

    let report = vinit(&["report", run.to_str().unwrap(), "--csv"]);
    assert_eq!(code(&report), 0);
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.starts_with("section,name,value\n"));
    assert!(text.contains("counts,attempts,"));
}
