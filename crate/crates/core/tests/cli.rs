use std::path::Path;
use std::process::{Command, Output};

fn dextac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dextac"))
        .args(args)
        .env_remove("DEXTAC_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dextac(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn bad_invocations_exit_with_usage_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&dextac(&["collect", "--per-size", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&dextac(&["collect", "--sizes", "25", "--out", p(&out)])), 2);
    let missing = dir.path().join("nope");
    assert_eq!(code(&dextac(&["train", "--dataset", p(&missing), "--out", p(&out)])), 2);
    assert_eq!(code(&dextac(&["eval", "--suite", "bogus", "--out", p(&out)])), 2);
    assert_eq!(code(&dextac(&["frobnicate"])), 2);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"policy": {"learning_rate": -1.0}}"#).unwrap();
    let r = Command::new(env!("CARGO_BIN_EXE_dextac"))
        .args(["collect", "--per-size", "1", "--out", p(&out)])
        .env("DEXTAC_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&r), 2);
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn collect_train_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let stdout = ok(&[
        "collect",
        "--sizes",
        "30,50,60",
        "--per-size",
        "30",
        "--seed",
        "7",
        "--out",
        p(&data),
    ]);
    assert!(stdout.contains("collected 90 demonstrations"), "{stdout}");

    let listing = ok(&["inspect", "--dataset", p(&data)]);
    for size in [30, 50, 60] {
        assert!(
            listing.contains(&format!("size {size}: 30 demonstrations")),
            "{listing}"
        );
    }

    // default configuration: 2000 optimizer steps, one log row per step plus the initial loss
    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    ok(&["train", "--dataset", p(&data), "--out", p(&run_a), "--seed", "7"]);
    let log = std::fs::read_to_string(run_a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2001);
    ok(&["train", "--dataset", p(&data), "--out", p(&run_b), "--seed", "7"]);
    assert_eq!(
        std::fs::read(run_a.join("policy.ckpt")).unwrap(),
        std::fs::read(run_b.join("policy.ckpt")).unwrap()
    );
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);

    let ckpt = run_a.join("policy.ckpt");
    let abl = dir.path().join("ablation");
    ok(&[
        "eval",
        "--suite",
        "ablation",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&data),
        "--out",
        p(&abl),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(abl.join("report.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 9);
    for c in cells {
        let total = c["failure"].as_u64().unwrap() + c["partial"].as_u64().unwrap() + c["success"].as_u64().unwrap();
        assert_eq!(total, 20);
    }
    let csv = std::fs::read_to_string(abl.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);

    let zs = dir.path().join("zero_shot");
    ok(&[
        "eval",
        "--suite",
        "zero-shot",
        "--checkpoint",
        p(&ckpt),
        "--dataset",
        p(&data),
        "--out",
        p(&zs),
    ]);
    let csv = std::fs::read_to_string(zs.join("report.csv")).unwrap();
    let rows: Vec<_> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("20")), "{csv}");

    let shown = ok(&["inspect", "--report", p(&abl)]);
    assert!(shown.contains("ablation"));

    // a successful DexTac episode reads back as fully depressed
    let success = cells
        .iter()
        .filter(|c| c["policy"] == "dextac")
        .flat_map(|c| c["episodes"].as_array().unwrap())
        .find(|e| e["label"] == "Success")
        .expect("at least one DexTac success");
    let trace = abl.join(success["trace"].as_str().unwrap());
    let summary = ok(&["inspect", "--trace", p(&trace)]);
    assert!(summary.contains("plunger_fraction = 1.00"), "{summary}");
}

#[test]
fn corrupt_demonstration_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["collect", "--sizes", "30", "--per-size", "1", "--out", p(&data)]);
    let demo_dir = data.join("demos/30");
    let file = std::fs::read_dir(&demo_dir).unwrap().next().unwrap().unwrap().path();
    let text = std::fs::read_to_string(&file).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{not json";
    std::fs::write(&file, lines.join("\n") + "\n").unwrap();

    let out = dextac(&["train", "--dataset", p(&data), "--out", p(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(".jsonl:3"), "{err}");
    let out = dextac(&["inspect", "--dataset", p(&data)]);
    assert_eq!(code(&out), 3);
}
