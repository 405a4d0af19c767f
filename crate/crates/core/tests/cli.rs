use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

/// Runs the binary in `dir` with a whitespace-separated argument line.
fn lur(dir: &Path, line: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lur"))
        .current_dir(dir)
        .args(line.split_whitespace())
        .output()
        .expect("spawn lur")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn code(dir: &Path, line: &str) -> Option<i32> {
    lur(dir, line).status.code()
}

fn gen(dir: &Path, out: &str) {
    let line = format!("gen-synth --classes 4 --dim 6 --per-class 40 --seed 3 --out {out}");
    let o = lur(dir, &line);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_PLAN: &str = r#"{
    "dataset": {"file": {"path": "data.latf"}},
    "variants": ["regular", "lur", "gda"],
    "grid": {"members": [2], "batch_sizes": [16], "learning_rates": [0.01, 0.001], "epochs": [2]},
    "seeds": [0, 1, 2]
}"#;

#[test]
fn generate_ingest_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "data.latf");
    let summary = stdout_json(&lur(d, "ingest --data data.latf --out data.csv"));
    assert_eq!(summary["rows"], 160);
    assert_eq!(summary["classes"], 4);
    // CSV round trip carries the same rows
    let again = stdout_json(&lur(d, "ingest --data data.csv"));
    assert_eq!(again["train_counts"], summary["train_counts"]);

    stdout_json(&lur(
        d,
        "train --data data.latf --variant lur --seed 0 --out m.bin",
    ));
    assert!(d.join("m.bin.json").exists());
    let metrics = stdout_json(&lur(d, "eval --model m.bin --data data.csv"));
    assert!(metrics["accuracy"].as_f64().unwrap() > 0.9);
    assert!(metrics["ace"].as_f64().unwrap() <= 1.0);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "data.latf");
    let cfg = r#"{"variant": "sub_ensemble", "seed": 9, "members": 4, "epochs": 2}"#;
    fs::write(d.join("cfg.json"), cfg).unwrap();
    stdout_json(&lur(
        d,
        "train --data data.latf --config cfg.json --members 3 --seed 1 --out m.bin",
    ));
    let saved = read_json(&d.join("m.bin.json"));
    assert_eq!(saved["variant"], "sub_ensemble");
    assert_eq!(saved["members"], 3);
    assert_eq!(saved["epochs"], 2);
    assert_eq!(saved["seed"], 1);
}

#[test]
fn ood_eval_reports_every_applicable_score() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "data.latf");
    stdout_json(&lur(
        d,
        "train --data data.latf --variant lur --seed 0 --ood-mode max --out m.bin",
    ));
    let r = stdout_json(&lur(
        d,
        "ood-eval --model m.bin --data data.latf --mode max",
    ));
    let scores = r["scores"].as_object().unwrap();
    assert!(scores.contains_key("entropy") && scores.contains_key("latent_variance"));
    assert!(!scores.contains_key("density"));
    for s in scores.values() {
        let auc = s["roc_auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    // explicitly requesting an inapplicable score is a usage error
    let line = "ood-eval --model m.bin --data data.latf --mode max --score density";
    assert_eq!(code(d, line), Some(1));
    // a head trained on all classes does not match the holdout split
    stdout_json(&lur(
        d,
        "train --data data.latf --variant regular --seed 0 --out full.bin",
    ));
    assert_eq!(
        code(d, "ood-eval --model full.bin --data data.latf --mode max"),
        Some(1)
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = lur(
        d,
        "train --data missing.latf --variant lur --seed 0 --out m.bin",
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.latf"));

    gen(d, "data.latf");
    // missing --seed
    assert_eq!(
        code(d, "train --data data.latf --variant lur --out m.bin"),
        Some(1)
    );
    assert_eq!(
        code(
            d,
            "train --data data.latf --variant nope --seed 0 --out m.bin"
        ),
        Some(1)
    );
    let line = "train --data data.latf --variant lur --seed 0 --learning-rate -1 --out m.bin";
    assert_eq!(code(d, line), Some(1));
    assert_eq!(code(d, "frobnicate"), Some(1));
    assert_eq!(code(d, "--help"), Some(0));

    fs::write(d.join("bad.csv"), "0.1,0.2,0\n0.3,oops,1\n").unwrap();
    assert_eq!(code(d, "ingest --data bad.csv"), Some(2));

    let line = "train --data data.latf --variant regular --seed 0 \
                --learning-rate 1.7976931348623157e308 --out m.bin";
    assert_eq!(code(d, line), Some(3));
}

#[test]
fn grid_report_is_independent_of_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen(d, "data.latf");
    fs::create_dir(d.join("plans")).unwrap();
    fs::rename(d.join("data.latf"), d.join("plans/data.latf")).unwrap();
    fs::write(d.join("plans/plan.json"), SMALL_PLAN).unwrap();

    let canonical = |name: &str| {
        let mut v = read_json(&d.join(name));
        v["generated_unix"] = Value::from(0);
        serde_json::to_string(&v).unwrap()
    };
    for (jobs, out) in [("1", "r1.json"), ("8", "r8.json")] {
        let line = format!("grid --plan plans/plan.json --out {out} --jobs {jobs} --markdown r.md");
        let o = lur(d, &line);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(canonical("r1.json"), canonical("r8.json"));

    let report = read_json(&d.join("r1.json"));
    // regular: 2 lr × 3 seeds × 2 modes, lur likewise, gda: 1 × 3 × 2
    assert_eq!(report["rows"].as_array().unwrap().len(), 12 + 12 + 6);

    let md = lur(d, "report --report r1.json");
    assert!(md.status.success());
    let text = String::from_utf8(md.stdout).unwrap();
    assert!(text.contains("| lur |") && text.contains("OOD-min") && text.contains("OOD-max"));
    assert_eq!(text, fs::read_to_string(d.join("r.md")).unwrap());

    assert_eq!(
        code(d, "report --report r1.json --criterion roc_auc.entropy"),
        Some(0)
    );
    let o = lur(d, "report --report r1.json --criterion bogus");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("available"));
}
