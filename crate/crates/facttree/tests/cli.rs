use std::path::Path;
use std::process::{Command, Output};

fn facttree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facttree"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = facttree(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    facttree(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small KG and dataset written through the command line.
fn setup(dir: &Path) {
    std::fs::write(
        dir.join("kg.json"),
        r#"{"n_entities":300,"n_binary_rel":15,"n_nary_rel":5,"n_facts":600,"seed":5}"#,
    )
    .unwrap();
    ok(&[
        "gen-kg",
        "--config",
        s(&dir.join("kg.json")),
        "--out",
        s(&dir.join("kg.jsonl")),
    ]);
    ok(&[
        "gen-data",
        "--kg",
        s(&dir.join("kg.jsonl")),
        "--n",
        "80",
        "--seed",
        "4",
        "--out",
        s(&dir.join("data")),
    ]);
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(&[
        "gen-data",
        "--kg",
        s(&d.join("kg.jsonl")),
        "--n",
        "80",
        "--seed",
        "4",
        "--out",
        s(&d.join("again")),
    ]);
    for f in [
        "items.jsonl",
        "train.txt",
        "valid.txt",
        "test.txt",
        "manifest.json",
    ] {
        let a = std::fs::read(d.join("data").join(f)).unwrap();
        let b = std::fs::read(d.join("again").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let n = |f: &str| {
        std::fs::read_to_string(d.join("data").join(f))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!((n("train.txt"), n("valid.txt"), n("test.txt")), (64, 8, 8));
}

#[test]
fn oracle_evaluation_needs_no_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    std::fs::create_dir(d.join("models")).unwrap();
    let out = ok(&[
        "eval",
        "--split",
        "test",
        "--models",
        s(&d.join("models")),
        "--kg",
        s(&d.join("kg.jsonl")),
        "--data",
        s(&d.join("data")),
        "--oracle",
        "tree,fl,intra,inter",
        "--report",
        "-",
    ]);
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["accuracy"], 1.0);
    assert_eq!(rep["n_items"], 8);
    assert_eq!(rep["config"]["lambda"], 1.5);

    // without oracles the missing models are a configuration error
    assert_eq!(
        code(&[
            "eval",
            "--models",
            s(&d.join("models")),
            "--kg",
            s(&d.join("kg.jsonl")),
            "--data",
            s(&d.join("data")),
        ]),
        1
    );
}

#[test]
fn train_answer_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let models = d.join("models");
    ok(&[
        "train",
        "all",
        "--data",
        s(&d.join("data")),
        "--kg",
        s(&d.join("kg.jsonl")),
        "--out",
        s(&models),
        "--epochs",
        "2",
    ]);
    for f in [
        "classifier.json",
        "labeler.json",
        "scorer.json",
        "matcher.tsv",
        "dataset.txt",
    ] {
        assert!(models.join(f).exists(), "{f}");
    }
    // single-target training writes exactly one checkpoint
    ok(&[
        "train",
        "classifier",
        "--data",
        s(&d.join("data")),
        "--kg",
        s(&d.join("kg.jsonl")),
        "--out",
        s(&d.join("solo").join("c.json")),
        "--epochs",
        "1",
        "--range",
        "O+F",
    ]);
    let c: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("solo").join("c.json")).unwrap())
            .unwrap();
    assert_eq!(c["kind"], "classifier");
    assert_eq!(c["range"], "O+F");

    let report = d.join("report.json");
    ok(&[
        "eval",
        "--models",
        s(&models),
        "--kg",
        s(&d.join("kg.jsonl")),
        "--report",
        s(&report),
        "--traces",
    ]);
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["n_items"], 8);
    assert_eq!(rep["traces"].as_array().unwrap().len(), 8);

    let id = std::fs::read_to_string(d.join("data").join("test.txt")).unwrap();
    let id = id.lines().next().unwrap();
    let out = ok(&[
        "answer",
        "--item",
        id,
        "--models",
        s(&models),
        "--kg",
        s(&d.join("kg.jsonl")),
        "--oracle",
        "tree,fl,intra,inter",
        "--trace",
    ]);
    let a: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(a["correct"], true);
    assert_eq!(a["prediction"], a["gold"]);
    let steps = a["trace"].as_array().unwrap();
    assert!(steps
        .iter()
        .any(|st| st["step"] == "intra" && st["chosen"]["raw"].is_number()));

    assert_eq!(
        code(&[
            "answer",
            "--item",
            "nope",
            "--models",
            s(&models),
            "--kg",
            s(&d.join("kg.jsonl"))
        ]),
        1
    );
}

#[test]
fn corrupt_kg_drops_the_requested_share() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(&[
        "corrupt-kg",
        "--kg",
        s(&d.join("kg.jsonl")),
        "--fraction",
        "0.5",
        "--seed",
        "2",
        "--out",
        s(&d.join("half.jsonl")),
    ]);
    let lines = |f: &str| std::fs::read_to_string(d.join(f)).unwrap().lines().count();
    assert_eq!(lines("half.jsonl"), 300);
    assert_eq!(lines("kg.jsonl"), 600);
}

#[test]
fn exit_codes_separate_configuration_from_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"n_entites": 10}"#).unwrap();
    assert_eq!(
        code(&[
            "gen-kg",
            "--config",
            s(&d.join("bad.json")),
            "--out",
            s(&d.join("k"))
        ]),
        1
    );
    std::fs::write(d.join("tiny.json"), r#"{"n_entities": 0}"#).unwrap();
    assert_eq!(
        code(&[
            "gen-kg",
            "--config",
            s(&d.join("tiny.json")),
            "--out",
            s(&d.join("k"))
        ]),
        1
    );
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(
        code(&["corrupt-kg", "--kg", "x", "--fraction", "1.5", "--out", "y"]),
        1
    );

    std::fs::write(d.join("broken.jsonl"), "{\"s\":\"a\",\"p\":\"r\"\n").unwrap();
    let out = facttree(&[
        "corrupt-kg",
        "--kg",
        s(&d.join("broken.jsonl")),
        "--fraction",
        "0.1",
        "--out",
        s(&d.join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.jsonl:1"));
    assert_eq!(
        code(&[
            "gen-data",
            "--kg",
            s(&d.join("missing.jsonl")),
            "--n",
            "5",
            "--out",
            s(d)
        ]),
        2
    );
    assert_eq!(code(&["--help"]), 0);
}
