use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn exbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exbias")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const FIXTURE: &str = r#"{"config_version": 1, "base_seed": 3, "output_dir": "out",
    "oracle": {"kind": "fixture", "name": "example2"},
    "student": {"kind": "fixture", "name": "example2"},
    "measure": {"metrics": ["tv"], "exact": true, "sample_counts": [1000]}}"#;

const SMALL: &str = r#"{"config_version": 1, "base_seed": 4, "output_dir": "small",
    "vocab": {"kind": "synthetic", "size": 5}, "L": 12,
    "oracle": {"kind": "random_tabular", "order": 1, "alpha": 0.5},
    "student": {"kind": "recurrent", "hidden_dim": 6},
    "train": {"epochs": 2, "sequences_per_epoch": 200, "batch_size": 20, "eval_sequences": 50},
    "measure": {"metrics": ["js"], "sample_counts": [500]}}"#;

#[test]
fn eb_c_on_fixture_reports_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", FIXTURE);
    let o = exbias(&["eb-c", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    assert!(
        stdout(&o).contains("eb-c tv c=0 n=exact: average ratio 1.800000"),
        "{}",
        stdout(&o)
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    let avg = summary["averages"][0]["average_ratio"].as_f64().unwrap();
    assert!((avg - 1.8).abs() < 1e-12);
    let csv = fs::read_to_string(dir.path().join("out/eb_c.csv")).unwrap();
    assert!(csv.starts_with("l,metric,corrupt_rate,n_samples,"));
}

#[test]
fn out_and_seed_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", FIXTURE);
    let out = dir.path().join("elsewhere");
    let o = exbias(&["sweep", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["base_seed"], 9);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_eq!(exbias(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(exbias(&["eb-c"]).status.code(), Some(1));
    assert_eq!(exbias(&["--help"]).status.code(), Some(0));
    // Config errors.
    let bad = write_config(dir.path(), "bad.json", r#"{"config_version": 99}"#);
    assert_eq!(exbias(&["sweep", "--config", &bad]).status.code(), Some(1));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        exbias(&["sweep", "--config", missing.to_str().unwrap()]).status.code(),
        Some(1)
    );
    let corpus_cfg = write_config(
        dir.path(),
        "corpus.json",
        r#"{"config_version": 1, "base_seed": 1, "output_dir": "out", "L": 3,
            "oracle": {"kind": "corpus", "path": "c.txt", "vocab_path": "v.txt"},
            "student": {"kind": "fixture", "name": "example1"},
            "measure": {"kinds": ["eb-c"]}}"#,
    );
    fs::write(dir.path().join("c.txt"), "A B A\n").unwrap();
    fs::write(dir.path().join("v.txt"), "A\nB\n").unwrap();
    assert_eq!(exbias(&["eb-c", "--config", &corpus_cfg]).status.code(), Some(1));
    // Runtime failure: l range past L - 1 is only detected while measuring.
    let late = write_config(
        dir.path(),
        "late.json",
        &FIXTURE.replace(r#""exact": true"#, r#""exact": true, "l_max": 7"#),
    );
    let o = exbias(&["eb-c", "--config", &late]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(dir.path().join("out/FAILED").exists());
}

#[test]
fn replay_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    assert!(exbias(&["sweep", "--config", &cfg]).status.success());
    let manifest = dir.path().join("small/manifest.json");
    let o = exbias(&["replay", "--manifest", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("match  eb_c.csv"));
    assert_eq!(
        fs::read(dir.path().join("small/eb_c.csv")).unwrap(),
        fs::read(dir.path().join("small/replay/eb_c.csv")).unwrap()
    );
    // Tampering with a recorded output is detected.
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    m["outputs"]["eb_c.csv"] = "0".repeat(64).into();
    fs::write(&manifest, serde_json::to_vec(&m).unwrap()).unwrap();
    let o = exbias(&["replay", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("DIFFERS  eb_c.csv"));
}

#[test]
fn train_complete_and_ppl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let o = exbias(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    assert!(!dir.path().join("small/eb_c.csv").exists());
    let student = dir.path().join("small/student.json");
    let oracle = dir.path().join("small/oracle.json");
    let s = student.to_str().unwrap();

    let run = |extra: &[&str]| {
        let mut args = vec!["complete", "--model", s, "-n", "4"];
        args.extend_from_slice(extra);
        exbias(&args)
    };
    let a = run(&["--seed", "5"]);
    assert!(a.status.success(), "{a:?}");
    assert_eq!(stdout(&a), stdout(&run(&["--seed", "5"])));
    let rows: Vec<String> = stdout(&a).lines().map(str::to_owned).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let (prefix, cont) = r.split_once(" -> ").unwrap();
        assert_eq!(prefix.split(' ').count(), 10);
        assert_eq!(cont.split(' ').count(), 2);
    }
    assert!(run(&["--source", "random"]).status.success());
    assert_eq!(run(&["--source", "corpus"]).status.code(), Some(1));

    let corpus = dir.path().join("corpus.txt");
    fs::write(
        &corpus,
        "w0 w1 w2 w3 w4 w0 w1 w2 w3 w4 w0 w1\nw1 w1 w1 w1 w1 w1 w1 w1 w1 w1 w1 w1 w1\nshort line\n",
    )
    .unwrap();
    let c = run(&["--source", "corpus", "--corpus", corpus.to_str().unwrap()]);
    assert!(c.status.success(), "{c:?}");
    assert!(stdout(&c).starts_with("w0 w1 w2 w3 w4 w0 w1 w2 w3 w4 -> "));

    let p = exbias(&["ppl", "--model", s, "--corpus", corpus.to_str().unwrap()]);
    assert!(p.status.success(), "{p:?}");
    let ppl: f64 = stdout(&p).trim().parse().unwrap();
    assert!(ppl > 1.0 && ppl.is_finite());
    let o1 = exbias(&[
        "ppl",
        "--model",
        oracle.to_str().unwrap(),
        "--oracle",
        oracle.to_str().unwrap(),
        "-n",
        "300",
    ]);
    let o2 = exbias(&["ppl", "--model", s, "--oracle", oracle.to_str().unwrap(), "-n", "300"]);
    let (self_ppl, student_ppl): (f64, f64) =
        (stdout(&o1).trim().parse().unwrap(), stdout(&o2).trim().parse().unwrap());
    assert!(self_ppl < student_ppl, "{self_ppl} vs {student_ppl}");
    assert_eq!(exbias(&["ppl", "--model", s]).status.code(), Some(1));
}
