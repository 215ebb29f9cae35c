use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bicon::data::LabeledMatrix;
use bicon::model::{ClusterHead, Model};
use ndarray::Array2;

fn bicon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bicon"))
        .args(args)
        .env_remove("BICON_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

const SNE: &str = r#"{"task": "sne", "divergence": "TV", "epochs": 40, "lr": 0.5,
  "perplexity": 10, "n": 60, "d": 4, "classes": 3, "metric_every": 20}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_exit_codes() {
    let ok = bicon(&["gradcheck", "divergences", "--seed", "0"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stdout(&ok).contains("PASS scope divergences"));

    let bad = bicon(&["gradcheck", "divergences", "--corrupt", "divergence/JSD"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("divergence/JSD"), "{}", stderr(&bad));

    let e2e = bicon(&["gradcheck", "end2end"]);
    assert_eq!(code(&e2e), 0);
    assert!(stdout(&e2e).contains("worst relative error"));

    assert_eq!(code(&bicon(&["gradcheck", "everything"])), 2);
}

#[test]
fn run_writes_outputs_and_eval_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sne.json", SNE);
    let out = dir.path().join("out");
    let o = bicon(&["run", "sne", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["report.csv", "metrics.csv", "model.ckpt", "scatter.svg", "config.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(stdout(&o).contains("final_loss"));

    let report = bicon::data::parse_report_csv(&fs::read_to_string(out.join("report.csv")).unwrap())
        .unwrap();
    assert_eq!(report.rows.len(), 40);
    let recorded = report.column("knn").unwrap().last().unwrap().unwrap();

    let e = bicon(&[
        "eval",
        "--checkpoint",
        s(&out.join("model.ckpt")),
        "--dataset",
        s(&cfg),
        "--metrics",
        "knn,silhouette",
    ]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    let line = stdout(&e).lines().find(|l| l.starts_with("knn ")).unwrap().to_string();
    let value: f64 = line[4..].trim().parse().unwrap();
    assert!((value - recorded).abs() <= 1e-12, "{value} vs {recorded}");
    let appended = fs::read_to_string(out.join("eval_metrics.csv")).unwrap();
    assert!(appended.starts_with("metric,value,config_hash,seed\n"));
    assert_eq!(appended.lines().count(), 3);

    let unknown = bicon(&[
        "eval",
        "--checkpoint",
        s(&out.join("model.ckpt")),
        "--dataset",
        s(&cfg),
        "--metrics",
        "accuracy",
    ]);
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("hungarian, knn, probe, silhouette"));

    // The free embedding has 60 rows; a 30-row dataset cannot be scored.
    let small = write_config(dir.path(), "small.json", r#"{"task": "sne", "n": 30, "d": 4}"#);
    let mismatch = bicon(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--dataset", s(&small)]);
    assert_eq!(code(&mismatch), 2, "{}", stderr(&mismatch));
}

#[test]
fn identical_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sne.json", SNE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&bicon(&["run", "--config", s(&cfg), "--out", s(out)])), 0);
    }
    for f in ["report.csv", "metrics.csv", "model.ckpt", "scatter.svg", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let reseeded = dir.path().join("c");
    assert_eq!(code(&bicon(&["run", "--config", s(&cfg), "--out", s(&reseeded), "--seed", "9"])), 0);
    assert_ne!(fs::read(a.join("report.csv")).unwrap(), fs::read(reseeded.join("report.csv")).unwrap());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let small_batch = write_config(dir.path(), "b.json", r#"{"task": "cluster", "batch_size": 2}"#);
    let o = bicon(&["run", "--config", s(&small_batch), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_size must be >= 4"), "{}", stderr(&o));

    let typo = write_config(dir.path(), "t.json", r#"{"task": "sne", "epoch": 3}"#);
    let o = bicon(&["run", "--config", s(&typo), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epoch"));

    let no_task = write_config(dir.path(), "n.json", r#"{"epochs": 3}"#);
    assert_eq!(code(&bicon(&["run", "--config", s(&no_task), "--out", s(&out)])), 2);
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&bicon(&["run", "sne", "--config", s(&missing), "--out", s(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn runaway_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "kl.json",
        r#"{"task": "sne", "divergence": "KL", "lr": 1e300, "epochs": 10, "perplexity": 5, "n": 30, "d": 4}"#,
    );
    let o = bicon(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("numerical abort") && err.contains("KL") && err.contains("step"), "{err}");
}

#[test]
fn sweep_makes_one_directory_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sne.json",
        r#"{"task": "sne", "epochs": 5, "perplexity": 5, "n": 30, "d": 4, "seed": 3}"#,
    );
    let out = dir.path().join("grid");
    let o = bicon(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--sweep",
        "divergence=KL,TV,JSD,Hellinger",
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names = ["divergence-KL", "divergence-TV", "divergence-JSD", "divergence-Hellinger"];
    for (g, n) in names.iter().enumerate() {
        assert!(out.join(n).join("report.csv").is_file(), "{n}");
        let config = fs::read_to_string(out.join(n).join("config.json")).unwrap();
        assert!(config.contains(&format!("\"seed\":{}", 3 + g)), "{config}");
    }
    let agg = fs::read_to_string(out.join("sweep_metrics.csv")).unwrap();
    let runs: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let mut order = runs.clone();
    order.dedup();
    assert_eq!(order, names);
}

#[test]
fn hungarian_on_a_perfect_cluster_head() {
    let dir = tempfile::tempdir().unwrap();
    let n = 12;
    let x = Array2::from_shape_fn((n, 3), |(i, c)| if i % 3 == c { 1.0 } else { 0.0 });
    let data = LabeledMatrix::new(x, Some((0..n).map(|i| (i + 1) % 3).collect())).unwrap();
    let dataset = dir.path().join("onehot.csv");
    data.save_csv(&dataset).unwrap();
    let head = ClusterHead::new(
        Array2::from_shape_fn((3, 3), |(a, b)| if a == b { 30.0 } else { 0.0 }),
        Array2::zeros((1, 3)),
    )
    .unwrap();
    let ckpt = dir.path().join("head.ckpt");
    Model::ClusterHead(head).save(&ckpt).unwrap();
    let out = dir.path().join("m.csv");
    let o = bicon(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&dataset),
        "--metrics",
        "hungarian",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "hungarian 1.0");
    assert!(fs::read_to_string(&out).unwrap().contains("hungarian,1.0000000000000000e0"));
}

#[test]
fn log_level_controls_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"task": "cluster", "epochs": 2, "clusters": 3, "n": 60, "d": 4, "batch_size": 30}"#,
    );
    let quiet = bicon(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("q"))]);
    assert_eq!(code(&quiet), 0, "{}", stderr(&quiet));
    assert!(stderr(&quiet).is_empty());
    let loud = Command::new(env!("CARGO_BIN_EXE_bicon"))
        .args(["run", "--config", s(&cfg), "--out", s(&dir.path().join("l"))])
        .env("BICON_LOG", "info")
        .output()
        .unwrap();
    assert!(stderr(&loud).contains("cluster finished after"), "{}", stderr(&loud));
}
