use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dark-distill");

const SMALL: &str = r#"{
  "seed": 3,
  "synth": {"vocab_size": 405, "n_topics": 30, "n_queries": 40, "n_dev_queries": 10},
  "teacher": {"dim": 8, "hidden": 8, "epochs": 1, "warmup_steps": 2},
  "distill": {"dim": 8, "epochs": 2, "warmup_steps": 2},
  "histogram": {"lo": -4.0, "hi": 4.0, "width": 1.0}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.json");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(BIN)
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_config_exits_2() {
    let o = Command::new(BIN)
        .args(["--config", "/nonexistent/config.json", "gen-synth"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(BIN).arg("no-such-command").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), r#"{"distill": {"lambda": -1}}"#).unwrap();
    assert_eq!(run(dir.path(), &["gen-synth"]).status.code(), Some(2));
    fs::write(dir.path().join("config.json"), r#"{"unknown": 1}"#).unwrap();
    assert_eq!(run(dir.path(), &["gen-synth"]).status.code(), Some(2));
}

#[test]
fn gen_synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&run(a.path(), &["gen-synth"]));
    ok(&run(b.path(), &["gen-synth"]));
    for f in ["collection.tsv", "queries.tsv", "qrels.txt", "instances.tsv", "manifest.json"] {
        let x = fs::read(a.path().join("out/data").join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join("out/data").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ingest_rejects_bad_data_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.tsv"), "0\thello world\n1\tfoo bar\n").unwrap();
    fs::write(d.join("q.tsv"), "7\thello\n").unwrap();
    fs::write(d.join("r.txt"), "7 0 0 1\n").unwrap();
    fs::write(d.join("i.tsv"), "7\t0\t1\n").unwrap();
    let args = |inst: &str| {
        vec![
            "ingest".to_string(),
            "--collection".into(),
            d.join("c.tsv").display().to_string(),
            "--queries".into(),
            d.join("q.tsv").display().to_string(),
            "--qrels".into(),
            d.join("r.txt").display().to_string(),
            "--instances".into(),
            d.join(inst).display().to_string(),
        ]
    };
    let a = args("i.tsv");
    ok(&run(d, &a.iter().map(String::as_str).collect::<Vec<_>>()));
    let vocab = fs::read_to_string(d.join("out/data/vocab.tsv")).unwrap();
    assert!(vocab.starts_with("[PAD]\t0\n[UNK]\t1\n"));
    fs::write(d.join("bad.tsv"), "7\t0\t0,1\n").unwrap();
    let a = args("bad.tsv");
    assert_eq!(run(d, &a.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(3));
}

#[test]
fn stages_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("out");
    assert_eq!(run(d, &["export-hist"]).status.code(), Some(3), "no teacher checkpoint yet");
    ok(&run(d, &["train-teacher"]));
    ok(&run(d, &["score-confidence"]));
    let conf = fs::read_to_string(out.join("confidence.tsv")).unwrap();
    let values: Vec<f64> = conf.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 40);
    assert!(values.windows(2).all(|w| w[0] >= w[1]) && values.iter().all(|v| *v <= 0.0));
    ok(&run(d, &["distill", "--mode", "dark"]));
    assert!(out.join("plans/plan_epoch_001.json").exists());
    assert!(out.join("plans/plan_epoch_002.json").exists());
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    ok(&run(d, &["eval"]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for k in ["mrr_at_10", "recall_at_50", "recall_at_1000", "ndcg_at_10", "n_queries"] {
        assert!(m.get(k).is_some(), "{k}");
    }
    assert_eq!(m["n_queries"], 10);

    ok(&run(d, &["export-hist", "--shard"]));
    let csv = fs::read_to_string(out.join("histogram.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# range=[-4,4) width=1"));
    assert_eq!(lines.next(), Some("group,bucket_lo,bucket_hi,count"));
    let groups: std::collections::BTreeSet<&str> = lines.clone().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups.len(), 4);
    let positives: u64 = lines
        .filter(|l| l.starts_with("positive,"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(positives, 40);
    let shard = fs::read_to_string(out.join("dark_examples.jsonl")).unwrap();
    assert_eq!(shard.lines().count(), 40);
    let first: serde_json::Value = serde_json::from_str(shard.lines().next().unwrap()).unwrap();
    assert_eq!(first["candidates"].as_array().unwrap().len(), 25);

    ok(&run(d, &["export-hist", "--groups", "positive,hard_negative"]));
    let csv = fs::read_to_string(out.join("histogram.csv")).unwrap();
    let groups: std::collections::BTreeSet<&str> =
        csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups.into_iter().collect::<Vec<_>>(), vec!["hard_negative", "positive"]);
}

#[test]
fn pipeline_is_byte_deterministic_and_supports_zero_epochs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&run(a.path(), &["--threads", "2", "pipeline"]));
    ok(&run(b.path(), &["pipeline"]));
    for f in ["metrics.json", "teacher.json", "student.json", "confidence.tsv", "train_log.jsonl"] {
        assert_eq!(
            fs::read(a.path().join("out").join(f)).unwrap(),
            fs::read(b.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }

    let z = tempfile::tempdir().unwrap();
    fs::write(
        z.path().join("config.json"),
        SMALL.replace("\"epochs\": 1", "\"epochs\": 0").replace("\"epochs\": 2", "\"epochs\": 0"),
    )
    .unwrap();
    ok(&run(z.path(), &["pipeline", "--mode", "rand"]));
    assert!(z.path().join("out/metrics.json").exists());
}

#[test]
fn warm_start_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run(d, &["pipeline"]));
    let ckpt = d.join("student0.json");
    fs::copy(d.join("out/student.json"), &ckpt).unwrap();
    ok(&run(d, &["--init-checkpoint", ckpt.to_str().unwrap(), "distill"]));
    fs::write(d.join("bogus.json"), "{}").unwrap();
    let o = run(d, &["--init-checkpoint", d.join("bogus.json").to_str().unwrap(), "distill"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_m_writes_sorted_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(dir.path(), &["sweep-m", "--m", "3,1"]));
    let csv = fs::read_to_string(dir.path().join("out/sweep_m.csv")).unwrap();
    let ms: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(csv.lines().next(), Some("m,mrr_at_10"));
    assert_eq!(ms, vec!["1", "3"]);
}
