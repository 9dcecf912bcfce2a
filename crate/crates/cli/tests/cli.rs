use std::path::Path;
use std::process::{Command, Output};

fn curate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate"))
        .args(args)
        .env("CURATE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) -> std::path::PathBuf {
    let corpus = dir.join("corpus.json");
    let o = curate(&["synth", "--n", &n.to_string(), "--seed", "3", "--out", s(&corpus)]);
    assert!(o.status.success(), "{}", text(&o));
    corpus
}

#[test]
fn run_writes_outputs_and_report_rereads_them() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 300);
    let out = dir.path().join("out");
    let o = curate(&[
        "run", "--mock", "--corpus", s(&corpus), "--output-dir", s(&out), "--clusters", "12", "--target-size", "40",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("300"));

    let merged: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("merged.json")).unwrap()).unwrap();
    let records = merged.as_array().unwrap();
    assert!(records.iter().all(|r| r["instruction"].is_string() && r["_curate"]["id"].is_string()));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["counts"]["merged"].as_u64().unwrap() as usize, records.len());
    assert_eq!(report["config"]["clustering"]["m"], 12);
    assert!(out.join("projection.csv").exists());

    let o = curate(&["report", "--output-dir", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn staged_subcommands_stop_where_asked() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 200);
    let out = dir.path().join("out");
    let common = ["--mock", "--corpus", s(&corpus), "--output-dir", s(&out), "--clusters", "8"];
    let o = curate(&[&["filter"], &common[..]].concat());
    assert!(o.status.success(), "{}", text(&o));
    assert!(out.join("filtered.json").exists() && !out.join("pairs.jsonl").exists());
    let o = curate(&[&["pair", "--tau", "0.6"], &common[..]].concat());
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("tau 0.6000"));
    let o = curate(&[&["merge", "--tau", "0.6"], &common[..]].concat());
    assert!(o.status.success(), "{}", text(&o));
    assert!(out.join("outcomes.jsonl").exists() && !out.join("merged.json").exists());
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 150);
    let out = dir.path().join("out");
    let cfg = dir.path().join("curate.toml");
    std::fs::write(
        &cfg,
        format!(
            "corpus = {:?}\noutput_dir = {:?}\n[clustering]\nm = 5\n[pairing]\ntau = 0.7\n[gate]\nalpha = 0.5\naggregation = \"mean_of_parents\"\n",
            s(&corpus),
            s(&out)
        ),
    )
    .unwrap();
    let o = curate(&["run", "--config", s(&cfg), "--mock", "--alpha", "0.6"]);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["clustering"]["m"], 5);
    assert_eq!(report["config"]["gate"]["alpha"], 0.6);
    assert_eq!(report["config"]["gate"]["aggregation"], "mean_of_parents");
    assert_eq!(report["tau"], 0.7);
}

#[test]
fn baselines_write_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 120);
    let out = dir.path().join("out");
    for (kind, extra) in [("random", vec![]), ("perplexity", vec![]), ("kmeans-distant", vec!["--groups", "6"])] {
        let mut args = vec!["baseline", kind, "--n", "30", "--mock", "--corpus", s(&corpus), "--output-dir", s(&out)];
        args.extend(extra);
        let o = curate(&args);
        assert!(o.status.success(), "{kind}: {}", text(&o));
        let subset: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join(format!("baseline-{kind}.json"))).unwrap()).unwrap();
        assert_eq!(subset.as_array().unwrap().len(), 30, "{kind}");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 50);
    let out = dir.path().join("out");
    let o = curate(&["run", "--mock", "--corpus", s(&corpus), "--output-dir", s(&out), "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = curate(&["run", "--mock", "--output-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = curate(&["run", "--mock", "--corpus", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "colour = \"blue\"\n").unwrap();
    let o = curate(&["run", "--config", s(&bad), "--mock"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn unreachable_provider_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 30);
    let cfg = dir.path().join("remote.toml");
    std::fs::write(
        &cfg,
        format!(
            "corpus = {:?}\noutput_dir = {:?}\n[embedding]\nkind = \"remote_api\"\n[embedding.endpoint]\nbase_url = \"http://127.0.0.1:9/v1\"\ntimeout_secs = 2\n[embedding.endpoint.retry]\nmax_retries = 0\n",
            s(&corpus),
            s(&dir.path().join("out"))
        ),
    )
    .unwrap();
    let o = curate(&["filter", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn inconsistent_report_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 100);
    let out = dir.path().join("out");
    let o = curate(&["run", "--mock", "--corpus", s(&corpus), "--output-dir", s(&out), "--clusters", "5"]);
    assert!(o.status.success(), "{}", text(&o));
    let path = out.join("report.json");
    let mut report: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    let merged = report["counts"]["merged"].as_u64().unwrap();
    report["counts"]["merged"] = (merged + 1).into();
    std::fs::write(&path, serde_json::to_vec(&report).unwrap()).unwrap();
    let o = curate(&["report", "--path", s(&path)]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
}
