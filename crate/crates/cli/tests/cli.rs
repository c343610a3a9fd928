use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neurocache::data::TokenStreamFile;
use tempfile::TempDir;

fn neurocache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurocache"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = neurocache(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .to_string()
}

/// Untrained checkpoint and one 96-token document.
fn fixture(dir: &TempDir) -> (PathBuf, PathBuf) {
    let data = dir.path().join("doc.nctk");
    let doc: Vec<u32> = (0..96).map(|i| (i * 37 % 128) as u32).collect();
    TokenStreamFile::new(vec![doc]).save(&data).unwrap();
    let ckpt = dir.path().join("init.nckpt");
    ok(&[
        "train",
        "--data",
        path_str(&data),
        "--out",
        path_str(&ckpt),
        "--steps",
        "0",
    ]);
    (ckpt, data)
}

#[test]
fn missing_data_file_exits_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.nctk");
    let out = neurocache(&[
        "train",
        "--data",
        path_str(&missing),
        "--out",
        path_str(&dir.path().join("x.nckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(path_str(&missing)), "{stderr}");
}

#[test]
fn dumps_report_fifo_counters() {
    let dir = TempDir::new().unwrap();
    let (ckpt, data) = fixture(&dir);

    let fresh = dir.path().join("fresh.dump");
    ok(&[
        "eval-ppl",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--no-cache",
        "--dump-cache",
        path_str(&fresh),
    ]);
    let report = ok(&["inspect-cache", path_str(&fresh)]);
    assert_eq!(field(&report, "valid_count"), "0");

    let full = dir.path().join("full.dump");
    ok(&[
        "eval-ppl",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--cache-size",
        "64",
        "--dump-cache",
        path_str(&full),
    ]);
    let report = ok(&["inspect-cache", path_str(&full)]);
    assert_eq!(field(&report, "m"), "64");
    assert_eq!(field(&report, "valid_count"), "64");
    assert_eq!(field(&report, "epoch"), "96");
}

#[test]
fn truncated_dump_exits_3() {
    let dir = TempDir::new().unwrap();
    let (ckpt, data) = fixture(&dir);
    let dump = dir.path().join("cache.dump");
    ok(&[
        "eval-ppl",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--dump-cache",
        path_str(&dump),
    ]);
    let bytes = std::fs::read(&dump).unwrap();
    std::fs::write(&dump, &bytes[..bytes.len() - 5]).unwrap();
    let out = neurocache(&["inspect-cache", path_str(&dump)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt cache dump"));
}

#[test]
fn cache_smaller_than_segment_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (ckpt, data) = fixture(&dir);
    let out = neurocache(&[
        "eval-ppl",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--cache-size",
        "16",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cache_size"));
}

#[test]
fn untrained_perplexity_is_near_vocab_size() {
    let dir = TempDir::new().unwrap();
    let (ckpt, data) = fixture(&dir);
    let out = ok(&["eval-ppl", "--checkpoint", path_str(&ckpt), "--data", path_str(&data)]);
    let aggregate = field(&out, "aggregate");
    let (tokens, ppl) = aggregate.split_once('\t').unwrap();
    assert_eq!(tokens, "96");
    let ppl: f64 = ppl.parse().unwrap();
    assert!((100.0..160.0).contains(&ppl), "ppl {ppl}");
}

#[test]
fn bench_reports_queries_per_token() {
    for (method, want) in [("neurocache", "1"), ("per-head", "12"), ("unlimiformer-count", "144")] {
        let out = ok(&[
            "bench-retrieval",
            "--method",
            method,
            "--m",
            "64,128",
            "--tokens",
            "4",
        ]);
        let rows: Vec<&str> = out.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        for row in rows {
            let cols: Vec<&str> = row.split('\t').collect();
            assert_eq!(cols[2], want, "{method}: {row}");
        }
    }
    let out = neurocache(&["bench-retrieval", "--reps", "10"]);
    assert!(!out.status.success());
}

fn recall_data(dir: &TempDir) -> PathBuf {
    let data = dir.path().join("recall.nctk");
    ok(&["gen-recall", "--out", path_str(&data), "--docs", "64"]);
    data
}

fn train_log(dir: &TempDir, data: &Path, name: &str, steps: usize) -> Vec<Vec<String>> {
    let ckpt = dir.path().join(format!("{name}.nckpt"));
    let steps = steps.to_string();
    ok(&[
        "--seed",
        "7",
        "train",
        "--data",
        path_str(data),
        "--out",
        path_str(&ckpt),
        "--steps",
        &steps,
        "--lanes",
        "2",
        "--segments-per-step",
        "2",
        "--lr",
        "3e-3",
    ]);
    let text = std::fs::read_to_string(ckpt.with_extension("tsv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step\tloss\ttokens\ttokens_per_s"));
    lines.map(|l| l.split('\t').map(String::from).collect()).collect()
}

#[test]
fn training_loss_trends_down() {
    let dir = TempDir::new().unwrap();
    let data = recall_data(&dir);
    let log = train_log(&dir, &data, "trend", 300);
    assert_eq!(log.len(), 300);
    let mean = |rows: &[Vec<String>]| rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
    let (head, tail) = (mean(&log[..30]), mean(&log[270..]));
    assert!(tail < head - 0.3, "loss {head:.3} -> {tail:.3}");
}

#[test]
fn same_seed_same_log() {
    let dir = TempDir::new().unwrap();
    let data = recall_data(&dir);
    let a = train_log(&dir, &data, "a", 15);
    let b = train_log(&dir, &data, "b", 15);
    // throughput is wall-clock and differs between runs
    let strip = |log: Vec<Vec<String>>| log.into_iter().map(|r| r[..3].to_vec()).collect::<Vec<_>>();
    assert_eq!(strip(a), strip(b));
    let ca = std::fs::read(dir.path().join("a.nckpt")).unwrap();
    let cb = std::fs::read(dir.path().join("b.nckpt")).unwrap();
    assert_eq!(ca, cb);
}
