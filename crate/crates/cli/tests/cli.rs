use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[encoder]
embed_dim = 16
patch_size = 8
transformer_layers = 1
transformer_heads = 2
transformer_ff = 32
attention_heads = 2
conv_channels = [8, 16]
conv_kernels = [5, 3]
text_layers = 1
text_heads = 2
text_ff = 32
[train]
batch_size = 16
epochs = 2
"#;

fn tsdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdiff"))
        .args(args)
        .env("TSDIFF_THREADS", "1")
        .output()
        .expect("spawn tsdiff")
}

fn ok(args: &[&str]) -> String {
    let out = tsdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    cfg: PathBuf,
    data: PathBuf,
    queries: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let queries = root.join("queries");
    ok(&[
        "--config",
        s(&cfg),
        "gen-data",
        "--train",
        "64",
        "--val",
        "16",
        "--test",
        "120",
        "--length",
        "64",
        "--out",
        s(&data),
    ]);
    ok(&[
        "--config",
        s(&cfg),
        "gen-queries",
        "--per-label",
        "10",
        "--out",
        s(&queries),
    ]);
    Fixture {
        _tmp: tmp,
        root,
        cfg,
        data,
        queries,
    }
}

#[test]
fn generators_are_byte_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = |n: &str| tmp.path().join(n);
    for name in ["a", "b"] {
        ok(&[
            "--seed",
            "9",
            "gen-data",
            "--train",
            "30",
            "--val",
            "6",
            "--test",
            "12",
            "--length",
            "32",
            "--out",
            s(&dir(&format!("d{name}"))),
        ]);
        ok(&[
            "--seed",
            "9",
            "gen-queries",
            "--per-label",
            "10",
            "--out",
            s(&dir(&format!("q{name}"))),
        ]);
    }
    let da = files(&dir("da"));
    assert!(da.iter().any(|(p, _)| p.ends_with("samples.bin")));
    assert!(da.iter().any(|(p, _)| p.ends_with("resolved-config.toml")));
    assert_eq!(da, files(&dir("db")));
    let qa = files(&dir("qa"));
    assert_eq!(qa, files(&dir("qb")));
    let all = std::str::from_utf8(
        &qa.iter()
            .find(|(p, _)| p.ends_with("queries.jsonl"))
            .unwrap()
            .1,
    )
    .unwrap();
    assert_eq!(all.lines().count(), 120);

    ok(&[
        "--seed",
        "10",
        "gen-data",
        "--train",
        "30",
        "--val",
        "6",
        "--test",
        "12",
        "--length",
        "32",
        "--out",
        s(&dir("dc")),
    ]);
    assert_ne!(da, files(&dir("dc")));
}

#[test]
fn errors_are_single_line_with_class_and_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&[&str], i32, &str); 4] = [
        (&["gen-data", "--bogus"], 2, "error[usage]:"),
        (
            &["gen-data", "--train", "0", "--out", s(tmp.path())],
            2,
            "error[usage]:",
        ),
        (
            &["gen-queries", "--per-label", "1", "--out", s(tmp.path())],
            2,
            "error[usage]:",
        ),
        (
            &[
                "index",
                "--checkpoint",
                "/nonexistent/c.bin",
                "--dataset",
                "/nonexistent",
                "--out",
                s(tmp.path()),
            ],
            3,
            "error[data]:",
        ),
    ];
    for (args, code, prefix) in cases {
        let out = tsdiff(args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with(prefix), "{args:?}: {err}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    }
    let out = tsdiff(&["--help"]);
    assert!(out.status.success());
}

#[test]
fn pipeline_trains_indexes_searches_and_reports() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&[
        "--config",
        s(&f.cfg),
        "train",
        "--dataset",
        s(&f.data),
        "--queries",
        s(&f.queries),
        "--out",
        s(&run),
    ]);
    for name in [
        "checkpoint.bin",
        "metrics.jsonl",
        "resolved-config.toml",
        "bindings-train.jsonl",
        "bindings-val.jsonl",
    ] {
        assert!(run.join(name).exists(), "{name}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let resolved = std::fs::read_to_string(run.join("resolved-config.toml")).unwrap();
    assert!(resolved.contains("series_length = 64"), "{resolved}");

    let ckpt = run.join("checkpoint.bin");
    let index = run.join("test.index");
    ok(&[
        "index",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&f.data),
        "--out",
        s(&index),
    ]);

    let hits = ok(&[
        "search",
        "--checkpoint",
        s(&ckpt),
        "--index",
        s(&index),
        "--k",
        "5",
        "--query",
        "The target data has larger noise than the reference data.",
    ]);
    let hits: Vec<serde_json::Value> = hits
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(hits.len(), 5);
    for w in hits.windows(2) {
        assert!(w[0]["score"].as_f64().unwrap() >= w[1]["score"].as_f64().unwrap());
    }

    let report = run.join("report.json");
    let table = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&f.data),
        "--queries",
        s(&f.queries),
        "--report",
        s(&report),
        "--index",
        s(&index),
    ]);
    assert!(table.contains("Total"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["columns"].as_array().unwrap().len(), 13);
    let row = &json["rows"][0];
    assert_eq!(row["method"], "transformer-diff-noxattn");
    assert_eq!(row["values"].as_array().unwrap().len(), 13);
    for v in row["values"].as_array().unwrap() {
        let v = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&f.data),
        "--queries",
        s(&f.queries),
        "--report",
        s(&report),
        "--append",
        "--method",
        "again",
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert_eq!(json["rows"][0]["values"], json["rows"][1]["values"]);

    // an index from another model is refused
    let other = f.root.join("other");
    ok(&[
        "--config",
        s(&f.cfg),
        "--seed",
        "6",
        "train",
        "--dataset",
        s(&f.data),
        "--queries",
        s(&f.queries),
        "--epochs",
        "1",
        "--out",
        s(&other),
    ]);
    let out = tsdiff(&[
        "search",
        "--checkpoint",
        s(&other.join("checkpoint.bin")),
        "--index",
        s(&index),
        "--query",
        "noise",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn single_threaded_training_is_byte_reproducible() {
    let f = fixture();
    let mut ckpts = Vec::new();
    for name in ["r1", "r2"] {
        let out = f.root.join(name);
        ok(&[
            "--config",
            s(&f.cfg),
            "train",
            "--dataset",
            s(&f.data),
            "--queries",
            s(&f.queries),
            "--epochs",
            "1",
            "--signal-arch",
            "conv",
            "--merge",
            "concat",
            "--cross-attention",
            "true",
            "--out",
            s(&out),
        ]);
        ckpts.push(std::fs::read(out.join("checkpoint.bin")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
}
