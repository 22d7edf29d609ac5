use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cadret_core::corpus::{load_manifest, LoadOptions};
use cadret_core::eval::evaluate_records;
use cadret_core::{InferenceModel, MetricReport, Split};
use cadret_service::{handle_query, QueryRequest, QueryResponse, Snapshot};
use tempfile::TempDir;

fn cadret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadret"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cadret(args);
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

struct Pipeline {
    dir: TempDir,
}

impl Pipeline {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

const TRAIN: &[&str] = &[
    "--preset", "desk", "--batch-size", "8", "--epochs", "2", "--lr", "1e-3", "--seed", "5",
];

fn train_into(p: &Pipeline, out: &Path) {
    let manifest = p.path("data/manifest.jsonl");
    let mut argv = vec!["train", "--manifest", s(&manifest), "--out", s(out)];
    argv.extend_from_slice(TRAIN);
    ok(&argv);
}

/// synth -> ingest -> train -> index, shared by the tests below.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let p = Pipeline { dir: tempfile::tempdir().unwrap() };
        ok(&[
            "synth", "--out", s(&p.path("raw")), "--train", "16", "--val", "4", "--test", "8",
            "--points-per-model", "64", "--seed", "7",
        ]);
        ok(&[
            "ingest", "--manifest", s(&p.path("raw/manifest.jsonl")), "--out", s(&p.path("data")),
            "--points-per-model", "64", "--seed", "1",
        ]);
        train_into(&p, &p.path("run"));
        ok(&[
            "index", "--checkpoint", s(&p.path("run/best.ckpt")), "--manifest",
            s(&p.path("data/manifest.jsonl")), "--out", s(&p.path("index")),
        ]);
        p
    })
}

#[test]
fn help_lists_every_verb() {
    let out = ok(&["--help"]);
    for verb in ["ingest", "train", "eval", "index", "query", "export-heatmap", "serve", "ablation"] {
        assert!(out.contains(verb), "missing {verb} in help");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--manifest", "--dataset", "--mask-ratio", "--lambda", "--batch-size", "--epochs", "--seed", "--ablation"] {
        assert!(train.contains(flag), "missing {flag} in train help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cadret(&["frobnicate"]).status.code(), Some(1));
    let out = cadret(&["eval", "--checkpoint", "c", "--manifest", "m", "--report", "r", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cadret(&["train", "--ablation", "xyz", "--manifest", "m", "--out", "o"]).status.code(), Some(1));
    assert_eq!(cadret(&[]).status.code(), Some(1));
}

#[test]
fn missing_files_exit_two() {
    let out = cadret(&["eval", "--checkpoint", "/nonexistent/c.ckpt", "--manifest", "m", "--report", "r"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_exit_one() {
    let p = pipeline();
    let ckpt = p.path("run/best.ckpt");
    let out = cadret(&["query", "--checkpoint", s(&ckpt), "--index", s(&p.path("index")), "--text", "a plate", "--k", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = cadret(&["query", "--checkpoint", s(&ckpt), "--index", s(&p.path("index")), "--text", "  "]);
    assert_eq!(out.status.code(), Some(1));
    let out = cadret(&[
        "train", "--manifest", s(&p.path("data/manifest.jsonl")), "--out", s(&p.path("bad")), "--preset", "desk",
        "--batch-size", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let manifest = p.path("data/manifest.jsonl");
    let out = cadret(&["export-heatmap", "--n", "500", "--manifest", s(&manifest), "--out", s(&p.path("h.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let p = pipeline();
    for f in ["best.ckpt", "last.ckpt", "history.json", "train_log.jsonl", "train_config.json"] {
        assert!(p.path("run").join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(p.path("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let again = p.path("run_again");
    train_into(p, &again);
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl"] {
        assert_eq!(
            std::fs::read(p.path("run").join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn eval_matches_library_call() {
    let p = pipeline();
    let report = p.path("report.json");
    let stdout = ok(&[
        "eval", "--checkpoint", s(&p.path("run/best.ckpt")), "--manifest", s(&p.path("data/manifest.jsonl")),
        "--split", "test", "--report", s(&report),
    ]);
    let from_file: MetricReport = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let from_stdout: MetricReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(from_file, from_stdout);

    let m = InferenceModel::load(&p.path("run/best.ckpt")).unwrap();
    let opts = LoadOptions {
        points_per_model: m.model.config.n_points,
        seed: 0,
        max_seq_len: m.model.config.max_seq_len,
        level: None,
    };
    let corpus = load_manifest(&p.path("data/manifest.jsonl"), &opts, m.provider.as_ref()).unwrap();
    let direct = evaluate_records(&m.model, &m.params, m.provider.as_ref(), &corpus.split(Split::Test)).unwrap();
    assert_eq!(from_file, direct);
    assert_eq!(
        std::fs::read(&report).unwrap(),
        serde_json::to_vec_pretty(&direct).unwrap()
    );
}

#[test]
fn query_prints_ranked_json() {
    let p = pipeline();
    let ckpt = p.path("run/best.ckpt");
    let text = "a cylindrical plate with holes";
    let stdout = ok(&["query", "--checkpoint", s(&ckpt), "--index", s(&p.path("index")), "--text", text, "--k", "5"]);
    let resp: QueryResponse = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(resp.results.len(), 5);
    assert!(resp.results.windows(2).all(|w| w[0].score >= w[1].score));

    let snap = Snapshot::load(&ckpt, &p.path("index")).unwrap();
    let direct = handle_query(&snap, &QueryRequest { text: text.into(), k: 5 }).unwrap();
    assert_eq!(resp.model_version, direct.model_version);
    assert_eq!(resp.results, direct.results);
}

#[test]
fn heatmap_is_square_and_deterministic() {
    let p = pipeline();
    let a = p.path("heat/a.csv");
    let b = p.path("heat/b.csv");
    let ckpt = p.path("run/best.ckpt");
    let manifest = p.path("data/manifest.jsonl");
    for out in [&a, &b] {
        ok(&[
            "export-heatmap", "--n", "5", "--seed", "3", "--out", s(out), "--checkpoint", s(&ckpt), "--manifest",
            s(&manifest),
        ]);
    }
    let csv = std::fs::read_to_string(&a).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    let legend = std::fs::read_to_string(p.path("heat/a.legend.csv")).unwrap();
    assert_eq!(legend.lines().count(), 6);

    let other = p.path("heat/c.csv");
    ok(&["export-heatmap", "--n", "5", "--seed", "4", "--out", s(&other)]);
    assert_eq!(std::fs::read_to_string(&other).unwrap().lines().count(), 6);
}

#[test]
fn full_scale_ablation_prints_four_rows() {
    let out = ok(&["ablation", "--full-scale"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].contains("Rsum"));
    assert!(lines[1].contains("5.00") && lines[3].contains("6.99") && lines[4].contains("9.71"));
}

fn http_get(addr: &str, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(addr).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    stream.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_reads_config_from_env() {
    let p = pipeline();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_cadret"))
        .arg("serve")
        .env("CADRET_CHECKPOINT", p.path("run/best.ckpt"))
        .env("CADRET_INDEX", p.path("index"))
        .env("CADRET_BIND", &addr)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(&addr, "/healthz") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let _ = child.kill();
    let _ = child.wait();
    let reply = reply.expect("server answered");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    let version = InferenceModel::load(&p.path("run/best.ckpt")).unwrap().model_version;
    assert!(reply.contains(&version));
    assert!(reply.contains("\"status\":\"ok\""));
}
