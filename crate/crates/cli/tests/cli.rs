use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn s3attn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3attn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = s3attn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    corpus: PathBuf,
    index: PathBuf,
}

impl Fixture {
    fn new(seed: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let corpus = dir.path().join("corpus");
        let index = dir.path().join("ctx.s3ix");
        ok(&[
            "synth",
            "--n-cases",
            "2",
            "--seed",
            seed,
            "--train-steps",
            "10",
            "-o",
            p(&corpus),
        ]);
        ok(&[
            "index",
            "--activations",
            p(&corpus.join("case-0000/context.s3ac")),
            "--sae",
            p(&corpus.join("sae.s3sa")),
            "-o",
            p(&index),
            "--chunk-size",
            "256",
        ]);
        Fixture {
            _dir: dir,
            corpus,
            index,
        }
    }

    fn case(&self, name: &str) -> String {
        p(&self.corpus.join("case-0000").join(name)).to_string()
    }

    fn query_args(&self) -> Vec<String> {
        vec![
            "query".into(),
            "--index".into(),
            p(&self.index).into(),
            "--sae".into(),
            p(&self.corpus.join("sae.s3sa")).into(),
            "--query".into(),
            self.case("query.s3ac"),
            "--tokens".into(),
            self.case("context.s3ac"),
        ]
    }
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn synth_is_byte_stable_for_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--n-cases",
            "1",
            "--seed",
            "7",
            "--train-steps",
            "10",
            "-o",
            p(out),
        ]);
    }
    for f in [
        "sae.s3sa",
        "case-0000/context.s3ac",
        "case-0000/query.s3ac",
        "case-0000/gold.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn query_output_is_deterministic_and_covers_gold() {
    let fx = Fixture::new("3");
    let args = fx.query_args();
    let first = ok(&strs(&args));
    let second = ok(&strs(&args));
    assert_eq!(first, second);
    assert_eq!(first.lines().count(), 1);

    let record: serde_json::Value = serde_json::from_str(&first).unwrap();
    let gold: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.case("gold.json")).unwrap()).unwrap();
    let positions: Vec<u64> = record["positions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    for span in gold["evidence"].as_array().unwrap() {
        let (a, b) = (span[0].as_u64().unwrap(), span[1].as_u64().unwrap());
        assert!((a..=b).all(|q| positions.binary_search(&q).is_ok()));
    }
    let answer = gold["answer"].as_str().unwrap();
    assert!(record["text"].as_str().unwrap().contains(answer));

    let timing = String::from_utf8(s3attn(&strs(&args)).stderr).unwrap();
    let timing: serde_json::Value = serde_json::from_str(timing.trim()).unwrap();
    assert!(timing["timings"]["coverage"].as_f64().unwrap() >= 0.99);
}

#[test]
fn query_with_answer_reports_metrics() {
    let fx = Fixture::new("4");
    let mut args = fx.query_args();
    args.extend(["--answer".into(), "zx0000a zx0000b".into()]);
    let record: serde_json::Value = serde_json::from_str(&ok(&strs(&args))).unwrap();
    let m = &record["metrics"]["answer"];
    assert_eq!(m["answer_recall"], 1);
    assert!(m["nll"].as_f64().unwrap() > 0.0);
    assert!(m["kl"].as_f64().unwrap() >= 0.0);
}

#[test]
fn config_file_overrides_flags() {
    let fx = Fixture::new("5");
    let cfg = fx.index.with_extension("toml");
    fs::write(&cfg, "retriever = \"s3-pure\"\nlead_tokens = 3\n").unwrap();
    let mut args = fx.query_args();
    args.extend([
        "--retriever".into(),
        "bm25".into(),
        "--config".into(),
        p(&cfg).into(),
    ]);
    let record: serde_json::Value = serde_json::from_str(&ok(&strs(&args))).unwrap();
    assert_eq!(record["retriever"], "s3-pure");
    let positions = record["positions"].as_array().unwrap();
    assert_eq!(positions[..3], [0, 1, 2]);
    assert_ne!(positions[3], 3);
}

#[test]
fn oracle_retriever_matches_pure_from_the_command_line() {
    let fx = Fixture::new("6");
    let mut pure = fx.query_args();
    pure.extend(["--retriever".into(), "s3-pure".into()]);
    let mut oracle = fx.query_args();
    oracle.extend([
        "--retriever".into(),
        "oracle".into(),
        "--context".into(),
        fx.case("context.s3ac"),
    ]);
    let a: serde_json::Value = serde_json::from_str(&ok(&strs(&pure))).unwrap();
    let b: serde_json::Value = serde_json::from_str(&ok(&strs(&oracle))).unwrap();
    assert_eq!(a["positions"], b["positions"]);
    assert_eq!(
        a["spans"].as_array().unwrap().len(),
        b["spans"].as_array().unwrap().len()
    );
}

#[test]
fn eval_prints_cases_then_summary() {
    let fx = Fixture::new("8");
    let out = ok(&["eval", p(&fx.corpus)]);
    let lines: Vec<serde_json::Value> = out
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], "case-0000");
    let summary = &lines[2]["summary"];
    assert_eq!(summary["cases"], 2);
    assert_eq!(summary["mean_evidence_recall"], 1.0);
}

#[test]
fn inspect_reports_postings() {
    let fx = Fixture::new("9");
    let report: serde_json::Value = serde_json::from_str(&ok(&["inspect", p(&fx.index)])).unwrap();
    // 2000 positions, 2 layers, 3 features per code.
    assert_eq!(report["memory"]["postings"], 12000);
    assert_eq!(report["memory"]["positions_bytes"], 48000);
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);
}

#[test]
fn empty_activation_file_is_a_format_error() {
    let fx = Fixture::new("10");
    let empty = fx.index.with_file_name("empty.s3ac");
    fs::write(&empty, b"").unwrap();
    let out = s3attn(&[
        "index",
        "--activations",
        p(&empty),
        "--sae",
        p(&fx.corpus.join("sae.s3sa")),
        "-o",
        p(&fx.index.with_file_name("x.s3ix")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));
}

#[test]
fn corrupt_index_is_a_format_error() {
    let fx = Fixture::new("11");
    let bad = fx.index.with_file_name("bad.s3ix");
    fs::write(&bad, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = s3attn(&["inspect", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fingerprint_mismatch_is_refused() {
    let fx = Fixture::new("12");
    let other = Fixture::new("13");
    let mut args = fx.query_args();
    args[4] = p(&other.corpus.join("sae.s3sa")).into();
    let out = s3attn(&strs(&args));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn invalid_config_is_a_contract_violation() {
    let fx = Fixture::new("14");
    let mut args = fx.query_args();
    args.extend(["--kernel-size".into(), "0".into()]);
    assert_eq!(s3attn(&strs(&args)).status.code(), Some(3));
}

#[test]
fn unknown_retriever_lists_available_ones() {
    let fx = Fixture::new("15");
    let mut args = fx.query_args();
    args.extend(["--retriever".into(), "dense".into()]);
    let out = s3attn(&strs(&args));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("s3-hybrid"));
}

#[test]
fn plain_text_token_file_is_accepted() {
    let fx = Fixture::new("16");
    let words: Vec<String> = (0..2000).map(|i| format!("t{i}")).collect();
    let txt = fx.index.with_file_name("tokens.txt");
    fs::write(&txt, words.join("\n")).unwrap();
    let mut args = fx.query_args();
    args[8] = p(&txt).into();
    let record: serde_json::Value = serde_json::from_str(&ok(&strs(&args))).unwrap();
    assert!(record["text"].as_str().unwrap().starts_with("t0 t1 t2"));

    fs::write(&txt, words[..10].join("\n")).unwrap();
    assert_eq!(s3attn(&strs(&args)).status.code(), Some(3));
}
