use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use beliefnet::nn_core::Checkpoint;
use beliefnet::textfmt::TextDoc;
use beliefnet_cli::commands::init_network;
use beliefnet_cli::config::RunConfig;

fn bin(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beliefnet")).args(args).env("BELIEFNET_OUT", root).output().unwrap()
}

fn ok(args: &[&str], root: &Path) -> String {
    let o = bin(args, root);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str], root: &Path) -> i32 {
    bin(args, root).status.code().unwrap()
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }
    fn p(&self, s: &str) -> String {
        self.0.path().join(s).to_str().unwrap().to_string()
    }
    fn root(&self) -> PathBuf {
        self.0.path().join("runs")
    }
}

fn gen(d: &Dir, name: &str, extra: &[&str]) -> String {
    let out = d.p(name);
    let mut args = vec!["gen", "--out", &out];
    args.extend(extra);
    ok(&args, &d.root());
    out
}

fn read(dir: &str, f: &str) -> Vec<u8> {
    fs::read(Path::new(dir).join(f)).unwrap()
}

#[test]
fn gen_with_zero_count_writes_empty_records() {
    let d = Dir::new();
    let out = gen(&d, "g", &["--model-kind", "hmm", "--count", "0", "--T", "5"]);
    let doc = TextDoc::parse(&String::from_utf8(read(&out, "records.txt")).unwrap()).unwrap();
    assert_eq!(doc.get_field("count").unwrap(), "0");
    assert!(doc.tensors.is_empty());
}

#[test]
fn gen_is_deterministic() {
    let d = Dir::new();
    let args = ["--model-kind", "cyclic-det", "--n", "3", "--m", "3", "--T", "9", "--count", "7", "--seed", "4"];
    let a = gen(&d, "a", &args);
    let b = gen(&d, "b", &args);
    for f in ["model.txt", "records.txt"] {
        assert_eq!(read(&a, f), read(&b, f));
    }
    let c = gen(&d, "c", &["--model-kind", "cyclic-det", "--n", "3", "--m", "3", "--T", "9", "--count", "7", "--seed", "5"]);
    assert_ne!(read(&a, "records.txt"), read(&c, "records.txt"));
}

#[test]
fn default_out_dir_is_under_the_env_root() {
    let d = Dir::new();
    let ds = gen(&d, "h", &["--model-kind", "hmm", "--n", "2", "--m", "2", "--count", "1"]);
    let s = ok(&["eval", "--oracle", "--model", &format!("{ds}/model.txt"), "--T", "4", "--rollouts", "2"], &d.root());
    assert!(s.contains("wrote"), "{s}");
    let dirs: Vec<_> = fs::read_dir(d.root()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("eval-") && dirs[0].len() == "eval-".len() + 12, "{dirs:?}");
}

#[test]
fn construct_and_verify_tf() {
    let d = Dir::new();
    let ds = gen(&d, "mm", &["--model-kind", "matmul", "--n", "3", "--m", "3", "--count", "1", "--T", "16"]);
    let model = format!("{ds}/model.txt");
    let c = d.p("c");
    let s = ok(&["construct", "--model", &model, "--theorem", "tf", "--T", "16", "--out", &c], &d.root());
    assert!(s.contains("transformer layers 4 "), "{s}");
    let ck = format!("{c}/checkpoint.txt");
    ok(&["verify", "--checkpoint", &ck, "--model", &model, "--out", &d.p("v")], &d.root());

    // a checkpoint for another model is refused
    let other = gen(&d, "mm2", &["--model-kind", "matmul", "--n", "3", "--m", "3", "--count", "1", "--seed", "9"]);
    assert_eq!(code(&["verify", "--checkpoint", &ck, "--model", &format!("{other}/model.txt"), "--out", &d.p("v2")], &d.root()), 2);

    // corrupted checkpoint is a parse error
    let bad = d.p("bad.txt");
    let text = fs::read_to_string(&ck).unwrap();
    fs::write(&bad, &text[..text.len() / 2]).unwrap();
    let o = bin(&["verify", "--checkpoint", &bad, "--model", &model, "--out", &d.p("v3")], &d.root());
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn rnn_construction_rejects_stochastic_models() {
    let d = Dir::new();
    let ds = gen(&d, "h", &["--model-kind", "hmm", "--n", "3", "--m", "3", "--count", "1"]);
    assert_eq!(code(&["construct", "--model", &format!("{ds}/model.txt"), "--theorem", "rnn", "--out", &d.p("c")], &d.root()), 2);
}

#[test]
fn norm_construction_reports_phase_sizes() {
    let d = Dir::new();
    let ds = gen(&d, "h", &["--model-kind", "hmm", "--n", "3", "--m", "3", "--floor", "0.1", "--count", "1"]);
    let model = format!("{ds}/model.txt");
    let c = d.p("c");
    let s = ok(&["construct", "--model", &model, "--theorem", "norm", "--T", "8", "--out", &c], &d.root());
    assert!(s.contains("phase1 layers") && s.contains("phase2 layers"), "{s}");
    ok(&["verify", "--checkpoint", &format!("{c}/checkpoint.txt"), "--model", &model, "--out", &d.p("v")], &d.root());
}

#[test]
fn oracle_fit_length_is_full_horizon() {
    let d = Dir::new();
    let ds = gen(&d, "h", &["--model-kind", "hmm", "--n", "4", "--m", "3", "--count", "1"]);
    let e = d.p("e");
    ok(&["eval", "--oracle", "--model", &format!("{ds}/model.txt"), "--T", "20", "--rollouts", "8", "--out", &e], &d.root());
    let s = ok(&["fitlen", "--losses", &format!("{e}/eval.csv")], &d.root());
    assert!(s.contains("fit eps=0.05 length=20"), "{s}");
}

#[test]
fn bcot_with_full_block_equals_eval() {
    let d = Dir::new();
    let ds = gen(&d, "mm", &["--model-kind", "matmul", "--n", "3", "--m", "3", "--count", "1"]);
    let model = format!("{ds}/model.txt");
    let c = d.p("c");
    ok(&["construct", "--model", &model, "--theorem", "tf", "--T", "16", "--block", "16", "--out", &c], &d.root());
    let ck = format!("{c}/checkpoint.txt");
    let common = ["--model", &model, "--checkpoint", &ck, "--T", "16", "--rollouts", "4"];
    let (e, b) = (d.p("e"), d.p("b"));
    let mut a1 = vec!["eval", "--out", &e];
    a1.extend(common);
    ok(&a1, &d.root());
    let mut a2 = vec!["bcot", "--block", "16", "--out", &b];
    a2.extend(common);
    ok(&a2, &d.root());
    assert_eq!(read(&e, "eval.csv"), read(&b, "eval.csv"));
    assert_eq!(read(&e, "eval.json"), read(&b, "eval.json"));
}

#[test]
fn train_zero_epochs_returns_initial_weights() {
    let d = Dir::new();
    let ds = gen(&d, "h", &["--model-kind", "hmm", "--n", "3", "--m", "2", "--T", "6", "--count", "8"]);
    let t = d.p("t");
    ok(&["train", "--data", &ds, "--dim", "8", "--heads", "2", "--epochs", "0", "--eval-rollouts", "0", "--seed", "3", "--out", &t], &d.root());
    let ck = Checkpoint::from_doc(&TextDoc::parse(&fs::read_to_string(format!("{t}/checkpoint.txt")).unwrap()).unwrap()).unwrap();
    let bag: BTreeMap<String, String> =
        [("data", ds.as_str()), ("dim", "8"), ("heads", "2"), ("seed", "3")].map(|(k, v)| (k.to_string(), v.to_string())).into();
    let cfg = RunConfig::new("train", bag).unwrap();
    assert_eq!(ck.network, init_network(&cfg, 2, 3).unwrap());
}

#[test]
fn replay_reproduces_training_and_checks_inputs() {
    let d = Dir::new();
    let ds = gen(&d, "h", &["--model-kind", "hmm", "--n", "3", "--m", "3", "--T", "8", "--count", "32"]);
    let (a, b, c) = (d.p("a"), d.p("b"), d.p("c"));
    ok(&["train", "--data", &ds, "--net", "rnn", "--dim", "8", "--epochs", "2", "--batch", "8", "--eval-rollouts", "16", "--out", &a], &d.root());
    let cfg = format!("{a}/run-config.txt");
    ok(&["replay", "--config", &cfg, "--out", &b], &d.root());
    for f in ["metrics.csv", "checkpoint.txt", "step-losses.csv", "digests.txt"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    // same path, different data: the recorded input digest no longer matches
    fs::remove_dir_all(&ds).unwrap();
    gen(&d, "h", &["--model-kind", "hmm", "--n", "3", "--m", "3", "--T", "8", "--count", "32", "--seed", "1"]);
    assert_eq!(code(&["replay", "--config", &cfg, "--out", &c], &d.root()), 2);
}

#[test]
fn exit_codes() {
    let d = Dir::new();
    assert_eq!(code(&["gen"], &d.root()), 2);
    assert_eq!(code(&["gen", "--model-kind", "nope"], &d.root()), 2);
    assert_eq!(code(&["frobnicate"], &d.root()), 2);
    assert_eq!(code(&["cost", "--block", "0"], &d.root()), 2);
    assert_eq!(code(&["train", "--data", &d.p("missing")], &d.root()), 3);
    assert_eq!(code(&["fitlen", "--losses", &d.p("missing.csv")], &d.root()), 3);
    assert_eq!(code(&["--help"], &d.root()), 0);
}
