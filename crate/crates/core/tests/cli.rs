use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng as _;
use rnnadv::data::Dataset;
use rnnadv::Tensor;

fn synthetic(dir: &Path) {
    let mut rng = rnnadv::seed::rng(42);
    for (prefix, n) in [("train", 48), ("t10k", 24)] {
        let x: Vec<f64> = (0..n * 784).map(|_| f64::from(rng.random_range(0u8..=255)) / 255.0).collect();
        let y: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let ds = Dataset::new(Tensor::new(vec![n, 1, 28, 28], x).unwrap(), y, 10).unwrap();
        ds.write_idx(
            &dir.join(format!("{prefix}-images-idx3-ubyte")),
            &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
        .unwrap();
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::create_dir(root.join("data")).unwrap();
        synthetic(&root.join("data"));
        Fixture { _tmp: tmp, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rnnadv"))
            .args(args)
            .env("RNNADV_DATA", self.root.join("data"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }
}

/// Every output file except the effective config (which names its own
/// output directory) must match byte for byte.
fn assert_same_outputs(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 1);
    for n in names {
        if n == "effective-config.txt" {
            continue;
        }
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

fn rerun(f: &Fixture, cmd: &str, first: &str, second: &str) {
    let cfg = f.path(&format!("{first}/effective-config.txt"));
    f.ok(&[cmd, "--config", &cfg, "--out", &f.path(second)]);
    assert_same_outputs(&f.root.join(first), &f.root.join(second));
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    assert_eq!(f.run(&["--help"]).status.code(), Some(0));
    assert_eq!(f.run(&[]).status.code(), Some(1));
    assert_eq!(f.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(f.run(&["train", "--objective", "advtrain", "--inner-steps", "0"]).status.code(), Some(1));
    assert_eq!(f.run(&["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(f.run(&["attack", "--classifier-ckpt", "x", "--family", "learned"]).status.code(), Some(1));
    let missing = f.run(&["attack", "--classifier-ckpt", &f.path("nope.ckpt"), "--out", &f.path("o")]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_data = Command::new(env!("CARGO_BIN_EXE_rnnadv"))
        .args(["train", "--epochs", "1", "--data", &f.path("nowhere"), "--out", &f.path("o2")])
        .output()
        .unwrap();
    assert_eq!(bad_data.status.code(), Some(2));
}

#[test]
fn every_command_reproduces_from_its_effective_config() {
    let f = Fixture::new();
    let small = ["--epochs", "1", "--batch-size", "16", "--inner-steps", "2", "--subset", "0", "--test-subset", "0"];

    let mut args = vec!["train", "--objective", "rnn-trades", "--lambda", "6", "--seed", "3", "--out"];
    let out = f.path("train-a");
    args.push(&out);
    args.extend(small);
    f.ok(&args);
    let cfg = fs::read_to_string(f.root.join("train-a/effective-config.txt")).unwrap();
    assert!(cfg.contains("lambda = 6\n"));
    assert!(cfg.contains("pgd-step = 0.075\n"));
    for name in ["classifier.ckpt", "optimizer.ckpt", "train-log.jsonl", "classifier-epoch0.ckpt", "optimizer-epoch0.ckpt"] {
        assert!(f.root.join("train-a").join(name).exists(), "{name}");
    }
    rerun(&f, "train", "train-a", "train-b");

    let mut args = vec!["train", "--objective", "plain", "--out"];
    let plain = f.path("plain");
    args.push(&plain);
    args.extend(small);
    f.ok(&args);

    let clf = f.path("train-a/classifier.ckpt");
    let opt = f.path("train-a/optimizer.ckpt");
    let plain_clf = f.path("plain/classifier.ckpt");

    f.ok(&["attack", "--classifier-ckpt", &clf, "--family", "learned", "--optimizer-ckpt", &opt, "--steps", "3", "--out", &f.path("att-a")]);
    rerun(&f, "attack", "att-a", "att-b");
    f.ok(&["attack", "--classifier-ckpt", &clf, "--family", "pgd-bls", "--steps", "3", "--out", &f.path("bls-a")]);
    rerun(&f, "attack", "bls-a", "bls-b");

    let defenses = format!("rnn:{clf},plain:{plain_clf}");
    f.ok(&["eval", "--defenses", &defenses, "--attacks", "fgsm,pgd3,cw3,learned3", "--optimizer-ckpt", &opt, "--out", &f.path("ev-a")]);
    let csv = fs::read_to_string(f.root.join("ev-a/report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "Defense,Natural,fgsm,pgd3,cw3,learned3,Min");
    assert_eq!(csv.lines().count(), 3);
    rerun(&f, "eval", "ev-a", "ev-b");

    f.ok(&["landscape", "--classifier-ckpt", &clf, "--seed", "7", "--resolution", "5", "--out", &f.path("ls-a")]);
    f.ok(&["landscape", "--classifier-ckpt", &clf, "--seed", "7", "--resolution", "5", "--out", &f.path("ls-c")]);
    assert_same_outputs(&f.root.join("ls-a"), &f.root.join("ls-c"));
    rerun(&f, "landscape", "ls-a", "ls-b");

    // Surrogate == target is the white-box setting.
    f.ok(&["transfer", "--surrogate-ckpt", &clf, "--target-ckpt", &clf, "--attack", "pgd3", "--out", &f.path("tr-a")]);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.root.join("tr-a/transfer.json")).unwrap()).unwrap();
    assert_eq!(rec["transfer_accuracy"], rec["white_box_accuracy"]);
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.root.join("ev-a/report.json")).unwrap()).unwrap();
    assert_eq!(rec["white_box_accuracy"], ev["rows"][0]["cells"][1]);
    rerun(&f, "transfer", "tr-a", "tr-b");
}
