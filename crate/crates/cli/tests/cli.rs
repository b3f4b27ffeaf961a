use std::path::Path;
use std::process::{Command, Output};

fn vqd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqd")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "width = 8\nheads = 2\nlayers = 2\nqueries_per_group = 3\ngrid_size = 6\nepochs = 2\nbatch_size = 2\nruns_dir = runs\n";

fn tiny_data(dir: &Path) {
    std::fs::write(dir.join("tiny.txt"), TINY).unwrap();
    let a = vqd(dir, &["gen-data", "--out", "tr.jsonl", "--scenes", "4", "--seed", "3", "--config", "tiny.txt"]);
    assert!(a.status.success(), "{a:?}");
    let b = vqd(dir, &["gen-data", "--out", "va.jsonl", "--scenes", "3", "--seed", "3", "--split", "val", "--config", "tiny.txt"]);
    assert!(b.status.success(), "{b:?}");
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vqd(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(vqd(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(vqd(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(vqd(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(vqd(dir.path(), &["gen-data", "--scenes", "x", "--out", "a"]).status.code(), Some(1));
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let again = vqd(dir.path(), &["gen-data", "--out", "tr.jsonl", "--scenes", "4"]);
    assert_eq!(again.status.code(), Some(1));
    let forced = vqd(dir.path(), &["gen-data", "--out", "tr.jsonl", "--scenes", "4", "--seed", "3", "--config", "tiny.txt", "--force"]);
    assert!(forced.status.success());
}

#[test]
fn splits_use_disjoint_seeds() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    let tr = std::fs::read_to_string(dir.path().join("tr.jsonl")).unwrap();
    let va = std::fs::read_to_string(dir.path().join("va.jsonl")).unwrap();
    assert_eq!(tr.lines().count(), 4);
    assert_eq!(va.lines().count(), 3);
    assert_ne!(tr.lines().next(), va.lines().next());
}

#[test]
fn bad_config_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "widht = 3\n").unwrap();
    let o = vqd(dir.path(), &["gen-data", "--out", "x.jsonl", "--scenes", "1", "--config", "bad.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("widht"));
    std::fs::write(dir.path().join("junk.jsonl"), "not json\n").unwrap();
    let o = vqd(dir.path(), &["train", "--data", "junk.jsonl", "--val", "junk.jsonl", "--run", "r"]);
    assert_eq!(o.status.code(), Some(2));
    let o = vqd(dir.path(), &["eval", "--checkpoint", "none.bin", "--data", "junk.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let o = vqd(dir.path(), &["diagnose", "--runs", "ghost"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let t = vqd(d, &["train", "--config", "tiny.txt", "--data", "tr.jsonl", "--val", "va.jsonl", "--run", "vdn"]);
    assert!(t.status.success(), "{t:?}");
    assert_eq!(stdout(&t).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    for f in ["metrics.csv", "config.txt", "checkpoint.bin", "timing.csv"] {
        assert!(d.join("runs/vdn").join(f).exists(), "{f}");
    }
    let t = vqd(d, &["train", "--config", "tiny.txt", "--data", "tr.jsonl", "--val", "va.jsonl", "--run", "ae", "--mode", "fld+dn"]);
    assert!(t.status.success(), "{t:?}");

    let e = vqd(d, &["eval", "--checkpoint", "runs/vdn/checkpoint.bin", "--data", "va.jsonl", "--iou", "0.5"]);
    assert!(e.status.success(), "{e:?}");
    let last = stdout(&e).lines().last().unwrap().to_string();
    let ap: f64 = last.strip_prefix("AP40=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert_eq!(vqd(d, &["eval", "--checkpoint", "runs/vdn/checkpoint.bin", "--data", "va.jsonl", "--iou", "1.5"]).status.code(), Some(1));

    let g = vqd(d, &["diagnose", "--runs", "ae", "vdn"]);
    assert!(g.status.success(), "{g:?}");
    assert!(stdout(&g).contains("sparsest final epoch"));
    let m = vqd(d, &["train", "--config", "tiny.txt", "--data", "tr.jsonl", "--val", "va.jsonl", "--run", "x", "--mode", "nonsense"]);
    assert_eq!(m.status.code(), Some(1));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    for run in ["a", "b"] {
        let t = vqd(d, &["train", "--config", "tiny.txt", "--data", "tr.jsonl", "--val", "va.jsonl", "--run", run]);
        assert!(t.status.success(), "{t:?}");
    }
    for f in ["metrics.csv", "checkpoint.bin", "config.txt"] {
        assert_eq!(std::fs::read(d.join("runs/a").join(f)).unwrap(), std::fs::read(d.join("runs/b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn grad_check_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = vqd(dir.path(), &["grad-check", "--seed", "1"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("all"));
    let bad = vqd(dir.path(), &["grad-check", "--seed", "1", "--perturb", "0.01"]);
    assert_eq!(bad.status.code(), Some(3));
}
