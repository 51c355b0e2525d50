use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diffoseg::dataset::{load_split, Dataset};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffoseg"))
        .args(args)
        .env_remove("DIFFOSEG_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) {
    let out = cli(args);
    assert!(!out.status.success(), "{args:?} should fail");
    assert!(!out.stderr.is_empty());
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 16] = [
    "--steps", "8", "--base-channels", "8", "--depth", "2", "--time-embed-dim", "8", "--batch-size", "4",
    "--val-every", "5", "--val-images", "2", "--val-samples", "2",
];

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--train", "12", "--val", "3", "--test", "2", "--height", "24", "--width", "24", "--seed", "4"]);
    assert_eq!(load_split(&data, "train").unwrap().len(), 12);

    // Config file with a CLI override on top.
    let conf = root.join("stage1.conf");
    fs::write(&conf, "iterations = 6\nlr = 0.002\nconsensus = A\n").unwrap();
    let s1 = root.join("s1");
    let mut args = vec!["train-stage1", "--data", s(&data), "--config", s(&conf), "--consensus", "P", "--out-dir", s(&s1)];
    args.extend(TINY);
    ok(&args);
    let ckpt1 = s1.join("final.ckpt");
    let header = diffoseg::checkpoint::Checkpoint::load(&ckpt1).unwrap();
    assert_eq!(header.get::<String>("train.consensus").unwrap(), "P");
    assert_eq!(header.get::<usize>("train.step").unwrap(), 6);

    // Sampling is reproducible and keeps the image size.
    let (a, b) = (root.join("sa"), root.join("sb"));
    for out in [&a, &b] {
        ok(&["sample", "--checkpoint", s(&ckpt1), "--data", s(&data), "--n", "2", "--seed", "5", "--out", s(out)]);
    }
    let sa = Dataset::load(&a).unwrap();
    assert_eq!(sa, Dataset::load(&b).unwrap());
    assert_eq!((sa.experts, sa.height, sa.width, sa.len()), (2, 24, 24, 2));
    assert!(a.join("uncertainty").join(format!("{}.png", sa.samples[0].id)).is_file());
    fails(&["sample", "--checkpoint", s(&ckpt1), "--data", s(&data), "--expert", "0", "--out", s(&a)]);
    fails(&["sample", "--checkpoint", s(&ckpt1), "--data", s(&data), "--n", "0", "--out", s(&a)]);

    // Evaluation reports are reproducible.
    let (ra, rb) = (root.join("ra.csv"), root.join("rb.csv"));
    for r in [&ra, &rb] {
        let out = ok(&["evaluate", "--checkpoint", s(&ckpt1), "--data", s(&data), "--n", "2,3", "--seed", "1", "--report", s(r)]);
        assert!(out.contains("GED_2="));
    }
    assert_eq!(fs::read(&ra).unwrap(), fs::read(&rb).unwrap());
    fails(&["evaluate", "--checkpoint", s(&ckpt1), "--data", s(&data), "--n", "0", "--report", s(&ra)]);
    fails(&["evaluate", "--checkpoint", s(&ckpt1), "--data", s(&data), "--n", "-3", "--report", s(&ra)]);

    // Stage II with identity, then per-expert sampling and evaluation.
    let s2 = root.join("s2");
    let mut args = vec!["train-stage2", "--data", s(&data), "--stage1-checkpoint", s(&ckpt1), "--iterations", "4", "--out-dir", s(&s2)];
    args.extend(TINY);
    ok(&args);
    let ckpt2 = s2.join("final.ckpt");
    ok(&["sample", "--checkpoint", s(&ckpt2), "--data", s(&data), "--expert", "3", "--out", s(&root.join("se"))]);
    fails(&["sample", "--checkpoint", s(&ckpt2), "--data", s(&data), "--out", s(&root.join("se"))]);
    fails(&["sample", "--checkpoint", s(&ckpt2), "--data", s(&data), "--expert", "4", "--out", s(&root.join("se"))]);
    let r2 = root.join("r2.csv");
    let out = ok(&["evaluate", "--checkpoint", s(&ckpt2), "--data", s(&data), "--n", "2", "--report", s(&r2)]);
    assert!(out.contains("D_mean="));

    // Validation failures.
    let mut args = vec!["train-stage2", "--data", s(&data), "--out-dir", s(&s2)];
    args.extend(TINY);
    fails(&args);
    fails(&["train-stage1", "--data", s(&data), "--lr", "-1"]);
    fails(&["train-stage1", "--data", s(&data), "--consensus", "Q"]);
    fs::write(&conf, "no_such_key = 1\n").unwrap();
    fails(&["train-stage1", "--data", s(&data), "--config", s(&conf)]);
    fails(&["train-stage1", "--data", s(&root.join("missing"))]);
    fails(&["ablate", "--suite", "other", "--data", s(&data)]);
    fails(&["gen-data", "--out", s(&root.join("g")), "--experts", "1"]);
    fails(&["no-such-command"]);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |out: &Path, seed: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_diffoseg"));
        c.args(["gen-data", "--out", s(out), "--train", "2", "--val", "1", "--test", "1", "--height", "24", "--width", "24"]);
        match seed {
            Some(v) => c.env("DIFFOSEG_SEED", v),
            None => c.env_remove("DIFFOSEG_SEED"),
        };
        assert!(c.status().unwrap().success());
        load_split(out, "train").unwrap()
    };
    let env7 = gen(&dir.path().join("a"), Some("7"));
    let flag7 = {
        let out = dir.path().join("b");
        ok(&["gen-data", "--out", s(&out), "--train", "2", "--val", "1", "--test", "1", "--height", "24", "--width", "24", "--seed", "7"]);
        load_split(&out, "train").unwrap()
    };
    let unset = gen(&dir.path().join("c"), None);
    assert_eq!(env7, flag7);
    assert_ne!(env7, unset);
}
