use std::fs;
use std::path::Path;

use diffoseg::checkpoint::{restore_network, Checkpoint};
use diffoseg::config::{IdentityMode, TrainConfig};
use diffoseg::dataset::{generate_splits, Dataset, SplitSizes};
use diffoseg::nn::Module;
use diffoseg::train::{stage2_network, train_stage1, train_stage2, validation_loss, FINAL_CHECKPOINT};
use diffoseg::Error;
use diffoseg_core::synth::default_styles;
use diffoseg_core::{ConsensusMode, NoiseSchedule};

fn splits() -> [Dataset; 3] {
    generate_splits(SplitSizes { train: 24, val: 6, test: 4 }, 24, 24, &default_styles(4), 21).unwrap()
}

fn tiny(out: &Path, iterations: usize) -> TrainConfig {
    TrainConfig {
        steps: 10,
        lr: 2e-3,
        batch_size: 4,
        iterations: Some(iterations),
        seed: Some(3),
        base_channels: 8,
        depth: 2,
        time_embed_dim: 8,
        val_every: 10,
        val_images: 2,
        val_samples: 2,
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

fn params(ckpt: &Checkpoint) -> Vec<(String, Vec<f32>)> {
    let mut net = restore_network(ckpt).unwrap();
    let mut out = Vec::new();
    net.visit_params("", &mut |p, v| out.push((p.to_string(), v.value.clone())));
    out
}

#[test]
fn stage1_loss_goes_down() {
    let dir = tempfile::tempdir().unwrap();
    let [train, val, _] = splits();
    let mut cfg = tiny(dir.path(), 150);
    cfg.val_every = 150;
    let out = train_stage1(&cfg, &train, &val).unwrap();
    let k = out.losses.len() / 10;
    let first: f64 = out.losses[..k].iter().sum::<f64>() / k as f64;
    let last: f64 = out.losses[out.losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(last < first, "first {first} last {last}");
    assert!(out.final_checkpoint.is_file() && out.best_checkpoint.is_file());
    let log = fs::read_to_string(dir.path().join("train_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 151);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let [train, val, _] = splits();
    let full_dir = tempfile::tempdir().unwrap();
    let full = train_stage1(&tiny(full_dir.path(), 30), &train, &val).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    train_stage1(&tiny(part_dir.path(), 20), &train, &val).unwrap();
    let mut cfg = tiny(part_dir.path(), 30);
    cfg.resume = Some(part_dir.path().join(FINAL_CHECKPOINT));
    let resumed = train_stage1(&cfg, &train, &val).unwrap();

    assert_eq!(resumed.losses, full.losses[20..]);
    let a = fs::read(&full.final_checkpoint).unwrap();
    let b = fs::read(&resumed.final_checkpoint).unwrap();
    assert_eq!(a, b);
    let log = |d: &Path| fs::read_to_string(d.join("train_loss.csv")).unwrap();
    assert_eq!(log(full_dir.path()), log(part_dir.path()));
}

#[test]
fn resume_rejects_a_different_configuration() {
    let [train, val, _] = splits();
    let dir = tempfile::tempdir().unwrap();
    train_stage1(&tiny(dir.path(), 10), &train, &val).unwrap();
    let mut cfg = tiny(dir.path(), 20);
    cfg.resume = Some(dir.path().join(FINAL_CHECKPOINT));
    cfg.consensus = ConsensusMode::Average;
    assert!(train_stage1(&cfg, &train, &val).is_err());
}

#[test]
fn consensus_modes_share_batches() {
    // With identical annotations every mode builds the same target, so runs
    // that share batches, timesteps and noise are bit-identical.
    let [mut train, val, _] = splits();
    for s in &mut train.samples {
        let first = s.annotations[0].clone();
        s.annotations.iter_mut().for_each(|a| a.clone_from(&first));
    }
    let mut runs = Vec::new();
    for mode in [ConsensusMode::Random, ConsensusMode::Average, ConsensusMode::Probabilistic] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), 10);
        cfg.consensus = mode;
        runs.push(train_stage1(&cfg, &train, &val).unwrap().losses);
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}

#[test]
fn blind_stage2_starts_at_the_stage1_validation_loss() {
    let [train, val, _] = splits();
    let s1 = tempfile::tempdir().unwrap();
    let out1 = train_stage1(&tiny(s1.path(), 20), &train, &val).unwrap();
    let ckpt = Checkpoint::load(&out1.final_checkpoint).unwrap();
    let recorded: f64 = ckpt.get("val.loss").unwrap();

    let s2 = tempfile::tempdir().unwrap();
    let mut cfg = tiny(s2.path(), 1);
    cfg.stage = 2;
    cfg.identity = IdentityMode::Blind;
    cfg.stage1_checkpoint = Some(out1.final_checkpoint.clone());
    let out2 = train_stage2(&cfg, &train, &val).unwrap();
    assert!((out2.initial_val_loss - recorded).abs() < 1e-6);

    let net = stage2_network(&ckpt, IdentityMode::Concat, 4, 3).unwrap();
    let schedule = NoiseSchedule::cosine(10, 0.008).unwrap();
    let concat = validation_loss(&net, &schedule, &val).unwrap();
    assert!((concat - recorded).abs() < 1e-6);
}

#[test]
fn stage2_trains_every_identity_mode() {
    let [train, val, _] = splits();
    let s1 = tempfile::tempdir().unwrap();
    let out1 = train_stage1(&tiny(s1.path(), 10), &train, &val).unwrap();
    let before = params(&Checkpoint::load(&out1.final_checkpoint).unwrap());
    for mode in IdentityMode::ALL {
        let s2 = tempfile::tempdir().unwrap();
        let mut cfg = tiny(s2.path(), 10);
        cfg.stage = 2;
        cfg.identity = mode;
        cfg.stage1_checkpoint = Some(out1.final_checkpoint.clone());
        let out = train_stage2(&cfg, &train, &val).unwrap();
        let ckpt = Checkpoint::load(&out.final_checkpoint).unwrap();
        assert_eq!(ckpt.get::<u8>("stage").unwrap(), 2);
        assert_eq!(ckpt.get::<usize>("net.experts").unwrap(), if mode == IdentityMode::Blind { 0 } else { 4 });
        let has_prompt = ckpt.arrays.keys().any(|k| k.starts_with("prompt."));
        assert_eq!(has_prompt, mode.uses_prompt());
        // All backbone parameters are trainable.
        let after = params(&ckpt);
        let moved = before
            .iter()
            .filter(|(p, _)| !p.starts_with("enc.0.conv1"))
            .all(|(p, v)| after.iter().find(|(q, _)| q == p).is_some_and(|(_, w)| w != v));
        assert!(moved, "{mode}");
    }
}

#[test]
fn stage2_rejects_incompatible_checkpoints() {
    let [train, val, _] = splits();
    let s1 = tempfile::tempdir().unwrap();
    let out1 = train_stage1(&tiny(s1.path(), 2), &train, &val).unwrap();
    let s2 = tempfile::tempdir().unwrap();

    let mut cfg = tiny(s2.path(), 2);
    cfg.stage = 2;
    cfg.stage1_checkpoint = Some(out1.final_checkpoint.clone());
    cfg.steps = 20;
    assert!(matches!(train_stage2(&cfg, &train, &val), Err(Error::Config(_))));

    let other = generate_splits(SplitSizes { train: 4, val: 2, test: 1 }, 24, 24, &default_styles(3), 1).unwrap();
    let cfg = TrainConfig { steps: 10, ..cfg };
    assert!(matches!(train_stage2(&cfg, &other[0], &other[1]), Err(Error::Config(_))));

    let cfg = TrainConfig { stage1_checkpoint: None, ..cfg };
    assert!(train_stage2(&cfg, &train, &val).is_err());
    let mut missing = cfg.clone();
    missing.stage1_checkpoint = Some(s2.path().join("missing.ckpt"));
    assert!(matches!(train_stage2(&missing, &train, &val), Err(Error::Io { .. })));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let [mut train, val, _] = splits();
    for s in &mut train.samples {
        s.image[0] = f32::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 5);
    cfg.augment = diffoseg::augment::Augment::NONE;
    match train_stage1(&cfg, &train, &val) {
        Err(Error::NonFinite { step, dump }) => {
            assert_eq!(step, 0);
            let ckpt = Checkpoint::load(&dump).unwrap();
            assert_eq!(ckpt.get::<usize>("train.step").unwrap(), 0);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
