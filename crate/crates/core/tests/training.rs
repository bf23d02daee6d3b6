mod common;

use std::fs;

use common::toy_config;
use fogflow::config::TrainConfig;
use fogflow::datapipe::Stage;
use fogflow::trainloop::{
    checkpoint_name, decode_checkpoint, encode_checkpoint, list_checkpoints, load_checkpoint, load_training_data, train,
    Trainer,
};
use fogflow::Error;

fn small_config(seed: u64) -> TrainConfig {
    let mut c = toy_config(&Stage::CYCLE, 64, 64, seed);
    c.batch_size = 1;
    c
}

fn run(config: TrainConfig, steps: u64) -> Vec<u8> {
    let data = load_training_data(&config).unwrap();
    let mut t = Trainer::new(config, data).unwrap();
    t.run_until(steps).unwrap();
    encode_checkpoint(t.state()).unwrap()
}

#[test]
fn same_seed_gives_identical_weights() {
    assert_eq!(run(small_config(11), 4), run(small_config(11), 4));
    assert_ne!(run(small_config(11), 4), run(small_config(12), 4));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(21);
    config.checkpoint.dir = Some(dir.path().join("ckpt"));
    config.checkpoint.every = 2;
    config.checkpoint.keep = 10;
    config.loss_log = Some(dir.path().join("loss.csv"));

    let straight = run(config.clone(), 5);
    let full_log = fs::read_to_string(dir.path().join("loss.csv")).unwrap();

    // continue from step 2 and replay the rest
    let ckpt = dir.path().join("ckpt").join(checkpoint_name(2));
    let data = load_training_data(&config).unwrap();
    let mut resumed = Trainer::resume(config.clone(), data, &ckpt).unwrap();
    assert_eq!(resumed.state().step, 2);
    resumed.run_until(5).unwrap();
    assert_eq!(encode_checkpoint(resumed.state()).unwrap(), straight);

    // the log was cut back to step 2 and then extended, so it reads as one run
    let resumed_log = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(resumed_log, full_log);
    assert_eq!(resumed_log.lines().count(), 6);
}

#[test]
fn periodic_checkpoints_are_pruned() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(31);
    config.checkpoint.dir = Some(dir.path().to_path_buf());
    config.checkpoint.every = 1;
    config.checkpoint.keep = 2;
    run(config, 4);
    let names: Vec<String> = list_checkpoints(dir.path())
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, [checkpoint_name(3), checkpoint_name(4)]);
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let bytes = run(small_config(41), 1);
    assert_eq!(decode_checkpoint(&bytes).unwrap().step, 1);
    for at in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))), "flip at {at}");
    }
    assert!(decode_checkpoint(&bytes[..bytes.len() - 5]).is_err());
    let missing = load_checkpoint("/nonexistent/ckpt.fogflow").err().unwrap();
    assert!(missing.to_string().contains("/nonexistent/ckpt.fogflow"));
}

#[test]
fn resume_rejects_a_different_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.fogflow");
    fs::write(&path, run(small_config(51), 1)).unwrap();
    let mut other = small_config(51);
    other.net.flow_head_channels[0] += 4;
    let data = load_training_data(&other).unwrap();
    assert!(matches!(Trainer::resume(other, data, &path), Err(Error::Config(_))));
}

#[test]
fn training_needs_a_step_count() {
    let config = small_config(61);
    assert!(config.steps.is_none());
    assert!(matches!(train(config, None), Err(Error::Config(_))));
}

#[test]
fn sizes_are_checked_before_training() {
    let odd = toy_config(&[Stage::Synthetic], 96, 96, 1);
    let data = load_training_data(&odd).unwrap();
    assert!(matches!(Trainer::new(odd, data), Err(Error::Config(_))));

    let mut big_patch = small_config(1);
    big_patch.atmo_patch = 65;
    let data = load_training_data(&big_patch).unwrap();
    assert!(matches!(Trainer::new(big_patch, data), Err(Error::Config(_))));
}

#[test]
fn every_step_logs_finite_losses() {
    let config = small_config(71);
    let data = load_training_data(&config).unwrap();
    let mut t = Trainer::new(config, data).unwrap();
    let reports = t.run_until(6).unwrap();
    let stages: Vec<&str> = reports.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["synthetic", "real_clean", "real_fog", "synthetic", "real_clean", "real_fog"]);
    assert!(reports.iter().all(|r| r.is_finite()));
}
