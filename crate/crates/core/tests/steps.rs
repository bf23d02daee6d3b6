mod common;

use std::time::Instant;

use candle_core::{DType, Device};

use common::{rng, toy_config};
use fogflow::datapipe::{toy, FramePair, Stage, SyntheticSample};
use fogflow::eval::translate;
use fogflow::fogphys::FogRanges;
use fogflow::losses::LossName;
use fogflow::nets::{Domain, NetConfig};
use fogflow::raster::{FlowField, Image};
use fogflow::trainloop::{load_training_data, step_real_clean, step_real_fog, step_synthetic, Objective, StepOptions, TrainState, Trainer};

fn state(seed: u64) -> TrainState {
    TrainState::new(seed, &NetConfig::compact(), Default::default(), DType::F32).unwrap()
}

fn opts() -> StepOptions {
    StepOptions {
        atmo_patch: 7,
        ..StepOptions::default()
    }
}

fn synthetic_batch(n: usize, seed: u64, ranges: &FogRanges) -> Vec<SyntheticSample> {
    let mut r = rng(seed);
    toy::toy_synthetic_set(n, 64, 64, seed)
        .unwrap()
        .iter()
        .map(|s| s.synthesize(ranges, &mut r).unwrap())
        .collect()
}

fn clean_pairs(n: usize, seed: u64) -> Vec<FramePair> {
    toy::toy_clean_pairs(n, 64, 64, seed).unwrap()
}

#[test]
fn perfect_prediction_gives_zero_supervised_epe() {
    let mut s = state(1);
    let mut batch = synthetic_batch(1, 2, &FogRanges::default());
    let dev = Device::Cpu;
    let f1 = batch[0].fog[0].to_tensor(&dev, DType::F32).unwrap();
    let f2 = batch[0].fog[1].to_tensor(&dev, DType::F32).unwrap();
    let predicted = s.store.flow_between(Domain::Fog, &f1, &f2).unwrap();
    batch[0].flow = FlowField::from_tensor(predicted.full(), 0).unwrap();
    let o = StepOptions {
        multiscale_epe: false,
        only: Some(vec![Objective::EpeSupFog]),
        ..opts()
    };
    let report = step_synthetic(&mut s, &batch, &o).unwrap();
    assert!(report.get(LossName::EpeSup).unwrap() < 1e-6);
}

#[test]
fn supervised_epe_falls_on_a_fixed_batch() {
    let mut s = state(3);
    let batch = synthetic_batch(2, 4, &FogRanges::default());
    let o = StepOptions {
        only: Some(vec![Objective::EpeSupFog, Objective::EpeSupClean]),
        ..opts()
    };
    let epe: Vec<f64> = (0..50)
        .map(|_| step_synthetic(&mut s, &batch, &o).unwrap().get(LossName::EpeSup).unwrap())
        .collect();
    let head = epe[..10].iter().sum::<f64>() / 10.0;
    let tail = epe[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "first ten {head:.4}, last ten {tail:.4}");
    assert!(epe[49] < epe[0]);
}

#[test]
fn hazeline_switch_removes_the_term() {
    let pairs = clean_pairs(1, 5);
    let refs = vec![pairs[0].frame1.clone()];
    for hazeline in [true, false] {
        let o = StepOptions { hazeline, ..opts() };
        let a = step_real_clean(&mut state(6), &pairs, &refs, &o).unwrap();
        let b = step_real_fog(&mut state(6), &pairs, &refs, &o).unwrap();
        assert_eq!(a.get(LossName::Hazeline).is_some(), hazeline);
        assert_eq!(b.get(LossName::Hazeline).is_some(), hazeline);
    }
}

#[test]
fn still_frames_give_a_finite_cross_domain_epe() {
    let frame = clean_pairs(1, 7).remove(0).frame1;
    let pair = FramePair::new(frame.clone(), frame).unwrap();
    let mut s = state(8);
    let report = step_real_clean(&mut s, &[pair], &[], &opts()).unwrap();
    let v = report.get(LossName::EpeCross).expect("a static pair passes the mask everywhere");
    assert!(v.is_finite());
    assert_eq!(report.skipped, [LossName::GanD]);
}

#[test]
fn untrained_cycle_has_positive_consistency_loss() {
    let fog = toy::toy_fog_pairs(1, 64, 64, 9, &FogRanges::default()).unwrap();
    let report = step_real_fog(&mut state(10), &fog, &[fog[0].frame1.clone()], &opts()).unwrap();
    let con = report.get(LossName::Con).unwrap();
    assert!(con > 0.0 && con.is_finite());
}

#[test]
fn clear_input_passes_through_after_fog_free_pretraining() {
    // with β = 0 the synthetic "fog" frames equal the clean ones, so the
    // fog-to-clean decoder is trained toward the identity
    let none = FogRanges {
        beta_min: 0.0,
        beta_max: 0.0,
        ..FogRanges::default()
    };
    let batch = synthetic_batch(2, 11, &none);
    let o = StepOptions {
        only: Some(vec![Objective::L1FogToClean]),
        ..opts()
    };
    let mut s = state(12);
    let gap = |s: &TrainState, img: &Image| -> f64 {
        let out = translate(&s.store, Domain::Fog, img).unwrap();
        out.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / img.data().len() as f64
    };
    let probe = FramePair::new(batch[0].clean[0].clone(), batch[0].clean[1].clone()).unwrap();
    let before = gap(&s, &probe.frame1);
    for _ in 0..600 {
        step_synthetic(&mut s, &batch, &o).unwrap();
    }
    let after = gap(&s, &probe.frame1);
    let report = step_real_fog(&mut s, &[probe.clone()], &[probe.frame2.clone()], &opts()).unwrap();
    assert!(report.is_finite());
    assert!(after < 0.5 * before && after < 0.08, "mean abs gap {before:.3} -> {after:.3}");
}

#[test]
fn same_seed_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = |name: &str| {
        let mut c = toy_config(&Stage::CYCLE, 64, 64, 14);
        c.batch_size = 1;
        c.loss_log = Some(dir.path().join(name));
        let data = load_training_data(&c).unwrap();
        Trainer::new(c, data).unwrap().run_until(6).unwrap();
        std::fs::read_to_string(dir.path().join(name)).unwrap()
    };
    assert_eq!(log("a.csv"), log("b.csv"));
}

#[test]
fn toy_run_survives_three_hundred_cycles() {
    let start = Instant::now();
    let mut c = toy_config(&Stage::CYCLE, 128, 256, 15);
    c.batch_size = 1;
    if let Some(t) = c.data.toy.as_mut() {
        (t.synthetic, t.real_clean, t.real_fog) = (4, 2, 2);
    }
    let data = load_training_data(&c).unwrap();
    let mut trainer = Trainer::new(c, data).unwrap();
    let reports = trainer.run_until(900).unwrap();
    assert_eq!(reports.len(), 900);
    assert!(reports.iter().all(|r| r.is_finite()));
    eprintln!("300 cycles in {:.1?}", start.elapsed());
}
