#![allow(dead_code)]

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fogflow::config::{ToyDataConfig, TrainConfig};
use fogflow::datapipe::Stage;
use fogflow::nets::NetConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Writes straight to the process stderr so the line shows up even when
/// the harness captures test output.
pub fn status(criterion: u32, title: &str, pass: bool, detail: &str) {
    let mark = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {criterion} [{mark}] {title}: {detail}");
}

/// A small, fast training setup on procedural scenes.
pub fn toy_config(stages: &[Stage], height: usize, width: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        net: NetConfig::compact(),
        crop: None,
        batch_size: 2,
        stages: stages.to_vec(),
        atmo_patch: 7,
        data: fogflow::config::DataConfig {
            toy: Some(ToyDataConfig {
                synthetic: 4,
                real_clean: 4,
                real_fog: 4,
                height,
                width,
                seed: seed.wrapping_add(100),
            }),
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}
