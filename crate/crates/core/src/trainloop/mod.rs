//! The three-stage training protocol: stage steps with per-objective
//! freeze sets, per-component Adam, the driver loop, loss logging and
//! checkpoints.

mod adam;
mod checkpoint;
mod schedule;
mod steps;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::Rng;

pub use adam::{Adam, Moments};
pub use checkpoint::{
    checkpoint_name, decode_checkpoint, encode_checkpoint, list_checkpoints, load_checkpoint, prune_checkpoints,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use schedule::{FreezeSchedule, Objective};
pub use steps::{step_real_clean, step_real_fog, step_synthetic, StepOptions, TrainState, TRAIN_RNG_STREAM};

use crate::config::TrainConfig;
use crate::datapipe::{
    load_pairs, load_synthetic, random_crop_pair, toy, BatchScheduler, Crop, FramePair, Stage, SyntheticSample,
    TrainingData,
};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::raster::Image;

/// Loads the datasets named in the configuration.
pub fn load_training_data(config: &TrainConfig) -> Result<TrainingData> {
    if let Some(t) = &config.data.toy {
        return Ok(TrainingData {
            synthetic: toy::toy_synthetic_set(t.synthetic, t.height, t.width, t.seed)?,
            real_clean: toy::toy_clean_pairs(t.real_clean, t.height, t.width, t.seed.wrapping_add(1))?,
            real_fog: toy::toy_fog_pairs(t.real_fog, t.height, t.width, t.seed.wrapping_add(2), &config.fog)?,
        });
    }
    let mut data = TrainingData::default();
    for stage in &config.stages {
        let path = match stage {
            Stage::Synthetic => &config.data.synthetic,
            Stage::RealClean => &config.data.real_clean,
            Stage::RealFog => &config.data.real_fog,
        };
        let path = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("stage {stage} is enabled but has no manifest")))?;
        match stage {
            Stage::Synthetic => data.synthetic = load_synthetic(path)?,
            Stage::RealClean => data.real_clean = load_pairs(path)?,
            Stage::RealFog => data.real_fog = load_pairs(path)?,
        }
    }
    Ok(data)
}

/// Drives the stage steps over the batch scheduler.
pub struct Trainer {
    config: TrainConfig,
    opts: StepOptions,
    data: TrainingData,
    scheduler: BatchScheduler,
    state: TrainState,
    log: Option<BufWriter<fs::File>>,
}

impl Trainer {
    /// Fresh weights from `config.seed`. Configuration and dataset problems
    /// are reported here, before any step.
    pub fn new(config: TrainConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(config.seed, &config.net, config.optimizer, DType::F32)?;
        Self::from_state(config, data, state)
    }

    /// Continues from a checkpoint; its network must match the configuration.
    pub fn resume(config: TrainConfig, data: TrainingData, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let mut state = load_checkpoint(checkpoint)?;
        if state.store.config() != &config.net {
            return Err(Error::Config("checkpoint network does not match the configured network".into()));
        }
        state.optimizer = {
            // hyperparameters follow the configuration, moments the checkpoint
            let mut adam = Adam::new(config.optimizer, &state.store)?;
            for c in crate::nets::Component::ALL {
                adam.set_moments(&state.store, c, state.optimizer.moments(c).clone())?;
            }
            adam
        };
        Self::from_state(config, data, state)
    }

    /// Continues from an in-memory state (for example a fork of another run).
    pub fn from_state(config: TrainConfig, data: TrainingData, state: TrainState) -> Result<Self> {
        let datasets: Vec<(Stage, usize)> = config.stages.iter().map(|&s| (s, data.len(s))).collect();
        let mut scheduler = BatchScheduler::new(&datasets, config.batch_size, state.seed)?;
        scheduler.restore(state.scheduler)?;
        check_sizes(&config, &data)?;
        let log = match &config.loss_log {
            Some(path) => Some(open_log(path, state.step)?),
            None => None,
        };
        Ok(Self {
            opts: StepOptions::from_config(&config),
            config,
            data,
            scheduler,
            state,
            log,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn options_mut(&mut self) -> &mut StepOptions {
        &mut self.opts
    }

    /// Runs the next scheduled stage batch.
    pub fn step(&mut self) -> Result<LossReport> {
        let (stage, indices) = self.scheduler.next().expect("the scheduler is infinite");
        let crop = self.config.crop.map(|[h, w]| (h, w));
        let state = &mut self.state;
        let report = match stage {
            Stage::Synthetic => {
                let batch = indices
                    .iter()
                    .map(|&i| {
                        let src = maybe_crop(&self.data.synthetic[i], crop, &mut state.rng)?;
                        src.synthesize(&self.config.fog, &mut state.rng)
                    })
                    .collect::<Result<Vec<SyntheticSample>>>()?;
                step_synthetic(state, &batch, &self.opts)?
            }
            Stage::RealClean => {
                let batch = crop_pairs(&self.data.real_clean, &indices, crop, &mut state.rng)?;
                let reference = references(&self.data, Stage::RealFog, indices.len(), crop, &self.config, &mut state.rng)?;
                step_real_clean(state, &batch, &reference, &self.opts)?
            }
            Stage::RealFog => {
                let batch = crop_pairs(&self.data.real_fog, &indices, crop, &mut state.rng)?;
                let reference = references(&self.data, Stage::RealClean, indices.len(), crop, &self.config, &mut state.rng)?;
                step_real_fog(state, &batch, &reference, &self.opts)?
            }
        };
        self.state.scheduler = self.scheduler.state();
        if let Some(log) = &mut self.log {
            report.write_csv(log)?;
            log.flush()?;
        }
        Ok(report)
    }

    /// Runs until `state.step == until`, checkpointing on the configured cadence.
    pub fn run_until(&mut self, until: u64) -> Result<Vec<LossReport>> {
        let mut reports = Vec::new();
        while self.state.step < until {
            let report = self.step()?;
            log::debug!("{}", report.csv_line());
            reports.push(report);
            if let Some(dir) = &self.config.checkpoint.dir {
                if self.state.step % self.config.checkpoint.every == 0 || self.state.step == until {
                    self.checkpoint_into(&dir.clone())?;
                }
            }
        }
        Ok(reports)
    }

    fn checkpoint_into(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(checkpoint_name(self.state.step));
        save_checkpoint(&self.state, &path)?;
        prune_checkpoints(dir, self.config.checkpoint.keep)?;
        Ok(path)
    }
}

/// Trains for `config.steps` steps, optionally resuming from a checkpoint.
pub fn train(config: TrainConfig, resume: Option<&Path>) -> Result<TrainState> {
    let steps = config
        .steps
        .ok_or_else(|| Error::Config("`steps` must be set to train".into()))?;
    let data = load_training_data(&config)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(config, data, ckpt)?,
        None => Trainer::new(config, data)?,
    };
    trainer.run_until(steps)?;
    Ok(trainer.into_state())
}

fn check_sizes(config: &TrainConfig, data: &TrainingData) -> Result<()> {
    let check = |dims: (usize, usize), what: &str| -> Result<()> {
        let (h, w) = match config.crop {
            Some([ch, cw]) if dims.0 < ch || dims.1 < cw => {
                return Err(Error::Config(format!(
                    "{what} is {}x{}, smaller than the {ch}x{cw} crop",
                    dims.0, dims.1
                )))
            }
            Some([ch, cw]) => (ch, cw),
            None => dims,
        };
        if h % 64 != 0 || w % 64 != 0 {
            return Err(Error::Config(format!("{what}: training size {h}x{w} is not a multiple of 64")));
        }
        if config.atmo_patch > h.min(w) {
            return Err(Error::Config(format!("atmo_patch {} exceeds the {h}x{w} training size", config.atmo_patch)));
        }
        Ok(())
    };
    for s in &data.synthetic {
        check(s.dims(), "a synthetic sample")?;
    }
    for p in data.real_clean.iter().chain(&data.real_fog) {
        check(p.dims(), "a real pair")?;
    }
    if config.crop.is_none() {
        let stage_dims: Vec<_> = config
            .stages
            .iter()
            .flat_map(|s| match s {
                Stage::Synthetic => data.synthetic.iter().map(|x| x.dims()).collect::<Vec<_>>(),
                Stage::RealClean => data.real_clean.iter().map(|x| x.dims()).collect(),
                Stage::RealFog => data.real_fog.iter().map(|x| x.dims()).collect(),
            })
            .collect();
        if stage_dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config("without cropping every frame must have the same size".into()));
        }
    }
    Ok(())
}

fn maybe_crop<T: Crop + Clone>(x: &T, crop: Option<(usize, usize)>, rng: &mut impl Rng) -> Result<T> {
    match crop {
        Some(size) => random_crop_pair(x, size, rng),
        None => Ok(x.clone()),
    }
}

fn crop_pairs(pairs: &[FramePair], indices: &[usize], crop: Option<(usize, usize)>, rng: &mut impl Rng) -> Result<Vec<FramePair>> {
    indices.iter().map(|&i| maybe_crop(&pairs[i], crop, rng)).collect()
}

/// "Real" examples for a discriminator: random first frames of `source`,
/// falling back to synthetic renderings of the same domain.
fn references(
    data: &TrainingData,
    source: Stage,
    n: usize,
    crop: Option<(usize, usize)>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Image>> {
    let pairs = match source {
        Stage::RealFog => &data.real_fog,
        _ => &data.real_clean,
    };
    if !pairs.is_empty() {
        return (0..n)
            .map(|_| {
                let p = &pairs[rng.random_range(0..pairs.len())];
                Ok(maybe_crop(p, crop, rng)?.frame1)
            })
            .collect();
    }
    if data.synthetic.is_empty() {
        return Ok(Vec::new());
    }
    (0..n)
        .map(|_| {
            let s = &data.synthetic[rng.random_range(0..data.synthetic.len())];
            let s = maybe_crop(s, crop, rng)?;
            Ok(match source {
                Stage::RealFog => s.synthesize(&config.fog, rng)?.fog[0].clone(),
                _ => s.clean1,
            })
        })
        .collect()
}

/// Opens the loss log, keeping only lines up to `step` of an existing log.
fn open_log(path: &Path, step: u64) -> Result<BufWriter<fs::File>> {
    let mut kept = vec![LossReport::csv_header()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                    .map(str::to_string),
            );
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    for line in kept {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(f)
}
