//! Datasets, synthetic fog samples, cropping and the stage/batch scheduler.

pub mod flo;
pub mod io;
pub mod toy;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fogphys::{FogParameters, FogRanges};
use crate::raster::{FlowField, Image, ScalarMap};

pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use io::{load_depth, load_image, load_mask, read_manifest, save_image, ManifestEntry};

/// Training crop size (height, width).
pub const DEFAULT_CROP: (usize, usize) = (256, 512);
pub const DEFAULT_BATCH_SIZE: usize = 3;

/// The three training stages, in cycle order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synthetic,
    RealClean,
    RealFog,
}

impl Stage {
    pub const CYCLE: [Stage; 3] = [Stage::Synthetic, Stage::RealClean, Stage::RealFog];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synthetic => "synthetic",
            Stage::RealClean => "real_clean",
            Stage::RealFog => "real_fog",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything that can be cut to a window, identically across its rasters.
pub trait Crop: Sized {
    fn dims(&self) -> (usize, usize);
    fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self>;
}

/// Two consecutive frames. `flow` is ground truth when known; the real
/// stages never read it, evaluation may.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub frame1: Image,
    pub frame2: Image,
    pub flow: Option<FlowField>,
}

pub type RealCleanPair = FramePair;
pub type RealFogPair = FramePair;

impl FramePair {
    pub fn new(frame1: Image, frame2: Image) -> Result<Self> {
        if frame1.dims() != frame2.dims() {
            return Err(invalid(format!(
                "frames differ in size: {:?} vs {:?}",
                frame1.dims(),
                frame2.dims()
            )));
        }
        Ok(Self {
            frame1,
            frame2,
            flow: None,
        })
    }
}

impl Crop for FramePair {
    fn dims(&self) -> (usize, usize) {
        self.frame1.dims()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            frame1: self.frame1.crop(top, left, h, w)?,
            frame2: self.frame2.crop(top, left, h, w)?,
            flow: self.flow.as_ref().map(|f| f.crop(top, left, h, w)).transpose()?,
        })
    }
}

/// A clean pair with depths and flow, before fog is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub clean1: Image,
    pub clean2: Image,
    pub depth1: ScalarMap,
    pub depth2: ScalarMap,
    pub flow: FlowField,
}

impl SyntheticSource {
    pub fn new(clean1: Image, clean2: Image, depth1: ScalarMap, depth2: ScalarMap, flow: FlowField) -> Result<Self> {
        let d = clean1.dims();
        if clean2.dims() != d || depth1.dims() != d || depth2.dims() != d || flow.dims() != d {
            return Err(invalid(format!(
                "synthetic source rasters disagree in size: {:?} {:?} {:?} {:?} {:?}",
                d,
                clean2.dims(),
                depth1.dims(),
                depth2.dims(),
                flow.dims()
            )));
        }
        Ok(Self {
            clean1,
            clean2,
            depth1,
            depth2,
            flow,
        })
    }

    /// Renders both frames through one draw of fog from `ranges`.
    pub fn synthesize(&self, ranges: &FogRanges, rng: &mut impl Rng) -> Result<SyntheticSample> {
        synthesize_sample(
            &self.clean1,
            &self.clean2,
            Some(&self.depth1),
            Some(&self.depth2),
            &self.flow,
            ranges,
            rng,
        )
    }
}

impl Crop for SyntheticSource {
    fn dims(&self) -> (usize, usize) {
        self.clean1.dims()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            clean1: self.clean1.crop(top, left, h, w)?,
            clean2: self.clean2.crop(top, left, h, w)?,
            depth1: self.depth1.crop(top, left, h, w)?,
            depth2: self.depth2.crop(top, left, h, w)?,
            flow: self.flow.crop(top, left, h, w)?,
        })
    }
}

/// Clean and fog renderings of one pair with shared ground-truth flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub clean: [Image; 2],
    pub fog: [Image; 2],
    pub depth: [ScalarMap; 2],
    pub flow: FlowField,
    pub fog_params: FogParameters,
}

impl SyntheticSample {
    /// Renders a sample with fixed fog parameters.
    pub fn render(source: &SyntheticSource, fog_params: FogParameters) -> Result<Self> {
        Ok(Self {
            fog: [
                fog_params.render(&source.clean1, &source.depth1)?,
                fog_params.render(&source.clean2, &source.depth2)?,
            ],
            clean: [source.clean1.clone(), source.clean2.clone()],
            depth: [source.depth1.clone(), source.depth2.clone()],
            flow: source.flow.clone(),
            fog_params,
        })
    }
}

impl Crop for SyntheticSample {
    fn dims(&self) -> (usize, usize) {
        self.clean[0].dims()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let c = |i: &Image| i.crop(top, left, h, w);
        let d = |m: &ScalarMap| m.crop(top, left, h, w);
        Ok(Self {
            clean: [c(&self.clean[0])?, c(&self.clean[1])?],
            fog: [c(&self.fog[0])?, c(&self.fog[1])?],
            depth: [d(&self.depth[0])?, d(&self.depth[1])?],
            flow: self.flow.crop(top, left, h, w)?,
            fog_params: self.fog_params,
        })
    }
}

/// Draws one fog (shared by both frames) and renders the pair through it.
pub fn synthesize_sample(
    clean1: &Image,
    clean2: &Image,
    depth1: Option<&ScalarMap>,
    depth2: Option<&ScalarMap>,
    flow_gt: &FlowField,
    ranges: &FogRanges,
    rng: &mut impl Rng,
) -> Result<SyntheticSample> {
    let (Some(depth1), Some(depth2)) = (depth1, depth2) else {
        return Err(invalid("synthetic fog needs a depth map for both frames"));
    };
    ranges.validate()?;
    let source = SyntheticSource::new(
        clean1.clone(),
        clean2.clone(),
        depth1.clone(),
        depth2.clone(),
        flow_gt.clone(),
    )?;
    SyntheticSample::render(&source, ranges.sample(rng))
}

/// Cuts one random `size` window, the same for every raster of `sample`.
pub fn random_crop_pair<T: Crop>(sample: &T, size: (usize, usize), rng: &mut impl Rng) -> Result<T> {
    let (h, w) = sample.dims();
    if h < size.0 || w < size.1 {
        return Err(invalid(format!(
            "cannot crop {}x{} from a {h}x{w} sample",
            size.0, size.1
        )));
    }
    let top = rng.random_range(0..=h - size.0);
    let left = rng.random_range(0..=w - size.1);
    sample.crop(top, left, size.0, size.1)
}

/// Position of the scheduler in its infinite sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SchedulerState {
    /// Per stage (cycle order): epoch and position inside that epoch's permutation.
    pub cursors: [(u64, usize); 3],
    /// Index into the enabled stages of the next batch.
    pub next: usize,
}

/// Infinite, deterministic sequence of `(stage, sample indices)`.
///
/// Enabled stages take turns in cycle order. Each dataset is visited through
/// per-epoch permutations seeded by `(seed, stage, epoch)`, so every sample
/// appears once per epoch before any repeats; a batch that crosses an epoch
/// boundary continues into the next permutation.
#[derive(Debug, Clone)]
pub struct BatchScheduler {
    sizes: [usize; 3],
    stages: Vec<Stage>,
    batch_size: usize,
    seed: u64,
    state: SchedulerState,
    perms: [Vec<usize>; 3],
}

impl BatchScheduler {
    /// `datasets` lists the enabled stages with their dataset sizes.
    pub fn new(datasets: &[(Stage, usize)], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if datasets.is_empty() {
            return Err(Error::Config("no training stage is enabled".into()));
        }
        let mut sizes = [0; 3];
        let mut stages = Vec::new();
        for &(stage, n) in datasets {
            if n == 0 {
                return Err(Error::Config(format!("the {stage} dataset is empty")));
            }
            if stages.contains(&stage) {
                return Err(Error::Config(format!("stage {stage} listed twice")));
            }
            sizes[stage.index()] = n;
            stages.push(stage);
        }
        stages.sort();
        let mut s = Self {
            sizes,
            stages,
            batch_size,
            seed,
            state: SchedulerState::default(),
            perms: Default::default(),
        };
        s.refresh_perms();
        Ok(s)
    }

    pub fn state(&self) -> SchedulerState {
        self.state
    }

    /// Jumps to a saved position.
    pub fn restore(&mut self, state: SchedulerState) -> Result<()> {
        if state.next >= self.stages.len() || state.cursors.iter().zip(self.sizes).any(|(c, n)| c.1 > n) {
            return Err(Error::Checkpoint(format!("scheduler state {state:?} does not fit the datasets")));
        }
        self.state = state;
        self.refresh_perms();
        Ok(())
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    fn refresh_perms(&mut self) {
        for stage in Stage::CYCLE {
            let i = stage.index();
            self.perms[i] = permutation(self.seed, stage, self.state.cursors[i].0, self.sizes[i]);
        }
    }

    fn draw(&mut self, stage: Stage) -> Vec<usize> {
        let i = stage.index();
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            let (epoch, pos) = self.state.cursors[i];
            if pos == self.sizes[i] {
                self.state.cursors[i] = (epoch + 1, 0);
                self.perms[i] = permutation(self.seed, stage, epoch + 1, self.sizes[i]);
                continue;
            }
            batch.push(self.perms[i][pos]);
            self.state.cursors[i].1 += 1;
        }
        batch
    }
}

impl Iterator for BatchScheduler {
    type Item = (Stage, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let stage = self.stages[self.state.next];
        self.state.next = (self.state.next + 1) % self.stages.len();
        Some((stage, self.draw(stage)))
    }
}

fn permutation(seed: u64, stage: Stage, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage.index() as u64 + 1) << 48) | epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// The three training datasets held in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub synthetic: Vec<SyntheticSource>,
    pub real_clean: Vec<FramePair>,
    pub real_fog: Vec<FramePair>,
}

impl TrainingData {
    pub fn len(&self, stage: Stage) -> usize {
        match stage {
            Stage::Synthetic => self.synthetic.len(),
            Stage::RealClean => self.real_clean.len(),
            Stage::RealFog => self.real_fog.len(),
        }
    }

    /// Smallest frame size over every sample.
    pub fn min_dims(&self) -> Option<(usize, usize)> {
        self.synthetic
            .iter()
            .map(|s| s.dims())
            .chain(self.real_clean.iter().map(|p| p.dims()))
            .chain(self.real_fog.iter().map(|p| p.dims()))
            .reduce(|a, b| (a.0.min(b.0), a.1.min(b.1)))
    }
}

/// Loads synthetic sources from a 5-column manifest.
pub fn load_synthetic(manifest: &Path) -> Result<Vec<SyntheticSource>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let (Some(d1), Some(d2), Some(fl)) = (&e.depth1, &e.depth2, &e.flow) else {
                return Err(Error::Config(format!(
                    "synthetic manifest {} needs depth1 depth2 flow on every line",
                    manifest.display()
                )));
            };
            SyntheticSource::new(
                load_image(&e.frame1)?,
                load_image(&e.frame2)?,
                load_depth(d1)?,
                load_depth(d2)?,
                read_flo(fl)?,
            )
        })
        .collect()
}

/// Loads frame pairs; a flow column, when present, is kept as ground truth.
pub fn load_pairs(manifest: &Path) -> Result<Vec<FramePair>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let mut pair = FramePair::new(load_image(&e.frame1)?, load_image(&e.frame2)?)?;
            pair.flow = e.flow.as_ref().map(read_flo).transpose()?;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycle_order_and_epoch_coverage() {
        let mut s = BatchScheduler::new(
            &[(Stage::RealFog, 4), (Stage::Synthetic, 5), (Stage::RealClean, 2)],
            3,
            1,
        )
        .unwrap();
        let first: Vec<_> = (&mut s).take(6).collect();
        let tags: Vec<Stage> = first.iter().map(|(t, _)| *t).collect();
        use Stage::*;
        assert_eq!(tags, [Synthetic, RealClean, RealFog, Synthetic, RealClean, RealFog]);
        // synthetic: the first five draws form one permutation of 0..5
        let mut syn: Vec<usize> = first[0].1.iter().chain(&first[3].1).copied().take(5).collect();
        syn.sort();
        assert_eq!(syn, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn restore_continues_identically() {
        let make = || BatchScheduler::new(&[(Stage::Synthetic, 7), (Stage::RealClean, 3)], 2, 42).unwrap();
        let full: Vec<_> = make().take(20).collect();
        let mut a = make();
        let _: Vec<_> = (&mut a).take(9).collect();
        let mut b = make();
        b.restore(a.state()).unwrap();
        let rest: Vec<_> = b.take(11).collect();
        assert_eq!(&full[9..], &rest[..]);
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        assert!(matches!(
            BatchScheduler::new(&[(Stage::Synthetic, 0)], 3, 0),
            Err(Error::Config(_))
        ));
    }
}
