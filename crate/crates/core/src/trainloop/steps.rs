//! The forward graphs of the three stages and the freeze-aware update.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::schedule::{FreezeSchedule, Objective};
use crate::config::{AdamConfig, MaskConfig, TrainConfig};
use crate::datapipe::{FramePair, SchedulerState, Stage, SyntheticSample};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    loss_epe_cross_domain, loss_epe_supervised, loss_flow_consistency, loss_gan_discriminator,
    loss_gan_generator, loss_hazeline, loss_l1_transform, loss_transform_consistency, photometric_consistency_mask, ConsistencyMask,
    LossReport, LossWeights, StopTarget,
};
use crate::nets::{Component, ComponentSet, Domain, NetConfig, ParameterStore};
use crate::raster::{FlowField, Image};

/// Stream of the training RNG (crops, fog draws, discriminator references).
pub const TRAIN_RNG_STREAM: u64 = 0x7472_6169_6e;

/// Everything a training run mutates.
pub struct TrainState {
    pub store: ParameterStore,
    pub optimizer: Adam,
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    pub scheduler: SchedulerState,
}

impl TrainState {
    pub fn new(seed: u64, net: &NetConfig, adam: AdamConfig, dtype: DType) -> Result<Self> {
        let store = ParameterStore::init(seed, net, dtype)?;
        let optimizer = Adam::new(adam, &store)?;
        Ok(Self {
            store,
            optimizer,
            step: 0,
            seed,
            rng: train_rng(seed),
            scheduler: SchedulerState::default(),
        })
    }
}

pub(crate) fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_RNG_STREAM);
    rng
}

/// Per-step switches derived from the configuration.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub multiscale_epe: bool,
    pub mask: MaskConfig,
    pub hazeline: bool,
    pub transform: bool,
    pub atmo_patch: usize,
    /// When set, only these objectives run (freeze audits, ablations).
    pub only: Option<Vec<Objective>>,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

impl StepOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            weights: c.loss_weights.clone(),
            multiscale_epe: c.multiscale_epe,
            mask: c.mask,
            hazeline: c.ablation.hazeline,
            transform: c.ablation.transform,
            atmo_patch: c.atmo_patch,
            only: None,
        }
    }

    pub fn schedule(&self, stage: Stage) -> FreezeSchedule {
        let s = FreezeSchedule::for_stage(stage, self.hazeline, self.transform);
        match &self.only {
            Some(only) => s.restricted(|o| only.contains(&o)),
            None => s,
        }
    }
}

/// Losses of one step before any update.
struct Pending {
    schedule: FreezeSchedule,
    terms: Vec<(Objective, Tensor)>,
    skipped: Vec<Objective>,
}

impl Pending {
    fn new(schedule: FreezeSchedule) -> Self {
        Self {
            schedule,
            terms: Vec::new(),
            skipped: Vec::new(),
        }
    }

    fn wants(&self, o: Objective) -> bool {
        self.schedule.contains(o)
    }

    fn push(&mut self, o: Objective, loss: Tensor) {
        self.terms.push((o, loss));
    }

    fn push_opt(&mut self, o: Objective, loss: Option<Tensor>) {
        match loss {
            Some(l) => self.push(o, l),
            None => self.skipped.push(o),
        }
    }
}

/// One supervised step on a synthetic batch.
pub fn step_synthetic(state: &mut TrainState, batch: &[SyntheticSample], opts: &StepOptions) -> Result<LossReport> {
    use Objective::*;
    let mut p = Pending::new(opts.schedule(Stage::Synthetic));
    let s = &state.store;
    let n = batch.len();
    let fog = images_tensor(s, batch.iter().map(|b| &b.fog[0]).chain(batch.iter().map(|b| &b.fog[1])))?;
    let clean = images_tensor(s, batch.iter().map(|b| &b.clean[0]).chain(batch.iter().map(|b| &b.clean[1])))?;
    let gt = flows_tensor(s, batch.iter().map(|b| &b.flow))?;

    let need_fog = [EpeSupFog, L1FogToClean, GanGenClean, DiscClean].iter().any(|o| p.wants(*o));
    let need_clean = [EpeSupClean, L1CleanToFog, GanGenFog, DiscFog].iter().any(|o| p.wants(*o));
    let pf = if need_fog { Some(s.encode(Domain::Fog, &fog)?) } else { None };
    let pc = if need_clean { Some(s.encode(Domain::Clean, &clean)?) } else { None };

    if let (true, Some(pf)) = (p.wants(EpeSupFog), &pf) {
        let flow = s.estimate_flow(&pf.narrow(0, n)?, &pf.narrow(n, n)?)?;
        p.push(EpeSupFog, loss_epe_supervised(&flow, &gt, opts.multiscale_epe)?);
    }
    if let (true, Some(pc)) = (p.wants(EpeSupClean), &pc) {
        let flow = s.estimate_flow(&pc.narrow(0, n)?, &pc.narrow(n, n)?)?;
        p.push(EpeSupClean, loss_epe_supervised(&flow, &gt, opts.multiscale_epe)?);
    }
    if let Some(pf) = &pf {
        if [L1FogToClean, GanGenClean, DiscClean].iter().any(|o| p.wants(*o)) {
            let rendered_clean = s.decode_image(Domain::Clean, pf, &fog)?;
            if p.wants(L1FogToClean) {
                p.push(L1FogToClean, loss_l1_transform(&rendered_clean, &clean)?);
            }
            if p.wants(GanGenClean) {
                p.push(GanGenClean, loss_gan_generator(&s.discriminate(Domain::Clean, &rendered_clean)?)?);
            }
            if p.wants(DiscClean) {
                p.push(DiscClean, disc_loss(s, Domain::Clean, &clean, &rendered_clean)?);
            }
        }
    }
    if let Some(pc) = &pc {
        if [L1CleanToFog, GanGenFog, DiscFog].iter().any(|o| p.wants(*o)) {
            let rendered_fog = s.decode_image(Domain::Fog, pc, &clean)?;
            if p.wants(L1CleanToFog) {
                p.push(L1CleanToFog, loss_l1_transform(&rendered_fog, &fog)?);
            }
            if p.wants(GanGenFog) {
                p.push(GanGenFog, loss_gan_generator(&s.discriminate(Domain::Fog, &rendered_fog)?)?);
            }
            if p.wants(DiscFog) {
                p.push(DiscFog, disc_loss(s, Domain::Fog, &fog, &rendered_fog)?);
            }
        }
    }
    apply(state, Stage::Synthetic, p, opts)
}

/// One step on real clean pairs. `reference_fog` supplies the "real"
/// examples of the fog discriminator; when empty its update is skipped.
pub fn step_real_clean(
    state: &mut TrainState,
    batch: &[FramePair],
    reference_fog: &[Image],
    opts: &StepOptions,
) -> Result<LossReport> {
    use Objective::*;
    let mut p = Pending::new(opts.schedule(Stage::RealClean));
    let s = &state.store;
    let n = batch.len();
    let x1 = images_tensor(s, batch.iter().map(|b| &b.frame1))?;
    let x2 = images_tensor(s, batch.iter().map(|b| &b.frame2))?;
    let x = Tensor::cat(&[&x1, &x2], 0)?;

    let pc = s.encode(Domain::Clean, &x)?;
    let rendered_fog = s.decode_image(Domain::Fog, &pc, &x)?;
    if p.wants(Consistency) || p.wants(EpeCross) {
        let pf = s.encode(Domain::Fog, &rendered_fog)?;
        if p.wants(Consistency) {
            let cycled = s.decode_image(Domain::Clean, &pf, &rendered_fog)?;
            p.push(
                Consistency,
                loss_transform_consistency(&x1, &x2, &cycled.narrow(0, 0, n)?, &cycled.narrow(0, n, n)?)?,
            );
        }
        if p.wants(EpeCross) {
            let target = s.estimate_flow(&pc.narrow(0, n)?, &pc.narrow(n, n)?)?.full().detach();
            let mask = if opts.mask.real_clean {
                photometric_consistency_mask(&x1, &x2, &target, opts.mask.tau)?
            } else {
                ConsistencyMask::full_like(&target)?
            };
            let predicted = s.estimate_flow(&pf.narrow(0, n)?, &pf.narrow(n, n)?)?;
            p.push_opt(EpeCross, loss_epe_cross_domain(predicted.full(), &target, &mask, StopTarget::B)?);
        }
    }
    if p.wants(GanGenFog) {
        p.push(GanGenFog, loss_gan_generator(&s.discriminate(Domain::Fog, &rendered_fog)?)?);
    }
    if p.wants(Hazeline) {
        p.push(Hazeline, loss_hazeline(&x, &rendered_fog, opts.atmo_patch)?);
    }
    if p.wants(DiscFog) {
        if reference_fog.is_empty() {
            p.skipped.push(DiscFog);
        } else {
            let real = images_tensor(s, reference_fog.iter())?;
            p.push(DiscFog, disc_loss(s, Domain::Fog, &real, &rendered_fog)?);
        }
    }
    apply(state, Stage::RealClean, p, opts)
}

/// One step on real fog pairs. `reference_clean` supplies the "real"
/// examples of the clean discriminator; when empty its update is skipped.
pub fn step_real_fog(
    state: &mut TrainState,
    batch: &[FramePair],
    reference_clean: &[Image],
    opts: &StepOptions,
) -> Result<LossReport> {
    use Objective::*;
    let mut p = Pending::new(opts.schedule(Stage::RealFog));
    let s = &state.store;
    let n = batch.len();
    let x1 = images_tensor(s, batch.iter().map(|b| &b.frame1))?;
    let x2 = images_tensor(s, batch.iter().map(|b| &b.frame2))?;
    let x = Tensor::cat(&[&x1, &x2], 0)?;

    let pf = s.encode(Domain::Fog, &x)?;
    let rendered_clean = s.decode_image(Domain::Clean, &pf, &x)?;
    if p.wants(Consistency) || p.wants(FlowConsistency) {
        let pc = s.encode(Domain::Clean, &rendered_clean)?;
        if p.wants(Consistency) {
            let cycled = s.decode_image(Domain::Fog, &pc, &rendered_clean)?;
            p.push(
                Consistency,
                loss_transform_consistency(&x1, &x2, &cycled.narrow(0, 0, n)?, &cycled.narrow(0, n, n)?)?,
            );
        }
        if p.wants(FlowConsistency) {
            let flow_fog = s.estimate_flow(&pf.narrow(0, n)?, &pf.narrow(n, n)?)?;
            let flow_clean = s.estimate_flow(&pc.narrow(0, n)?, &pc.narrow(n, n)?)?;
            let mask = if opts.mask.real_fog {
                photometric_consistency_mask(
                    &rendered_clean.narrow(0, 0, n)?,
                    &rendered_clean.narrow(0, n, n)?,
                    flow_clean.full(),
                    opts.mask.tau,
                )?
            } else {
                ConsistencyMask::full_like(flow_clean.full())?
            };
            p.push_opt(FlowConsistency, loss_flow_consistency(flow_fog.full(), flow_clean.full(), &mask)?);
        }
    }
    if p.wants(GanGenClean) {
        p.push(GanGenClean, loss_gan_generator(&s.discriminate(Domain::Clean, &rendered_clean)?)?);
    }
    if p.wants(Hazeline) {
        p.push(Hazeline, loss_hazeline(&rendered_clean, &x, opts.atmo_patch)?);
    }
    if p.wants(DiscClean) {
        if reference_clean.is_empty() {
            p.skipped.push(DiscClean);
        } else {
            let real = images_tensor(s, reference_clean.iter())?;
            p.push(DiscClean, disc_loss(s, Domain::Clean, &real, &rendered_clean)?);
        }
    }
    apply(state, Stage::RealFog, p, opts)
}

fn disc_loss(s: &ParameterStore, domain: Domain, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    loss_gan_discriminator(&s.discriminate(domain, real)?, &s.discriminate(domain, &fake.detach())?)
}

/// Checks every loss, then runs one backward per generator group (each
/// restricted to its trainable set), one optimizer step per updated
/// component, and finally the discriminator objectives the same way.
fn apply(state: &mut TrainState, stage: Stage, p: Pending, opts: &StepOptions) -> Result<LossReport> {
    let step = state.step + 1;
    let mut report = LossReport::new(step, stage.name());
    let mut sums: BTreeMap<_, f64> = BTreeMap::new();
    for (o, t) in &p.terms {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        *sums.entry(o.loss()).or_insert(0.0) += v;
    }
    for (loss, v) in &sums {
        report.record(*loss, *v, &opts.weights);
    }
    for o in &p.skipped {
        log::info!("step {step} ({stage}): {o} skipped");
        report.skip(o.loss());
    }
    if !report.is_finite() {
        let diagnostics = p
            .terms
            .iter()
            .map(|(o, t)| format!("{o}={}", t.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::NonFinite {
            stage: stage.name().into(),
            step,
            diagnostics,
        });
    }

    let generator: Vec<(ComponentSet, Vec<Objective>)> = p.schedule.generator_groups();
    let discriminator: Vec<(ComponentSet, Vec<Objective>)> = p
        .schedule
        .entries()
        .iter()
        .filter(|(o, _)| o.is_discriminator())
        .map(|(o, s)| (*s, vec![*o]))
        .collect();
    for groups in [generator, discriminator] {
        update(state, &p.terms, &groups, opts)?;
    }
    state.step = step;
    Ok(report)
}

fn update(
    state: &mut TrainState,
    terms: &[(Objective, Tensor)],
    groups: &[(ComponentSet, Vec<Objective>)],
    opts: &StepOptions,
) -> Result<()> {
    let trainable = state.store.trainable();
    let mut grads: BTreeMap<Component, Vec<Option<Tensor>>> = BTreeMap::new();
    for (set, objectives) in groups {
        let mut total: Option<Tensor> = None;
        for (o, t) in terms.iter().filter(|(o, _)| objectives.contains(o)) {
            let w = opts.weights.weight(o.loss());
            let term = t.affine(w, 0.0)?;
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let Some(total) = total else { continue };
        let store = total.backward()?;
        for c in set.iter().filter(|c| trainable.contains(*c)) {
            let vars = state.store.vars(c);
            let acc = grads.entry(c).or_insert_with(|| vec![None; vars.len()]);
            for (slot, (_, var)) in acc.iter_mut().zip(&vars) {
                if let Some(g) = store.get(var.as_tensor()) {
                    *slot = Some(match slot.take() {
                        None => g.clone(),
                        Some(prev) => (prev + g)?,
                    });
                }
            }
        }
    }
    for (c, g) in grads {
        let vars = state.store.vars(c);
        state.optimizer.step(c, &vars, &g)?;
    }
    Ok(())
}

pub(crate) fn images_tensor<'a>(s: &ParameterStore, images: impl Iterator<Item = &'a Image>) -> Result<Tensor> {
    let v: Vec<&Image> = images.collect();
    if v.is_empty() {
        return Err(invalid("empty batch"));
    }
    Image::batch_to_tensor(&v, s.device(), s.dtype())
}

fn flows_tensor<'a>(s: &ParameterStore, flows: impl Iterator<Item = &'a FlowField>) -> Result<Tensor> {
    let v: Vec<&FlowField> = flows.collect();
    FlowField::batch_to_tensor(&v, s.device(), s.dtype())
}
