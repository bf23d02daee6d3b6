//! Training objectives and the photometric consistency mask.
//!
//! All losses take batched tensors (`N×C×H×W`) and return a scalar tensor
//! that participates in autograd. Flows are `N×2×H×W` in pixels, images
//! `N×3×H×W` in `[0, 1]`, score maps `N×1×H'×W'`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fogphys::{brightest_patch, CHROMA_EPS, HAZELINE_MIN_NORM};
use crate::nets::{warp, MultiScaleFlow, FLOW_LEVELS};
use crate::ops::{channel_norm, safe_sqrt, softplus};
use crate::raster::Image;

/// Weights of the per-level terms of the multiscale EPE, levels 2..=6.
pub const MULTISCALE_EPE_WEIGHTS: [f64; 5] = [0.32, 0.08, 0.02, 0.01, 0.005];

/// Default photometric error threshold on `[0, 1]` intensities.
pub const DEFAULT_MASK_TAU: f64 = 0.05;

/// Names of the logged loss terms, in log-column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    EpeSup,
    L1Sup,
    Con,
    EpeCross,
    GanG,
    GanD,
    Hazeline,
    FlowCon,
}

impl LossName {
    pub const ALL: [LossName; 8] = [
        LossName::EpeSup,
        LossName::L1Sup,
        LossName::Con,
        LossName::EpeCross,
        LossName::GanG,
        LossName::GanD,
        LossName::Hazeline,
        LossName::FlowCon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossName::EpeSup => "epe_sup",
            LossName::L1Sup => "l1_sup",
            LossName::Con => "con",
            LossName::EpeCross => "epe_cross",
            LossName::GanG => "gan_g",
            LossName::GanD => "gan_d",
            LossName::Hazeline => "hazeline",
            LossName::FlowCon => "flow_con",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relative weights of the loss terms. Both GAN terms share `gan`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub epe_sup: f64,
    pub l1_sup: f64,
    pub con: f64,
    pub epe_cross: f64,
    pub gan: f64,
    pub hazeline: f64,
    pub flow_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            epe_sup: 1.0,
            l1_sup: 1.0,
            con: 10.0,
            epe_cross: 1.0,
            gan: 0.5,
            hazeline: 1.0,
            flow_con: 1.0,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, loss: LossName) -> f64 {
        match loss {
            LossName::EpeSup => self.epe_sup,
            LossName::L1Sup => self.l1_sup,
            LossName::Con => self.con,
            LossName::EpeCross => self.epe_cross,
            LossName::GanG | LossName::GanD => self.gan,
            LossName::Hazeline => self.hazeline,
            LossName::FlowCon => self.flow_con,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in LossName::ALL {
            let w = self.weight(l);
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!("loss weight {l} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub stage: String,
    pub values: BTreeMap<LossName, f64>,
    /// Terms that were scheduled but not applied (e.g. an all-zero mask).
    pub skipped: Vec<LossName>,
    /// `Σ weight · value` over the recorded terms.
    pub total: f64,
}

impl LossReport {
    pub fn new(step: u64, stage: impl Into<String>) -> Self {
        Self {
            step,
            stage: stage.into(),
            values: BTreeMap::new(),
            skipped: Vec::new(),
            total: 0.0,
        }
    }

    pub fn record(&mut self, loss: LossName, value: f64, weights: &LossWeights) {
        self.values.insert(loss, value);
        self.total = self
            .values
            .iter()
            .map(|(&l, &v)| weights.weight(l) * v)
            .sum();
    }

    pub fn skip(&mut self, loss: LossName) {
        if !self.skipped.contains(&loss) {
            self.skipped.push(loss);
        }
    }

    pub fn get(&self, loss: LossName) -> Option<f64> {
        self.values.get(&loss).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.values.values().all(|v| v.is_finite())
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["step".to_string(), "stage".to_string()];
        cols.extend(LossName::ALL.iter().map(|l| l.name().to_string()));
        cols.push("total".into());
        cols.push("skipped".into());
        cols.join(",")
    }

    /// One CSV line; absent terms are empty fields, floats use the shortest
    /// representation that round-trips.
    pub fn csv_line(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.stage.clone()];
        for l in LossName::ALL {
            cols.push(self.get(l).map(|v| format!("{v:?}")).unwrap_or_default());
        }
        cols.push(format!("{:?}", self.total));
        cols.push(
            self.skipped
                .iter()
                .map(|l| l.name())
                .collect::<Vec<_>>()
                .join(";"),
        );
        cols.join(",")
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.csv_line())
    }
}

/// Binary `N×1×H×W` gate over flow pixels; carries no gradient.
#[derive(Debug, Clone)]
pub struct ConsistencyMask(Tensor);

impl ConsistencyMask {
    /// Wraps a tensor after checking it is strictly 0/1.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 || t.dim(1)? != 1 {
            return Err(invalid(format!("mask must be N×1×H×W, got {:?}", t.dims())));
        }
        let vals = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if vals.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid("mask values must be exactly 0 or 1"));
        }
        Ok(Self(t.detach()))
    }

    /// A mask admitting every pixel of `flow`.
    pub fn full_like(flow: &Tensor) -> Result<Self> {
        let (n, _, h, w) = flow.dims4()?;
        Ok(Self(Tensor::ones((n, 1, h, w), flow.dtype(), flow.device())?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Number of admitted pixels across the batch.
    pub fn count(&self) -> Result<f64> {
        Ok(self.0.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
    }

    /// Fraction of admitted pixels.
    pub fn coverage(&self) -> Result<f64> {
        Ok(self.count()? / self.0.elem_count() as f64)
    }
}

/// Mean per-pixel end-point error between two `N×2×H×W` flows.
pub fn epe(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_dims(pred, gt, "flows")?;
    Ok(channel_norm(&(pred - gt)?)?.mean_all()?)
}

/// Supervised EPE against a full-resolution ground truth. With `multiscale`,
/// each level-`l` prediction is also compared with the ground truth
/// average-pooled by `2^l` and divided by `2^l`.
pub fn loss_epe_supervised(pred: &MultiScaleFlow, gt: &Tensor, multiscale: bool) -> Result<Tensor> {
    let finite = gt
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(invalid("ground-truth flow contains non-finite values"));
    }
    let gt = gt.detach();
    let mut loss = epe(pred.full(), &gt)?;
    if multiscale {
        for (&level, &weight) in FLOW_LEVELS.iter().zip(MULTISCALE_EPE_WEIGHTS.iter()) {
            let scale = 1usize << level;
            let target = (gt.avg_pool2d(scale)? / scale as f64)?;
            loss = (loss + (epe(pred.level(level), &target)? * weight)?)?;
        }
    }
    Ok(loss)
}

/// Mean absolute difference over all pixels and channels.
pub fn loss_l1_transform(rendered: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_dims(rendered, gt, "images")?;
    Ok((rendered - gt)?.abs()?.mean_all()?)
}

/// `mean|x₁ − x̂̂₁| + mean|x₂ − x̂̂₂|`.
pub fn loss_transform_consistency(orig1: &Tensor, orig2: &Tensor, cyc1: &Tensor, cyc2: &Tensor) -> Result<Tensor> {
    Ok((loss_l1_transform(cyc1, orig1)? + loss_l1_transform(cyc2, orig2)?)?)
}

/// Pixels where `img2` warped by `flow` reproduces `img1` within `tau`
/// (mean absolute error over channels, strict `<`). Pixels whose flow
/// target leaves the image are rejected.
pub fn photometric_consistency_mask(img1: &Tensor, img2: &Tensor, flow: &Tensor, tau: f64) -> Result<ConsistencyMask> {
    same_dims(img1, img2, "images")?;
    let (n, _, h, w) = img1.dims4()?;
    if flow.dims() != [n, 2, h, w] {
        return Err(invalid(format!(
            "mask flow must be full resolution {:?}, got {:?}",
            [n, 2, h, w],
            flow.dims()
        )));
    }
    let (img1, img2, flow) = (img1.detach(), img2.detach(), flow.detach());
    let warped = warp(&img2, &flow)?;
    let err = (img1 - warped)?.abs()?.mean_keepdim(1)?;
    let dtype = flow.dtype();
    let device = flow.device();
    let gx = Tensor::arange(0u32, w as u32, device)?.to_dtype(dtype)?.reshape((1, 1, 1, w))?;
    let gy = Tensor::arange(0u32, h as u32, device)?.to_dtype(dtype)?.reshape((1, 1, h, 1))?;
    let sx = flow.narrow(1, 0, 1)?.broadcast_add(&gx)?;
    let sy = flow.narrow(1, 1, 1)?.broadcast_add(&gy)?;
    let inside = sx
        .ge(0.0)?
        .mul(&sx.le((w - 1) as f64)?)?
        .mul(&sy.ge(0.0)?)?
        .mul(&sy.le((h - 1) as f64)?)?;
    let good = err.lt(tau)?.mul(&inside)?;
    ConsistencyMask::new(good.to_dtype(dtype)?)
}

/// Which flow of a cross-domain pair is a constant target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopTarget {
    A,
    B,
    Neither,
}

/// `Σ mask·‖a − b‖ / Σ mask` with the chosen side detached.
/// Returns `None` when the mask admits no pixel.
pub fn loss_epe_cross_domain(
    flow_a: &Tensor,
    flow_b: &Tensor,
    mask: &ConsistencyMask,
    stop: StopTarget,
) -> Result<Option<Tensor>> {
    same_dims(flow_a, flow_b, "flows")?;
    let (n, _, h, w) = flow_a.dims4()?;
    if mask.tensor().dims() != [n, 1, h, w] {
        return Err(invalid(format!(
            "mask {:?} does not match flows {:?}",
            mask.tensor().dims(),
            flow_a.dims()
        )));
    }
    let count = mask.count()?;
    if count == 0.0 {
        return Ok(None);
    }
    let (a, b) = match stop {
        StopTarget::A => (flow_a.detach(), flow_b.clone()),
        StopTarget::B => (flow_a.clone(), flow_b.detach()),
        StopTarget::Neither => (flow_a.clone(), flow_b.clone()),
    };
    let norms = channel_norm(&(a - b)?)?;
    let m = mask.tensor().to_dtype(norms.dtype())?;
    Ok(Some((norms.mul(&m)?.sum_all()? / count)?))
}

/// Masked flow agreement with gradients to both sides.
pub fn loss_flow_consistency(flow_f: &Tensor, flow_c: &Tensor, mask: &ConsistencyMask) -> Result<Option<Tensor>> {
    loss_epe_cross_domain(flow_f, flow_c, mask, StopTarget::Neither)
}

/// Non-saturating generator loss `mean softplus(−s_fake)`.
pub fn loss_gan_generator(scores_fake: &Tensor) -> Result<Tensor> {
    Ok(softplus(&scores_fake.neg()?)?.mean_all()?)
}

/// `mean softplus(−s_real) + mean softplus(s_fake)`.
pub fn loss_gan_discriminator(scores_real: &Tensor, scores_fake: &Tensor) -> Result<Tensor> {
    Ok((softplus(&scores_real.neg()?)?.mean_all()? + softplus(scores_fake)?.mean_all()?)?)
}

/// Per-pixel chromaticity `x / (ΣRGB + ε)` of an `N×3×H×W` batch.
pub fn chromaticity_tensor(img: &Tensor) -> Result<Tensor> {
    let sum = (img.sum_keepdim(1)? + CHROMA_EPS)?;
    Ok(img.broadcast_div(&sum)?)
}

/// Chromaticity of the brightest-patch mean color of each fog image, `N×3×1×1`.
///
/// The window location is chosen on the current values without gradient;
/// the window mean itself is differentiable.
pub fn atmospheric_chroma_tensor(fog: &Tensor, patch: usize) -> Result<Tensor> {
    let n = fog.dim(0)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = Image::from_tensor(&fog.detach(), i)?;
        let (top, left) = brightest_patch(&img, patch)?;
        let window = fog.narrow(0, i, 1)?.narrow(2, top, patch)?.narrow(3, left, patch)?;
        out.push(window.mean_keepdim(3)?.mean_keepdim(2)?);
    }
    chromaticity_tensor(&Tensor::cat(&out, 0)?)
}

/// Mean of `1 − cos∠(σ − a, γ − a)` over non-degenerate pixels, where `γ`
/// is the chromaticity of `clean`, `σ` of `fog` and `a` the brightest-patch
/// atmospheric chromaticity of `fog`. Zero when no pixel qualifies.
pub fn loss_hazeline(clean: &Tensor, fog: &Tensor, patch: usize) -> Result<Tensor> {
    same_dims(clean, fog, "images")?;
    let a = atmospheric_chroma_tensor(fog, patch)?;
    hazeline_with_chroma(clean, fog, &a)
}

/// [`loss_hazeline`] with a given `N×3×1×1` atmospheric chromaticity.
pub fn hazeline_with_chroma(clean: &Tensor, fog: &Tensor, a: &Tensor) -> Result<Tensor> {
    same_dims(clean, fog, "images")?;
    let dg = chromaticity_tensor(clean)?.broadcast_sub(a)?;
    let ds = chromaticity_tensor(fog)?.broadcast_sub(a)?;
    let ng = safe_sqrt(&dg.sqr()?.sum_keepdim(1)?)?;
    let ns = safe_sqrt(&ds.sqr()?.sum_keepdim(1)?)?;
    let valid = ng
        .detach()
        .ge(HAZELINE_MIN_NORM)?
        .mul(&ns.detach().ge(HAZELINE_MIN_NORM)?)?;
    let ones = ng.ones_like()?;
    let denom = valid.where_cond(&(&ng * &ns)?, &ones)?;
    let cos = (dg * ds)?.sum_keepdim(1)?.div(&denom)?;
    let vf = valid.to_dtype(cos.dtype())?;
    let count = vf.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    let residual = (cos.affine(-1.0, 1.0)? * vf)?.sum_all()?;
    if count == 0.0 {
        return Ok(residual.zeros_like()?);
    }
    Ok((residual / count)?)
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() || a.rank() != 4 {
        return Err(invalid(format!("{what} must be equal 4-d shapes, got {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn three_four_five() {
        let a = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::cat(
            &[(a.narrow(1, 0, 1).unwrap() + 3.0).unwrap(), (a.narrow(1, 1, 1).unwrap() + 4.0).unwrap()],
            1,
        )
        .unwrap();
        assert!((scalar(&epe(&b, &a).unwrap()) - 5.0).abs() < 1e-12);
        let full = ConsistencyMask::full_like(&a).unwrap();
        let l = loss_flow_consistency(&a, &b, &full).unwrap().unwrap();
        assert!((scalar(&l) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_at_zero_is_two_ln2() {
        let z = Tensor::zeros((2, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&loss_gan_discriminator(&z, &z).unwrap());
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let big = (z.clone() + 60.0).unwrap();
        assert!(scalar(&loss_gan_generator(&big).unwrap()) < 1e-20);
    }

    #[test]
    fn all_zero_mask_skips() {
        let a = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let m = ConsistencyMask::new(Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(loss_epe_cross_domain(&a, &a, &m, StopTarget::B).unwrap().is_none());
    }

    #[test]
    fn mask_rejects_non_binary() {
        let m = t(vec![0.0, 1.0, 0.5, 1.0], &[1, 1, 2, 2]);
        assert!(ConsistencyMask::new(m).is_err());
    }

    #[test]
    fn stop_side_gets_no_gradient() {
        let a = Var::from_tensor(&t((0..8).map(|v| v as f64 * 0.3).collect(), &[1, 2, 2, 2])).unwrap();
        let b = Var::from_tensor(&t((0..8).map(|v| (v as f64).sin()).collect(), &[1, 2, 2, 2])).unwrap();
        let m = ConsistencyMask::full_like(a.as_tensor()).unwrap();
        let l = loss_epe_cross_domain(a.as_tensor(), b.as_tensor(), &m, StopTarget::B).unwrap().unwrap();
        let g = l.backward().unwrap();
        assert!(g.get(a.as_tensor()).is_some());
        assert!(g.get(b.as_tensor()).is_none());
    }

    #[test]
    fn report_total_and_csv() {
        let w = LossWeights::default();
        let mut r = LossReport::new(7, "real_clean");
        r.record(LossName::Con, 0.5, &w);
        r.record(LossName::GanG, 0.25, &w);
        r.skip(LossName::EpeCross);
        assert!((r.total - (10.0 * 0.5 + 0.5 * 0.25)).abs() < 1e-12);
        let header = LossReport::csv_header();
        let line = r.csv_line();
        assert_eq!(header.split(',').count(), line.split(',').count());
        assert!(line.starts_with("7,real_clean,,,0.5,,0.25,"));
        assert!(line.ends_with(",epe_cross"));
    }

    #[test]
    fn hazeline_is_zero_for_identical_images() {
        let img = t((0..3 * 16 * 16).map(|i| 0.1 + 0.8 * ((i * 37 % 101) as f64 / 101.0)).collect(), &[1, 3, 16, 16]);
        let l = scalar(&loss_hazeline(&img, &img, 4).unwrap());
        assert!(l.abs() < 1e-12);
    }
}
