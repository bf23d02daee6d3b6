//! Coarse-to-fine flow decoding: backward warping, the correlation cost
//! volume and the per-level flow heads.

use candle_core::{DType, Tensor};

use super::layers::{Conv2d, Initializer, NamedVars};
use super::{FeaturePyramid, MultiScaleFlow, NetConfig, FLOW_LEVELS};
use crate::error::{invalid, Result};
use crate::ops::{leaky_relu, upsample2x};

/// Added to the squared feature norm before normalizing; zero features stay zero.
pub const FEATURE_NORM_EPS: f64 = 1e-12;

/// Weight scale of each head's output layer. Residuals are doubled at every
/// finer level, so untrained heads must start near zero flow.
const PREDICT_INIT_SCALE: f64 = 0.01;

/// Backward warp by bilinear sampling: `out(x) = feat(x + flow(x))`.
///
/// `feat` is `N×C×H×W`, `flow` is `N×2×H×W` with `(u, v)` in pixels.
/// Bilinear taps that fall outside the grid contribute zero. Gradients
/// reach both the features and the flow.
pub fn warp(feat: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = feat.dims4()?;
    let (fnum, fc, fh, fw) = flow.dims4()?;
    if (fnum, fc, fh, fw) != (n, 2, h, w) {
        return Err(invalid(format!(
            "cannot warp {:?} features with a {:?} flow",
            feat.dims(),
            flow.dims()
        )));
    }
    let dtype = feat.dtype();
    let device = feat.device();
    let grid_x = Tensor::arange(0u32, w as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, 1, 1, w))?;
    let grid_y = Tensor::arange(0u32, h as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, 1, h, 1))?;
    let sx = flow.narrow(1, 0, 1)?.broadcast_add(&grid_x)?;
    let sy = flow.narrow(1, 1, 1)?.broadcast_add(&grid_y)?;
    let x0 = sx.detach().floor()?;
    let y0 = sy.detach().floor()?;
    let wx1 = (&sx - &x0)?;
    let wy1 = (&sy - &y0)?;
    let wx0 = wx1.affine(-1.0, 1.0)?;
    let wy0 = wy1.affine(-1.0, 1.0)?;

    let flat = feat.reshape((n, c, h * w))?;
    let mut out: Option<Tensor> = None;
    for (dy, wy) in [(0.0, &wy0), (1.0, &wy1)] {
        let yi = (&y0 + dy)?;
        let y_ok = in_range(&yi, h)?;
        let yc = yi.clamp(0.0, (h - 1) as f64)?;
        for (dx, wx) in [(0.0, &wx0), (1.0, &wx1)] {
            let xi = (&x0 + dx)?;
            let ok = (in_range(&xi, w)? * &y_ok)?;
            let xc = xi.clamp(0.0, (w - 1) as f64)?;
            let idx = (yc.affine(w as f64, 0.0)? + xc)?
                .to_dtype(DType::U32)?
                .reshape((n, 1, h * w))?
                .broadcast_as((n, c, h * w))?
                .contiguous()?;
            let taps = flat.gather(&idx, 2)?.reshape((n, c, h, w))?;
            let weight = ((wx * wy)? * ok)?;
            let term = taps.broadcast_mul(&weight)?;
            out = Some(match out {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
    }
    Ok(out.expect("four bilinear taps"))
}

/// 1 where `0 <= coord <= len - 1`, else 0, in the dtype of `coord`.
fn in_range(coord: &Tensor, len: usize) -> Result<Tensor> {
    let lo = coord.ge(0.0)?;
    let hi = coord.le((len - 1) as f64)?;
    Ok((lo.to_dtype(coord.dtype())? * hi.to_dtype(coord.dtype())?)?)
}

/// Unit-normalizes each pixel's feature vector.
pub fn normalize_features(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + FEATURE_NORM_EPS)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Correlation of unit-normalized features over a `(2d+1)²` displacement window.
///
/// Output channel `(dv + d)·(2d + 1) + (du + d)` holds
/// `⟨f1(x, y), f2(x + du, y + dv)⟩`; displaced samples outside the grid are zero.
pub fn cost_volume(f1: &Tensor, f2_warped: &Tensor, max_displacement: usize) -> Result<Tensor> {
    if f1.dims() != f2_warped.dims() || f1.rank() != 4 {
        return Err(invalid(format!(
            "cost volume needs equal 4-d features, got {:?} and {:?}",
            f1.dims(),
            f2_warped.dims()
        )));
    }
    let a = normalize_features(f1)?;
    let b = normalize_features(f2_warped)?;
    Ok(super::kernels::correlation(&a, &b, max_displacement)?)
}

/// Number of cost-volume channels for a search radius.
pub fn cost_volume_channels(max_displacement: usize) -> usize {
    (2 * max_displacement + 1).pow(2)
}

struct FlowHead {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl FlowHead {
    fn new(init: &mut Initializer, cin: usize, widths: &[usize]) -> Result<Self> {
        let mut convs = Vec::with_capacity(widths.len());
        let mut c = cin;
        for &wd in widths {
            convs.push(Conv2d::new(init, c, wd, 3, 1, 1)?);
            c = wd;
        }
        Ok(Self {
            convs,
            out: Conv2d::scaled(init, c, 2, 3, PREDICT_INIT_SCALE)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, 0.1)?;
        }
        self.out.forward(&x)
    }

    fn collect(&self, prefix: &str, out: &mut NamedVars) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.conv{i}"), out);
        }
        self.out.collect(&format!("{prefix}.predict"), out);
    }
}

/// The flow decoder: one head per pyramid level 6 → 2.
pub(crate) struct FlowDecoder {
    heads: Vec<FlowHead>,
    max_displacement: usize,
}

impl FlowDecoder {
    pub fn new(init: &mut Initializer, config: &NetConfig) -> Result<Self> {
        let cv = cost_volume_channels(config.max_displacement);
        let heads = FLOW_LEVELS
            .iter()
            .rev()
            .map(|&level| {
                let cin = cv + config.encoder_channels[level - 1] + 2;
                FlowHead::new(init, cin, &config.flow_head_channels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            max_displacement: config.max_displacement,
        })
    }

    pub fn forward(&self, pyr1: &FeaturePyramid, pyr2: &FeaturePyramid) -> Result<MultiScaleFlow> {
        if pyr1.shapes() != pyr2.shapes() {
            return Err(invalid(format!(
                "pyramid shapes differ: {:?} vs {:?}",
                pyr1.shapes(),
                pyr2.shapes()
            )));
        }
        let mut coarse_to_fine = Vec::with_capacity(FLOW_LEVELS.len());
        let mut prev: Option<Tensor> = None;
        for (head, &level) in self.heads.iter().zip(FLOW_LEVELS.iter().rev()) {
            let f1 = pyr1.level(level);
            let f2 = pyr2.level(level);
            let (n, _, h, w) = f1.dims4()?;
            let (init_flow, f2w) = match &prev {
                None => (Tensor::zeros((n, 2, h, w), f1.dtype(), f1.device())?, f2.clone()),
                Some(coarse) => {
                    let up = (upsample2x(coarse)? * 2.0)?;
                    let f2w = warp(f2, &up)?;
                    (up, f2w)
                }
            };
            let cv = leaky_relu(&cost_volume(f1, &f2w, self.max_displacement)?, 0.1)?;
            let input = Tensor::cat(&[&cv, f1, &init_flow], 1)?;
            let flow = (init_flow + head.forward(&input)?)?;
            coarse_to_fine.push(flow.clone());
            prev = Some(flow);
        }
        let finest = prev.expect("at least one flow level");
        let full = (upsample2x(&upsample2x(&finest)?)? * 4.0)?;
        coarse_to_fine.reverse();
        Ok(MultiScaleFlow {
            levels: coarse_to_fine,
            full,
        })
    }

    pub fn collect(&self, out: &mut NamedVars) {
        for (head, level) in self.heads.iter().zip(FLOW_LEVELS.iter().rev()) {
            head.collect(&format!("level{level}"), out);
        }
    }
}
