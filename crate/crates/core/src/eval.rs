//! Flow metrics, flow colorization and whole-frame inference helpers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::datapipe::{load_mask, read_flo};
use crate::error::{invalid, Result};
use crate::nets::{Domain, ParameterStore};
use crate::raster::{FlowField, Image};

/// Bad-pixel thresholds used for real sequences.
pub const DEFAULT_DELTAS_REAL: [f64; 2] = [3.0, 5.0];
/// Bad-pixel thresholds used for synthetic sequences.
pub const DEFAULT_DELTAS_SYNTHETIC: [f64; 2] = [1.0, 3.0];
/// `.flo` components at or above this magnitude mean "no ground truth".
pub const UNKNOWN_FLOW: f32 = 1e9;
/// Frames handed to the network are padded to a multiple of this.
pub const SIZE_MULTIPLE: usize = 64;

/// Where ground truth exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid(format!("mask has {} entries for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    /// Valid wherever the flow is finite and not marked unknown.
    pub fn from_ground_truth(gt: &FlowField) -> Self {
        let (h, w) = gt.dims();
        let data = (0..h * w)
            .map(|i| {
                let (u, v) = (gt.data()[i], gt.data()[h * w + i]);
                u.is_finite() && v.is_finite() && u.abs() < UNKNOWN_FLOW && v.abs() < UNKNOWN_FLOW
            })
            .collect();
        Self { height: h, width: w, data }
    }

    /// Reads a mask PNG; nonzero pixels are valid.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, w, data) = load_mask(path)?;
        Self::new(h, w, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(invalid("mask sizes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Self::new(self.height, self.width, data)
    }
}

/// Per-pixel end-point errors over the valid pixels.
fn errors(pred: &FlowField, gt: &FlowField, valid: &ValidityMask) -> Result<Vec<f64>> {
    if pred.dims() != gt.dims() || valid.dims() != gt.dims() {
        return Err(invalid(format!(
            "size mismatch: prediction {:?}, ground truth {:?}, mask {:?}",
            pred.dims(),
            gt.dims(),
            valid.dims()
        )));
    }
    let n = gt.height() * gt.width();
    let (p, g) = (pred.data(), gt.data());
    let out: Vec<f64> = (0..n)
        .filter(|&i| valid.data[i])
        .map(|i| {
            let du = p[i] as f64 - g[i] as f64;
            let dv = p[n + i] as f64 - g[n + i] as f64;
            du.hypot(dv)
        })
        .collect();
    if out.is_empty() {
        return Err(invalid("validity mask selects no pixels"));
    }
    Ok(out)
}

/// Mean end-point error over valid pixels.
pub fn metric_epe(pred: &FlowField, gt: &FlowField, valid: &ValidityMask) -> Result<f64> {
    let e = errors(pred, gt, valid)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of valid pixels whose end-point error is strictly above `delta`.
pub fn metric_bad_pixel(pred: &FlowField, gt: &FlowField, valid: &ValidityMask, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let e = errors(pred, gt, valid)?;
    Ok(bad_fraction(&e, delta))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid(format!("bad-pixel threshold must be positive, got {delta}")));
    }
    Ok(())
}

fn bad_fraction(errors: &[f64], delta: f64) -> f64 {
    errors.iter().filter(|&&e| e > delta).count() as f64 / errors.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// `(delta, fraction)` in the order the thresholds were given.
    pub bad_pixel: Vec<(f64, f64)>,
    pub n_valid: usize,
}

impl MetricReport {
    pub fn evaluate(pred: &FlowField, gt: &FlowField, valid: &ValidityMask, deltas: &[f64]) -> Result<Self> {
        for &d in deltas {
            check_delta(d)?;
        }
        let e = errors(pred, gt, valid)?;
        Ok(Self {
            epe: e.iter().sum::<f64>() / e.len() as f64,
            bad_pixel: deltas.iter().map(|&d| (d, bad_fraction(&e, d))).collect(),
            n_valid: e.len(),
        })
    }

    pub fn bad(&self, delta: f64) -> Option<f64> {
        self.bad_pixel.iter().find(|(d, _)| *d == delta).map(|(_, f)| *f)
    }

    /// Pools several reports over all their valid pixels.
    pub fn pooled(reports: &[MetricReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| invalid("nothing to aggregate"))?;
        let n: usize = reports.iter().map(|r| r.n_valid).sum();
        let weighted = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(|r| f(r) * r.n_valid as f64).sum::<f64>() / n as f64;
        let bad_pixel = first
            .bad_pixel
            .iter()
            .enumerate()
            .map(|(k, (d, _))| (*d, weighted(&|r| r.bad_pixel[k].1)))
            .collect();
        Ok(Self {
            epe: weighted(&|r| r.epe),
            bad_pixel,
            n_valid: n,
        })
    }
}

/// One evaluated frame of a directory run.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image_id: String,
    pub report: MetricReport,
}

/// Scores every `.flo` in `gt_dir` against the same-named file in
/// `pred_dir`. A `<id>.png` in `mask_dir` further restricts the valid
/// pixels; unknown ground-truth values are always excluded.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, mask_dir: Option<&Path>, deltas: &[f64]) -> Result<(Vec<EvalRow>, MetricReport)> {
    let mut gts: Vec<PathBuf> = fs::read_dir(gt_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    gts.retain(|p| p.extension().is_some_and(|e| e == "flo"));
    gts.sort();
    if gts.is_empty() {
        return Err(invalid(format!("no .flo files in {}", gt_dir.display())));
    }
    let mut rows = Vec::with_capacity(gts.len());
    for gt_path in gts {
        let id = gt_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let pred_path = pred_dir.join(gt_path.file_name().expect("listed file"));
        if !pred_path.exists() {
            return Err(invalid(format!("missing prediction {}", pred_path.display())));
        }
        let gt = read_flo(&gt_path)?;
        let pred = read_flo(&pred_path)?;
        let mut valid = ValidityMask::from_ground_truth(&gt);
        if let Some(mask) = mask_dir.map(|d| d.join(format!("{id}.png"))).filter(|p| p.exists()) {
            valid = valid.and(&ValidityMask::load(mask)?)?;
        }
        let report = MetricReport::evaluate(&pred, &gt, &valid, deltas)
            .map_err(|e| invalid(format!("{id}: {e}")))?;
        rows.push(EvalRow { image_id: id, report });
    }
    let aggregate = MetricReport::pooled(&rows.iter().map(|r| r.report.clone()).collect::<Vec<_>>())?;
    Ok((rows, aggregate))
}

/// Writes `image_id,epe,bad<δ>...` rows followed by an `aggregate` row.
pub fn write_eval_csv(out: &mut impl Write, rows: &[EvalRow], aggregate: &MetricReport) -> std::io::Result<()> {
    let header: Vec<String> = aggregate.bad_pixel.iter().map(|(d, _)| format!("bad{d}")).collect();
    writeln!(out, "image_id,epe,{}", header.join(","))?;
    let line = |out: &mut dyn Write, id: &str, r: &MetricReport| {
        let bads: Vec<String> = r.bad_pixel.iter().map(|(_, f)| format!("{f}")).collect();
        writeln!(out, "{id},{},{}", r.epe, bads.join(","))
    };
    for row in rows {
        line(out, &row.image_id, &row.report)?;
    }
    line(out, "aggregate", aggregate)
}

/// Segment lengths of the flow color wheel: red→yellow→green→cyan→blue→magenta→red.
const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55-entry flow color wheel, channels in `[0, 1]`.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_SEGMENTS.iter().sum());
    // (channel that ramps, direction, channel held at full)
    let ramps: [(usize, bool, usize); 6] = [(1, true, 0), (0, false, 1), (2, true, 1), (1, false, 2), (0, true, 2), (2, false, 0)];
    for (&len, &(ramp, up, full)) in WHEEL_SEGMENTS.iter().zip(&ramps) {
        for i in 0..len {
            let t = i as f32 / len as f32;
            let mut c = [0f32; 3];
            c[full] = 1.0;
            c[ramp] = if up { t } else { 1.0 - t };
            wheel.push(c);
        }
    }
    wheel
}

/// Colors a flow field: hue from direction, saturation from magnitude over
/// `max_mag` (default: the 99th-percentile magnitude). Zero flow is white;
/// magnitudes beyond `max_mag` are darkened.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f64>) -> Image {
    let (h, w) = flow.dims();
    let n = h * w;
    let d = flow.data();
    let mag = |i: usize| (d[i] as f64).hypot(d[n + i] as f64);
    let max_mag = max_mag.unwrap_or_else(|| {
        let mut m: Vec<f64> = (0..n).map(mag).filter(|m| m.is_finite()).collect();
        if m.is_empty() {
            return 0.0;
        }
        m.sort_by(f64::total_cmp);
        let idx = ((0.99 * m.len() as f64).ceil() as usize).clamp(1, m.len()) - 1;
        m[idx]
    });
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut out = vec![1f32; 3 * n];
    for i in 0..n {
        let (u, v) = (d[i] as f64, d[n + i] as f64);
        let m = mag(i);
        if !(m > 0.0 && m.is_finite() && max_mag > 0.0) {
            continue;
        }
        let rad = m / max_mag;
        let a = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (a + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for c in 0..3 {
            let base = (1.0 - f) * wheel[k0][c] as f64 + f * wheel[k1][c] as f64;
            let col = if rad <= 1.0 { 1.0 - rad * (1.0 - base) } else { base * 0.75 };
            out[c * n + i] = col as f32;
        }
    }
    Image::from_clamped(h, w, out).expect("sizes match")
}

/// Edge-replicates `img` to the next multiple of `multiple` on both axes.
pub fn pad_to_multiple(img: &Image, multiple: usize) -> Image {
    let (h, w) = img.dims();
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    Image::from_fn(ph, pw, |y, x| img.get(y.min(h - 1), x.min(w - 1))).expect("positive size")
}

/// Full-resolution flow from `frame1` to `frame2` in `domain`. Frames of
/// any size are padded for the network and the result is cropped back.
pub fn estimate_flow(store: &ParameterStore, domain: Domain, frame1: &Image, frame2: &Image) -> Result<FlowField> {
    if frame1.dims() != frame2.dims() {
        return Err(invalid("frames differ in size"));
    }
    let (h, w) = frame1.dims();
    let dev = store.device();
    let a = pad_to_multiple(frame1, SIZE_MULTIPLE).to_tensor(dev, store.dtype())?;
    let b = pad_to_multiple(frame2, SIZE_MULTIPLE).to_tensor(dev, store.dtype())?;
    let flow = store.flow_between(domain, &a, &b)?;
    FlowField::from_tensor(flow.full(), 0)?.crop(0, 0, h, w)
}

/// Renders a fog image in the clean domain.
pub fn defog(store: &ParameterStore, fog: &Image) -> Result<Image> {
    translate(store, Domain::Fog, fog)
}

/// Maps an image of domain `from` into the other domain.
pub fn translate(store: &ParameterStore, from: Domain, img: &Image) -> Result<Image> {
    let (h, w) = img.dims();
    let x = pad_to_multiple(img, SIZE_MULTIPLE).to_tensor(store.device(), store.dtype())?;
    Image::from_tensor(&store.translate(from, &x)?, 0)?.crop(0, 0, h, w)
}
