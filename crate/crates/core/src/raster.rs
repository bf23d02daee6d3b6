//! Plain-data rasters: RGB images, flow fields and single-channel maps.
//!
//! All rasters store their channels as separate row-major planes, which is
//! also the memory order of an `NCHW` tensor for a single batch element.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Result};

/// An `H×W×3` RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar `R, G, B` data, rejecting values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("image must have non-zero size"));
        }
        if data.len() != 3 * height * width {
            return Err(invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0f32; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.iter().enumerate() {
                    data[c * plane + y * width + x] = *v;
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Copies the window `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window(self.dims(), top, left, h, w)?;
        let data = crop_planes(&self.data, 3, self.width, self.height, top, left, h, w);
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Stacks images into an `N×3×H×W` tensor.
    pub fn batch_to_tensor(images: &[&Image], device: &Device, dtype: DType) -> Result<Tensor> {
        stack_planes(images.iter().map(|i| (i.dims(), &i.data[..])), 3, device, dtype)
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], device, dtype)
    }

    /// Extracts element `index` of an `N×3×H×W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (h, w, data) = unstack_plane(t, index, 3)?;
        Self::from_clamped(h, w, data)
    }
}

/// An `H×W×2` field of pixel displacements `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    /// Builds a flow from planar data: the `u` plane followed by the `v` plane.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("flow must have non-zero size"));
        }
        if data.len() != 2 * height * width {
            return Err(invalid(format!(
                "flow buffer has {} values, expected {}",
                data.len(),
                2 * height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; 2 * height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 2],
    ) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0f32; 2 * plane];
        for y in 0..height {
            for x in 0..width {
                let [u, v] = f(y, x);
                data[y * width + x] = u;
                data[plane + y * width + x] = v;
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 2] {
        let i = y * self.width + x;
        [self.data[i], self.data[self.height * self.width + i]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window(self.dims(), top, left, h, w)?;
        let data = crop_planes(&self.data, 2, self.width, self.height, top, left, h, w);
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn batch_to_tensor(flows: &[&FlowField], device: &Device, dtype: DType) -> Result<Tensor> {
        stack_planes(flows.iter().map(|f| (f.dims(), &f.data[..])), 2, device, dtype)
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], device, dtype)
    }

    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (h, w, data) = unstack_plane(t, index, 2)?;
        Self::new(h, w, data)
    }
}

/// A single-channel `H×W` grid of reals (depth, transmission, masks).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("map must have non-zero size"));
        }
        if data.len() != height * width {
            return Err(invalid(format!(
                "map buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        check_window(self.dims(), top, left, h, w)?;
        let data = crop_planes(&self.data, 1, self.width, self.height, top, left, h, w);
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    pub fn batch_to_tensor(maps: &[&ScalarMap], device: &Device, dtype: DType) -> Result<Tensor> {
        stack_planes(maps.iter().map(|m| (m.dims(), &m.data[..])), 1, device, dtype)
    }

    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (h, w, data) = unstack_plane(t, index, 1)?;
        Self::new(h, w, data)
    }
}

fn check_window(dims: (usize, usize), top: usize, left: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || top + h > dims.0 || left + w > dims.1 {
        return Err(invalid(format!(
            "crop window {h}x{w} at ({top}, {left}) does not fit in {}x{}",
            dims.0, dims.1
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn crop_planes(
    data: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        let plane = &data[c * height * width..(c + 1) * height * width];
        for y in top..top + h {
            out.extend_from_slice(&plane[y * width + left..y * width + left + w]);
        }
    }
    out
}

fn stack_planes<'a>(
    items: impl Iterator<Item = ((usize, usize), &'a [f32])>,
    channels: usize,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let mut buf = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for (d, data) in items {
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(invalid(format!("batch mixes sizes {prev:?} and {d:?}")))
            }
            _ => {}
        }
        buf.extend_from_slice(data);
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| invalid("empty batch"))?;
    let t = Tensor::from_vec(buf, (n, channels, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

fn unstack_plane(t: &Tensor, index: usize, channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    let t = match t.rank() {
        3 => t.unsqueeze(0)?,
        4 => t.clone(),
        r => return Err(invalid(format!("expected rank 3 or 4 tensor, got rank {r}"))),
    };
    let (n, c, h, w) = t.dims4()?;
    if c != channels || index >= n {
        return Err(invalid(format!(
            "tensor {:?} has no element {index} with {channels} channels",
            t.dims()
        )));
    }
    let data = t
        .get(index)?
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Ok((h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let img = Image::from_fn(3, 4, |y, x| [y as f32 / 4.0, x as f32 / 4.0, 0.5]).unwrap();
        let t = img.to_tensor(&Device::Cpu, DType::F32).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 4]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);

        let flow = FlowField::from_fn(2, 3, |y, x| [x as f32, -(y as f32)]).unwrap();
        let t = flow.to_tensor(&Device::Cpu, DType::F64).unwrap();
        assert_eq!(FlowField::from_tensor(&t, 0).unwrap(), flow);
    }

    #[test]
    fn crop_copies_window() {
        let m = ScalarMap::from_fn(4, 5, |y, x| (10 * y + x) as f32).unwrap();
        let c = m.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        assert!(m.crop(3, 0, 2, 1).is_err());
    }
}
