use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels as conv;
use crate::error::Result;

/// Draws deterministic weights for one component.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng, device: &Device, dtype: DType) -> Self {
        Self {
            rng,
            device: device.clone(),
            dtype,
        }
    }

    /// Uniform in `[−b, b]` with `b = gain·√(3 / fan_in)`, `gain` tuned for
    /// leaky-ReLU(0.1) activations.
    fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Result<Var> {
        self.scaled_uniform(shape, fan_in, 1.0)
    }

    fn scaled_uniform(&mut self, shape: &[usize], fan_in: usize, scale: f64) -> Result<Var> {
        let gain = (2.0f64 / (1.0 + 0.01)).sqrt();
        let bound = (scale * gain * (3.0 / fan_in as f64).sqrt()) as f32;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn zeros(&self, len: usize) -> Result<Var> {
        Ok(Var::zeros(len, self.dtype, &self.device)?)
    }
}

pub(crate) type NamedVars = Vec<(String, Var)>;

pub(crate) struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.fan_in_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel)?,
            bias: init.zeros(cout)?,
            stride,
            padding,
        })
    }

    /// Like [`Conv2d::new`] with the weight bound multiplied by `scale`.
    pub fn scaled(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        kernel: usize,
        scale: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.scaled_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, scale)?,
            bias: init.zeros(cout)?,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Transposed convolution; with `kernel = 4, stride = 2, padding = 1` it
/// exactly doubles the spatial size.
pub(crate) struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        Ok(Self {
            weight: init.fan_in_uniform(&[cin, cout, kernel, kernel], fan_in)?,
            bias: init.zeros(cout)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv_transpose2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut NamedVars) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}
