use candle_core::Tensor;

use super::layers::{Conv2d, Initializer, NamedVars};
use super::{FeaturePyramid, NetConfig, PYRAMID_LEVELS};
use crate::error::{invalid, Result};
use crate::ops::leaky_relu;

/// Six downsampling stages; each is a stride-2 convolution followed by a
/// stride-1 convolution, both 3×3 with leaky-ReLU(0.1).
pub(crate) struct Encoder {
    stages: Vec<(Conv2d, Conv2d)>,
}

impl Encoder {
    pub fn new(init: &mut Initializer, config: &NetConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(PYRAMID_LEVELS);
        let mut cin = 3;
        for &c in &config.encoder_channels {
            let down = Conv2d::new(init, cin, c, 3, 2, 1)?;
            let refine = Conv2d::new(init, c, c, 3, 1, 1)?;
            stages.push((down, refine));
            cin = c;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, img: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = img.dims4()?;
        let factor = 1 << PYRAMID_LEVELS;
        if c != 3 || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(invalid(format!(
                "encoder needs N×3×H×W input with H, W divisible by {factor}, got {:?}",
                img.dims()
            )));
        }
        // center [0, 1] images on zero
        let mut x = img.affine(2.0, -1.0)?;
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for (down, refine) in &self.stages {
            x = leaky_relu(&down.forward(&x)?, 0.1)?;
            x = leaky_relu(&refine.forward(&x)?, 0.1)?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn collect(&self, out: &mut NamedVars) {
        for (i, (down, refine)) in self.stages.iter().enumerate() {
            down.collect(&format!("level{}.down", i + 1), out);
            refine.collect(&format!("level{}.refine", i + 1), out);
        }
    }
}
