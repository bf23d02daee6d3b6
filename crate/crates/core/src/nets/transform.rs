use candle_core::Tensor;

use super::layers::{Conv2d, ConvTranspose2d, Initializer, NamedVars};
use super::{FeaturePyramid, NetConfig};
use crate::error::{invalid, Result};
use crate::ops::{leaky_relu, sigmoid};

struct ResidualBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = leaky_relu(&self.a.forward(x)?, 0.1)?;
        Ok((x + self.b.forward(&r)?)?)
    }
}

/// Domain-transformation decoder.
///
/// The source image and the level-1 and level-2 features are each projected
/// by one strided convolution to the shape of the level-3 features, all four
/// are concatenated and passed through residual blocks, and three stride-2
/// transposed convolutions bring the result back to full resolution.
pub(crate) struct ImageDecoder {
    project_src: Conv2d,
    project_l1: Conv2d,
    project_l2: Conv2d,
    blocks: Vec<ResidualBlock>,
    up: [ConvTranspose2d; 3],
}

impl ImageDecoder {
    pub fn new(init: &mut Initializer, config: &NetConfig) -> Result<Self> {
        let [c1, c2, c3, ..] = config.encoder_channels;
        // kernel 2s, padding s/2 divides the size by exactly s
        let project_src = Conv2d::new(init, 3, c3, 16, 8, 4)?;
        let project_l1 = Conv2d::new(init, c1, c3, 8, 4, 2)?;
        let project_l2 = Conv2d::new(init, c2, c3, 4, 2, 1)?;
        let width = 4 * c3;
        let blocks = (0..config.residual_blocks)
            .map(|_| {
                Ok(ResidualBlock {
                    a: Conv2d::new(init, width, width, 3, 1, 1)?,
                    b: Conv2d::new(init, width, width, 3, 1, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let [u1, u2] = config.decoder_up_channels;
        let up = [
            ConvTranspose2d::new(init, width, u1, 4, 2, 1)?,
            ConvTranspose2d::new(init, u1, u2, 4, 2, 1)?,
            ConvTranspose2d::new(init, u2, 3, 4, 2, 1)?,
        ];
        Ok(Self {
            project_src,
            project_l1,
            project_l2,
            blocks,
            up,
        })
    }

    pub fn forward(&self, pyr: &FeaturePyramid, src: &Tensor) -> Result<Tensor> {
        let l3 = pyr.level(3);
        let (n, _, h3, w3) = l3.dims4()?;
        let (sn, sc, sh, sw) = src.dims4()?;
        if sn != n || sc != 3 || sh != 8 * h3 || sw != 8 * w3 {
            return Err(invalid(format!(
                "source {:?} does not match pyramid level 3 {:?}",
                src.dims(),
                l3.dims()
            )));
        }
        let a = leaky_relu(&self.project_src.forward(&src.affine(2.0, -1.0)?)?, 0.1)?;
        let b = leaky_relu(&self.project_l1.forward(pyr.level(1))?, 0.1)?;
        let c = leaky_relu(&self.project_l2.forward(pyr.level(2))?, 0.1)?;
        let mut x = Tensor::cat(&[&a, &b, &c, l3], 1)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = leaky_relu(&self.up[0].forward(&x)?, 0.1)?;
        let x = leaky_relu(&self.up[1].forward(&x)?, 0.1)?;
        sigmoid(&self.up[2].forward(&x)?)
    }

    pub fn collect(&self, out: &mut NamedVars) {
        self.project_src.collect("project_src", out);
        self.project_l1.collect("project_l1", out);
        self.project_l2.collect("project_l2", out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.a.collect(&format!("block{i}.a"), out);
            block.b.collect(&format!("block{i}.b"), out);
        }
        for (i, up) in self.up.iter().enumerate() {
            up.collect(&format!("up{i}"), out);
        }
    }
}
