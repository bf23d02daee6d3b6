use candle_core::Tensor;

use super::layers::{Conv2d, Initializer, NamedVars};
use super::NetConfig;
use crate::error::Result;
use crate::ops::leaky_relu;

pub(crate) const DISCRIMINATOR_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
pub(crate) const DISCRIMINATOR_KERNEL: usize = 4;

/// Patch discriminator: five 4×4 convolutions with padding 1, leaky-ReLU(0.2)
/// between them and raw scores out.
pub(crate) struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(init: &mut Initializer, config: &NetConfig) -> Result<Self> {
        let widths = config.discriminator_channels;
        let ins = [3, widths[0], widths[1], widths[2], widths[3]];
        let outs = [widths[0], widths[1], widths[2], widths[3], 1];
        let convs = (0..5)
            .map(|i| {
                Conv2d::new(
                    init,
                    ins[i],
                    outs[i],
                    DISCRIMINATOR_KERNEL,
                    DISCRIMINATOR_STRIDES[i],
                    1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let mut x = img.affine(2.0, -1.0)?;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }

    pub fn collect(&self, out: &mut NamedVars) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect(&format!("conv{i}"), out);
        }
    }
}
