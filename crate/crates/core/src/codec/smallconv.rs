use candle_core::Tensor;
use candle_nn::{Conv2d, Linear};

use super::layers::{conv_out, forward, silu, ParamStore};
use super::{FeatureExtractor, InputShape};
use crate::error::Result;
use crate::rng::StreamRng;

const WIDTH_1: usize = 8;
const WIDTH_2: usize = 16;
pub(crate) const FEATURES: usize = 64;

/// Two strided 3×3 conv blocks and one dense layer.
#[derive(Debug)]
pub(crate) struct SmallConv {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl SmallConv {
    pub fn new(store: &mut ParamStore, input: InputShape, rng: &mut StreamRng) -> Result<Self> {
        let conv1 = store.conv2d("backbone.conv1", input.channels, WIDTH_1, 3, 2, 1, true, rng)?;
        let conv2 = store.conv2d("backbone.conv2", WIDTH_1, WIDTH_2, 3, 2, 1, true, rng)?;
        let h = conv_out(conv_out(input.height, 3, 2, 1), 3, 2, 1);
        let w = conv_out(conv_out(input.width, 3, 2, 1), 3, 2, 1);
        let fc = store.linear("backbone.fc", WIDTH_2 * h * w, FEATURES, rng)?;
        Ok(Self { conv1, conv2, fc })
    }
}

impl FeatureExtractor for SmallConv {
    fn features(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let h = silu(&forward(&self.conv1, x)?)?;
        let h = silu(&forward(&self.conv2, &h)?)?;
        silu(&forward(&self.fc, &h.flatten_from(1)?)?)
    }

    fn out_dim(&self) -> usize {
        FEATURES
    }
}
