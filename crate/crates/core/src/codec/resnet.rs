use candle_core::Tensor;
use candle_nn::Conv2d;

use super::layers::{forward, BatchNorm, ParamStore};
use super::{FeatureExtractor, InputShape};
use crate::error::Result;
use crate::rng::StreamRng;

pub(crate) const FEATURES: usize = 512;

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, stride: usize, rng: &mut StreamRng) -> Result<Self> {
        let conv1 = store.conv2d(&format!("{name}.conv1"), input, output, 3, stride, 1, false, rng)?;
        let bn1 = store.batch_norm(&format!("{name}.bn1"), output)?;
        let conv2 = store.conv2d(&format!("{name}.conv2"), output, output, 3, 1, 1, false, rng)?;
        let bn2 = store.batch_norm(&format!("{name}.bn2"), output)?;
        let shortcut = if stride != 1 || input != output {
            let conv = store.conv2d(&format!("{name}.shortcut.conv"), input, output, 1, stride, 0, false, rng)?;
            let bn = store.batch_norm(&format!("{name}.shortcut.bn"), output)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, shortcut })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&forward(&self.conv1, x)?, train)?.relu()?;
        let h = self.bn2.forward(&forward(&self.conv2, &h)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&forward(conv, x)?, train)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu()?)
    }
}

/// ResNet-18 with a 3×3 stem and no initial pooling (the 32×32 variant).
#[derive(Debug)]
pub(crate) struct ResNet18 {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
}

impl ResNet18 {
    pub fn new(store: &mut ParamStore, input: InputShape, rng: &mut StreamRng) -> Result<Self> {
        let stem = store.conv2d("backbone.stem", input.channels, 64, 3, 1, 1, false, rng)?;
        let stem_bn = store.batch_norm("backbone.stem_bn", 64)?;
        let mut blocks = Vec::new();
        let mut width = 64;
        for (stage, (out, stride)) in [(64, 1), (128, 2), (256, 2), (512, 2)].into_iter().enumerate() {
            for i in 0..2 {
                let s = if i == 0 { stride } else { 1 };
                let name = format!("backbone.layer{}.{i}", stage + 1);
                blocks.push(BasicBlock::new(store, &name, width, out, s, rng)?);
                width = out;
            }
        }
        Ok(Self { stem, stem_bn, blocks })
    }
}

impl FeatureExtractor for ResNet18 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem_bn.forward(&forward(&self.stem, x)?, train)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        Ok(h.mean(3)?.mean(2)?)
    }

    fn out_dim(&self) -> usize {
        FEATURES
    }
}
