//! Seeded parameter storage and the few layers the backbones need.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Named parameters and buffers, initialized from an explicit RNG so that a
/// seed fully determines the starting point.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let map = if trainable { &mut self.params } else { &mut self.buffers };
        if map.insert(name.to_string(), var).is_some() {
            return Err(Error::contract(format!("parameter {name} registered twice")));
        }
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut StreamRng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, false)?;
        Ok(self.buffers[name].clone())
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize, rng: &mut StreamRng) -> Result<Linear> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[output, input], bound, rng)?;
        let b = self.uniform(&format!("{name}.bias"), &[output], bound, rng)?;
        Ok(Linear::new(w, Some(b)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut StreamRng,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[output, input, kernel, kernel], bound, rng)?;
        let b = if bias { Some(self.uniform(&format!("{name}.bias"), &[output], bound, rng)?) } else { None };
        let cfg = Conv2dConfig { padding, stride, dilation: 1, groups: 1, cudnn_fwd_algo: None };
        Ok(Conv2d::new(w, b, cfg))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StreamRng,
    ) -> Result<ConvTranspose2d> {
        let bound = 1.0 / ((output * kernel * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[input, output, kernel, kernel], bound, rng)?;
        let b = self.uniform(&format!("{name}.bias"), &[output], bound, rng)?;
        let cfg = ConvTranspose2dConfig { padding, output_padding: 0, stride, dilation: 1 };
        Ok(ConvTranspose2d::new(w, Some(b), cfg))
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            weight: self.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: self.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: self.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: self.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Trainable variables, in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers, in name order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut all: Vec<(String, Tensor)> = self
            .params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        all.sort_by(|a, b| a.0.cmp(&b.0));
        all
    }

    /// Overwrites every parameter and buffer in place; all names must be present
    /// with matching shapes.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: stored shape {:?} does not match model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys().chain(self.buffers.keys())
    }
}

/// Batch normalization over (N, H, W) with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let m = self.momentum;
            let new_mean = self
                .running_mean
                .as_tensor()
                .affine(1.0 - m, 0.0)?
                .add(&mean.flatten_all()?.detach().affine(m, 0.0)?)?;
            let new_var = self
                .running_var
                .as_tensor()
                .affine(1.0 - m, 0.0)?
                .add(&var.flatten_all()?.detach().affine(m, 0.0)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// log(1 + eˣ) computed as max(x, 0) + log(1 + e^(−|x|)).
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(x.relu()?.add(&tail)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn forward<M: Module>(m: &M, x: &Tensor) -> Result<Tensor> {
    Ok(m.forward(x)?)
}

/// Per-row log-softmax.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(logits, D::Minus1)?)
}

/// Spatial size after a convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// Spatial size after a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size - 1) * stride + kernel - 2 * padding
}
