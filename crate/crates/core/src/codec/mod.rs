//! Encoder, classifier head and auxiliary autoencoder.
//!
//! The encoder maps an image to a diagonal Gaussian: a mean head squashed by a
//! sigmoid and power-mapped into channel symbols, and a softplus variance head.
//! The classifier head (the receiver) maps a received latent ẑ to class logits.

mod autoencoder;
pub mod layers;
mod resnet;
mod smallconv;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

pub use autoencoder::AutoEncoder;
use layers::{forward, sigmoid, silu, softplus, ParamStore};

use crate::channel::{self, ChannelConfig};
use crate::error::{Error, Result};
use crate::gaussian::GaussianDiag;
use crate::rng::{self, StreamRng};

/// Lower bound added to the softplus variance head.
pub const VAR_FLOOR: f64 = 1e-6;
/// Initial bias of the variance head, so training starts with small encoder noise.
const VAR_BIAS_INIT: f64 = -4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneId {
    #[serde(rename = "smallconv")]
    SmallConv,
    #[serde(rename = "resnet18")]
    ResNet18,
}

impl BackboneId {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneId::SmallConv => "smallconv",
            BackboneId::ResNet18 => "resnet18",
        }
    }

    fn decoder_hidden(&self) -> usize {
        match self {
            BackboneId::SmallConv => 64,
            BackboneId::ResNet18 => 256,
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallconv" => Ok(BackboneId::SmallConv),
            "resnet18" => Ok(BackboneId::ResNet18),
            other => Err(Error::Config(format!("unknown backbone {other:?} (expected smallconv or resnet18)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1..] != [self.channels, self.height, self.width] {
            return Err(Error::contract(format!(
                "input shape {dims:?} does not match backbone input (N, {}, {}, {})",
                self.channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Architecture hyperparameters that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub backbone: BackboneId,
    pub input: InputShape,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub peak_power: f64,
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_classes < 2 || self.input.is_empty() {
            return Err(Error::contract(format!("degenerate codec spec {self:?}")));
        }
        if !(self.peak_power > 0.0) {
            return Err(Error::contract("peak power must be positive"));
        }
        Ok(())
    }
}

pub(crate) trait FeatureExtractor: fmt::Debug + Send + Sync {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor>;
    fn out_dim(&self) -> usize;
}

/// Encoder output for one input: the pre-channel posterior and the symbols sent.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub post: GaussianDiag,
    pub symbols: Vec<f64>,
}

/// Batched encoder output; `symbols` is the posterior mean.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub symbols: Tensor,
    pub var: Tensor,
}

impl EncodedBatch {
    pub fn to_outputs(&self) -> Result<Vec<EncoderOutput>> {
        let s: Vec<Vec<f64>> = self.symbols.to_dtype(DType::F64)?.to_vec2()?;
        let v: Vec<Vec<f64>> = self.var.to_dtype(DType::F64)?.to_vec2()?;
        s.into_iter()
            .zip(v)
            .map(|(symbols, var)| Ok(EncoderOutput { post: GaussianDiag::new(symbols.clone(), var)?, symbols }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_logits: Vec<f64>,
    pub class_probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(class_logits: Vec<f64>) -> Self {
        let max = class_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = class_logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let class_probs = exps.into_iter().map(|e| e / total).collect();
        Self { class_logits, class_probs }
    }

    pub fn predicted_class(&self) -> usize {
        crate::ood::argmax(&self.class_logits)
    }
}

/// Standard normal draws for one batch: encoder noise ε₁ and unit channel noise.
#[derive(Debug, Clone)]
pub struct LatentNoise {
    pub encoder: Tensor,
    pub channel: Tensor,
}

impl LatentNoise {
    pub fn draw(
        n: usize,
        m: usize,
        dtype: DType,
        device: &Device,
        encoder_rng: &mut StreamRng,
        channel_rng: &mut StreamRng,
    ) -> Result<Self> {
        let mk = |r: &mut StreamRng| -> Result<Tensor> {
            Ok(Tensor::from_vec(rng::standard_normals(r, n * m), (n, m), device)?.to_dtype(dtype)?)
        };
        Ok(Self { encoder: mk(encoder_rng)?, channel: mk(channel_rng)? })
    }
}

/// ẑ = symbols + √var ⊙ ε₁ + σ ε₂, differentiable in the encoder outputs.
/// With `encoder_noise = false` the ε₁ term is dropped (deterministic encoder).
pub fn sample_latent_tensor(
    enc: &EncodedBatch,
    cfg: &ChannelConfig,
    noise: &LatentNoise,
    encoder_noise: bool,
) -> Result<Tensor> {
    let z = if encoder_noise {
        enc.symbols.add(&enc.var.sqrt()?.mul(&noise.encoder)?)?
    } else {
        enc.symbols.clone()
    };
    channel::transmit_tensor(&z, cfg, &noise.channel)
}

/// Scalar form of [`sample_latent_tensor`] for one encoder output.
pub fn sample_latent(out: &EncoderOutput, cfg: &ChannelConfig, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::seeded(seed);
    sample_latent_with(out, cfg, &mut r)
}

pub fn sample_latent_with(out: &EncoderOutput, cfg: &ChannelConfig, r: &mut StreamRng) -> Result<Vec<f64>> {
    let m = out.symbols.len();
    if out.post.dim() != m {
        return Err(Error::DimensionMismatch { expected: m, actual: out.post.dim() });
    }
    let e1 = rng::standard_normals(r, m);
    let e2 = rng::standard_normals(r, m);
    let std = cfg.noise_std();
    Ok((0..m)
        .map(|i| out.symbols[i] + out.post.var()[i].sqrt() * e1[i] + std * e2[i])
        .collect())
}

/// Mean over all elements of (x − x̂)².
pub fn reconstruction_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), actual: x_hat.len() });
    }
    if x.is_empty() {
        return Err(Error::Empty("reconstruction input"));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Encoder φ, classifier ψ and the auxiliary autoencoder.
#[derive(Debug)]
pub struct Transceiver {
    spec: CodecSpec,
    encoder: ParamStore,
    decoder: ParamStore,
    backbone: Box<dyn FeatureExtractor>,
    mean_head: Linear,
    var_head: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
    autoencoder: AutoEncoder,
}

impl Transceiver {
    /// Fresh parameters drawn from the `init` and `autoencoder` substreams of `seed`.
    pub fn new(spec: CodecSpec, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::substream(seed, rng::INIT);
        let mut encoder = ParamStore::new(dtype, device.clone());
        let backbone: Box<dyn FeatureExtractor> = match spec.backbone {
            BackboneId::SmallConv => Box::new(smallconv::SmallConv::new(&mut encoder, spec.input, &mut r)?),
            BackboneId::ResNet18 => Box::new(resnet::ResNet18::new(&mut encoder, spec.input, &mut r)?),
        };
        let f = backbone.out_dim();
        let m = spec.latent_dim;
        let mean_head = encoder.linear("mean_head", f, m, &mut r)?;
        let bound = 1.0 / (f as f64).sqrt();
        let var_w = encoder.uniform("var_head.weight", &[m, f], bound, &mut r)?;
        let var_b = encoder.constant("var_head.bias", &[m], VAR_BIAS_INIT)?;
        let var_head = Linear::new(var_w, Some(var_b));

        let mut decoder = ParamStore::new(dtype, device.clone());
        let hidden = spec.backbone.decoder_hidden();
        let dec_hidden = decoder.linear("hidden", m, hidden, &mut r)?;
        let dec_out = decoder.linear("out", hidden, spec.num_classes, &mut r)?;

        let mut ae_rng = rng::substream(seed, rng::AUTOENCODER);
        let autoencoder = AutoEncoder::new(spec.input, dtype, device, &mut ae_rng)?;
        Ok(Self { spec, encoder, decoder, backbone, mean_head, var_head, dec_hidden, dec_out, autoencoder })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn device(&self) -> &Device {
        self.encoder.device()
    }

    pub fn encoder_store(&self) -> &ParamStore {
        &self.encoder
    }

    pub fn decoder_store(&self) -> &ParamStore {
        &self.decoder
    }

    pub fn autoencoder(&self) -> &AutoEncoder {
        &self.autoencoder
    }

    /// Encoder and classifier variables (the autoencoder trains separately).
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v
    }

    /// Every tensor, prefixed with `encoder.`, `decoder.` or `autoencoder.`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, store) in self.stores() {
            for (name, t) in store.named_tensors() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn load_named(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, store) in self.stores() {
            let strip = format!("{prefix}.");
            let part: BTreeMap<String, Tensor> = values
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&strip).map(|s| (s.to_string(), t.clone())))
                .collect();
            store.load(&part)?;
        }
        Ok(())
    }

    fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [("encoder", &self.encoder), ("decoder", &self.decoder), ("autoencoder", self.autoencoder.store())]
    }

    /// Stacks flat images into a (N, C, H, W) tensor of the model dtype.
    pub fn input_tensor(&self, images: &[f32], n: usize) -> Result<Tensor> {
        let s = self.spec.input;
        if images.len() != n * s.len() {
            return Err(Error::DimensionMismatch { expected: n * s.len(), actual: images.len() });
        }
        Ok(Tensor::from_slice(images, (n, s.channels, s.height, s.width), self.device())?.to_dtype(self.dtype())?)
    }

    pub fn encode_batch(&self, x: &Tensor, train: bool) -> Result<EncodedBatch> {
        self.spec.input.check(x)?;
        let f = self.backbone.features(x, train)?;
        let act = sigmoid(&forward(&self.mean_head, &f)?)?;
        let symbols = channel::power_map_tensor(&act, self.spec.peak_power)?;
        let var = softplus(&forward(&self.var_head, &f)?)?.affine(1.0, VAR_FLOOR)?;
        Ok(EncodedBatch { symbols, var })
    }

    /// Class logits for a (N, m) batch of received latents.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let dims = z.dims();
        if dims.len() != 2 || dims[1] != self.spec.latent_dim {
            return Err(Error::contract(format!(
                "latent batch shape {dims:?} does not match (N, {})",
                self.spec.latent_dim
            )));
        }
        let h = silu(&forward(&self.dec_hidden, &z.to_dtype(self.dtype())?)?)?;
        forward(&self.dec_out, &h)
    }

    /// Inference-mode encoding of `n` flat images.
    pub fn encode(&self, images: &[f32], n: usize) -> Result<Vec<EncoderOutput>> {
        let x = self.input_tensor(images, n)?;
        self.encode_batch(&x, false)?.to_outputs()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Prediction> {
        if z.len() != self.spec.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.spec.latent_dim, actual: z.len() });
        }
        let t = Tensor::from_slice(z, (1, z.len()), self.device())?;
        let logits: Vec<f64> = self.decode_batch(&t)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Ok(Prediction::from_logits(logits))
    }

    /// Reconstructions and l_x for `n` flat images.
    pub fn reconstruct(&self, images: &[f32], n: usize) -> Result<Vec<(Vec<f64>, f64)>> {
        let x = self.input_tensor(images, n)?;
        let x_hat: Vec<Vec<f64>> = self.autoencoder.forward(&x)?.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2()?;
        let len = self.spec.input.len();
        x_hat
            .into_iter()
            .enumerate()
            .map(|(i, xh)| {
                let xi: Vec<f64> = images[i * len..(i + 1) * len].iter().map(|&v| v as f64).collect();
                let l = reconstruction_loss(&xi, &xh)?;
                Ok((xh, l))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn spec() -> CodecSpec {
        CodecSpec {
            backbone: BackboneId::SmallConv,
            input: InputShape::new(1, 28, 28),
            latent_dim: 8,
            num_classes: 10,
            peak_power: 1.0,
        }
    }

    fn images(n: usize, seed: u64) -> Vec<f32> {
        let mut r = rng::seeded(seed);
        (0..n * 784).map(|_| r.random::<f32>()).collect()
    }

    #[test]
    fn encode_is_deterministic_and_positive() {
        let t = Transceiver::new(spec(), DType::F64, &Device::Cpu, 3).unwrap();
        let x = images(5, 1);
        let a = t.encode(&x, 5).unwrap();
        let b = t.encode(&x, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for o in &a {
            assert!(o.post.var().iter().all(|&v| v > 0.0));
            assert!(o.symbols.iter().all(|s| s.abs() < 1.0));
        }
        let one = t.encode(&x[784..1568], 1).unwrap();
        for (p, q) in one[0].symbols.iter().zip(&a[1].symbols) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let t = Transceiver::new(spec(), DType::F32, &Device::Cpu, 0).unwrap();
        assert!(t.encode(&[0.0; 700], 1).is_err());
        let bad = Tensor::zeros((2, 3, 28, 28), DType::F32, &Device::Cpu).unwrap();
        assert!(t.encode_batch(&bad, false).is_err());
        assert!(t.decode(&[0.0; 7]).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Transceiver::new(spec(), DType::F32, &Device::Cpu, 11).unwrap();
        let b = Transceiver::new(spec(), DType::F32, &Device::Cpu, 11).unwrap();
        let x = images(2, 9);
        assert_eq!(a.encode(&x, 2).unwrap(), b.encode(&x, 2).unwrap());
    }

    #[test]
    fn noiseless_sample_is_symbols() {
        let out = EncoderOutput {
            post: GaussianDiag::new(vec![0.3, -0.2], vec![1e-300, 1e-300]).unwrap(),
            symbols: vec![0.3, -0.2],
        };
        let cfg = ChannelConfig::noiseless(1.0).unwrap();
        assert_eq!(sample_latent(&out, &cfg, 5).unwrap(), out.symbols);
    }

    #[test]
    fn sample_latent_moments() {
        let out = EncoderOutput {
            post: GaussianDiag::new(vec![0.4, -0.6], vec![0.05, 0.2]).unwrap(),
            symbols: vec![0.4, -0.6],
        };
        let cfg = ChannelConfig::new(10.0, 1.0, 9600.0).unwrap();
        let n = 100_000;
        let mut r = rng::seeded(77);
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_latent_with(&out, &cfg, &mut r).unwrap()).collect();
        for d in 0..2 {
            let mean = draws.iter().map(|z| z[d]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target = out.post.var()[d] + cfg.noise_var();
            assert!((var / target - 1.0).abs() < 0.03, "dim {d}: {var} vs {target}");
            let se = (target / n as f64).sqrt();
            assert!((mean - out.symbols[d]).abs() < 3.0 * se);
        }
        assert_eq!(sample_latent(&out, &cfg, 4).unwrap(), sample_latent(&out, &cfg, 4).unwrap());
    }

    #[test]
    fn tensor_and_scalar_sampling_agree() {
        let t = Transceiver::new(spec(), DType::F64, &Device::Cpu, 1).unwrap();
        let x = t.input_tensor(&images(3, 2), 3).unwrap();
        let enc = t.encode_batch(&x, false).unwrap();
        let cfg = ChannelConfig::new(5.0, 1.0, 9600.0).unwrap();
        let zeros = Tensor::zeros((3, 8), DType::F64, &Device::Cpu).unwrap();
        let noise = LatentNoise { encoder: zeros.clone(), channel: zeros };
        let z: Vec<Vec<f64>> = sample_latent_tensor(&enc, &cfg, &noise, true).unwrap().to_vec2().unwrap();
        let outs = enc.to_outputs().unwrap();
        for (zi, o) in z.iter().zip(&outs) {
            assert_eq!(zi, &o.symbols);
        }
    }

    #[test]
    fn reconstruction_examples() {
        assert_eq!(reconstruction_loss(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[1.0; 9], &[0.0; 9]).unwrap(), 1.0);
        assert!(reconstruction_loss(&[1.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn reconstruct_matches_elementwise_oracle() {
        let t = Transceiver::new(spec(), DType::F64, &Device::Cpu, 2).unwrap();
        let x = images(2, 3);
        let rec = t.reconstruct(&x, 2).unwrap();
        for (i, (xh, l)) in rec.iter().enumerate() {
            let mut diff = Vec::with_capacity(784);
            for j in 0..784 {
                diff.push(x[i * 784 + j] as f64 - xh[j]);
            }
            let mut total = 0.0;
            for d in &diff {
                total += d * d;
            }
            assert!((total / 784.0 - l).abs() < 1e-9);
            assert!(*l >= 0.0);
        }
    }

    #[test]
    fn decode_is_pure() {
        let t = Transceiver::new(spec(), DType::F64, &Device::Cpu, 5).unwrap();
        let z = vec![0.1; 8];
        assert_eq!(t.decode(&z).unwrap(), t.decode(&z).unwrap());
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let a = Transceiver::new(spec(), DType::F32, &Device::Cpu, 1).unwrap();
        let b = Transceiver::new(spec(), DType::F32, &Device::Cpu, 2).unwrap();
        let map: BTreeMap<String, Tensor> = a.named_tensors().into_iter().collect();
        b.load_named(&map).unwrap();
        let x = images(2, 4);
        assert_eq!(a.encode(&x, 2).unwrap(), b.encode(&x, 2).unwrap());
        assert_eq!(a.decode(&[0.2; 8]).unwrap(), b.decode(&[0.2; 8]).unwrap());
    }

    #[test]
    fn resnet_forward_shapes() {
        let s = CodecSpec {
            backbone: BackboneId::ResNet18,
            input: InputShape::new(3, 8, 8),
            latent_dim: 4,
            num_classes: 3,
            peak_power: 1.0,
        };
        let t = Transceiver::new(s, DType::F32, &Device::Cpu, 0).unwrap();
        let x = Tensor::ones((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let enc = t.encode_batch(&x, true).unwrap();
        assert_eq!(enc.symbols.dims(), &[2, 4]);
        assert_eq!(t.decode_batch(&enc.symbols).unwrap().dims(), &[2, 3]);
        assert!(t.encoder_store().num_params() > 11_000_000);
    }

    proptest! {
        #[test]
        fn prediction_is_softmax(logits in proptest::collection::vec(-30.0..30.0f64, 2..12), shift in -50.0..50.0f64) {
            let p = Prediction::from_logits(logits.clone());
            prop_assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let q = Prediction::from_logits(logits.iter().map(|l| l + shift).collect());
            for (a, b) in p.class_probs.iter().zip(&q.class_probs) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert_eq!(crate::ood::argmax(&p.class_probs), crate::ood::argmax(&logits));
        }
    }
}
