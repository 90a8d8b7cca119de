use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, ConvTranspose2d};

use super::layers::{conv_out, conv_transpose_out, forward, sigmoid, silu, ParamStore};
use super::InputShape;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// On-device autoencoder used only for the reconstruction error l_x.
#[derive(Debug)]
pub struct AutoEncoder {
    store: ParamStore,
    input: InputShape,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: ConvTranspose2d,
    dec2: ConvTranspose2d,
}

impl AutoEncoder {
    pub fn new(input: InputShape, dtype: DType, device: &Device, rng: &mut StreamRng) -> Result<Self> {
        let (h1, w1) = (conv_out(input.height, 3, 2, 1), conv_out(input.width, 3, 2, 1));
        let (h2, w2) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
        let back = (
            conv_transpose_out(conv_transpose_out(h2, 4, 2, 1), 4, 2, 1),
            conv_transpose_out(conv_transpose_out(w2, 4, 2, 1), 4, 2, 1),
        );
        if back != (input.height, input.width) {
            return Err(Error::contract(format!(
                "autoencoder needs height and width divisible by 4, got {}x{}",
                input.height, input.width
            )));
        }
        let mut store = ParamStore::new(dtype, device.clone());
        let c = input.channels;
        let enc1 = store.conv2d("enc1", c, 16, 3, 2, 1, true, rng)?;
        let enc2 = store.conv2d("enc2", 16, 32, 3, 2, 1, true, rng)?;
        let dec1 = store.conv_transpose2d("dec1", 32, 16, 4, 2, 1, rng)?;
        let dec2 = store.conv_transpose2d("dec2", 16, c, 4, 2, 1, rng)?;
        Ok(Self { store, input, enc1, enc2, dec1, dec2 })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    /// x̂ for a (N, C, H, W) batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.input.check(x)?;
        let h = silu(&forward(&self.enc1, x)?)?;
        let h = silu(&forward(&self.enc2, &h)?)?;
        let h = silu(&forward(&self.dec1, &h)?)?;
        sigmoid(&forward(&self.dec2, &h)?)
    }

    /// Per-sample mean squared reconstruction error, shape (N,).
    pub fn per_sample_loss(&self, x: &Tensor) -> Result<Tensor> {
        let x_hat = self.forward(x)?;
        Ok(x.sub(&x_hat)?.sqr()?.flatten_from(1)?.mean(1)?)
    }
}
