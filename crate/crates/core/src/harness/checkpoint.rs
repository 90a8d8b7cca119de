//! Single-file checkpoint container.
//!
//! Layout (little-endian):
//! ```text
//! "CCIBCKPT" | u32 version | u32 header_len | header JSON
//! | u64 bank_len | prior bank block | tensor payload (f64, in header order)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::Precision;
use crate::channel::ChannelConfig;
use crate::codec::{BackboneId, CodecSpec, InputShape, Transceiver};
use crate::error::{Error, Result};
use crate::gaussian::PriorBank;
use crate::objectives::Objective;

const MAGIC: &[u8; 8] = b"CCIBCKPT";
const VERSION: u32 = 1;

/// Everything needed to rebuild the model, apart from the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneId,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub input: InputShape,
    pub peak_power: f64,
    /// Training channel; the default for single-sample detection.
    pub channel: ChannelConfig,
    pub precision: Precision,
    pub objective: Objective,
    pub config_hash: String,
    pub seed: u64,
    pub epochs_completed: usize,
    /// λ chosen at the end of training, if calibrated.
    pub lambda_threshold: Option<f64>,
}

impl CheckpointMeta {
    pub fn spec(&self) -> CodecSpec {
        CodecSpec {
            backbone: self.backbone,
            input: self.input,
            latent_dim: self.latent_dim,
            num_classes: self.num_classes,
            peak_power: self.peak_power,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub bank: PriorBank,
    tensors: Vec<(TensorEntry, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(model: &Transceiver, bank: &PriorBank, meta: CheckpointMeta) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, t) in model.named_tensors() {
            let shape = t.dims().to_vec();
            let values: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            tensors.push((TensorEntry { name, shape }, values));
        }
        let ckpt = Self { meta, bank: bank.clone(), tensors };
        ckpt.check_consistency()?;
        Ok(ckpt)
    }

    fn check_consistency(&self) -> Result<()> {
        if self.bank.dim() != self.meta.latent_dim {
            return Err(Error::Checkpoint(format!(
                "prior bank dimension {} does not match latent_dim {}",
                self.bank.dim(),
                self.meta.latent_dim
            )));
        }
        if self.bank.num_classes() != self.meta.num_classes {
            return Err(Error::Checkpoint(format!(
                "prior bank has {} classes, model has {}",
                self.bank.num_classes(),
                self.meta.num_classes
            )));
        }
        Ok(())
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            let header = Header {
                meta: self.meta.clone(),
                tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
            };
            let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
            w.write_u32::<LittleEndian>(json.len() as u32)?;
            w.write_all(&json)?;
            let mut bank = Vec::new();
            self.bank.write_to(&mut bank)?;
            w.write_u64::<LittleEndian>(bank.len() as u64)?;
            w.write_all(&bank)?;
            for (_, values) in &self.tensors {
                for v in values {
                    w.write_f64::<LittleEndian>(*v)?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(|e| bad(e.to_string()))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let bank_len = r.read_u64::<LittleEndian>()? as usize;
        let mut bank_bytes = vec![0u8; bank_len];
        r.read_exact(&mut bank_bytes)?;
        let bank = PriorBank::read_from(&mut bank_bytes.as_slice())?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut values = vec![0f64; n];
            r.read_f64_into::<LittleEndian>(&mut values)
                .map_err(|e| bad(format!("tensor {}: {e}", entry.name)))?;
            tensors.push((entry, values));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let ckpt = Self { meta: header.meta, bank, tensors };
        ckpt.check_consistency()?;
        Ok(ckpt)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn restore(&self, device: &Device) -> Result<Transceiver> {
        let model = Transceiver::new(self.meta.spec(), self.meta.precision.dtype(), device, self.meta.seed)?;
        let mut map = std::collections::BTreeMap::new();
        for (e, values) in &self.tensors {
            map.insert(e.name.clone(), Tensor::from_slice(values, e.shape.as_slice(), device)?);
        }
        model.load_named(&map)?;
        Ok(model)
    }
}
