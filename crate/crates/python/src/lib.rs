//! Python bindings: channel model, Gaussian KL, detector metrics, and the
//! train/eval/detect entry points over checkpoints.

use std::path::PathBuf;

use candle_core::Device;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ccib::harness::checkpoint::Checkpoint;
use ccib::harness::config::ExperimentConfig;
use ccib::harness::{eval, train};
use ccib::ood::DetectionConfig;

fn err(e: ccib::Error) -> PyErr {
    match e {
        ccib::Error::Config(_) | ccib::Error::Contract(_) | ccib::Error::DimensionMismatch { .. } => {
            PyValueError::new_err(format!("{}: {e}", e.kind()))
        }
        _ => PyRuntimeError::new_err(format!("{}: {e}", e.kind())),
    }
}

/// AWGN channel parameterized by PSNR.
#[pyclass(name = "ChannelConfig", frozen)]
#[derive(Clone)]
struct PyChannel(ccib::ChannelConfig);

#[pymethods]
impl PyChannel {
    #[new]
    #[pyo3(signature = (psnr_db, peak_power = 1.0, symbol_rate = 9600.0))]
    fn new(psnr_db: f64, peak_power: f64, symbol_rate: f64) -> PyResult<Self> {
        Ok(Self(ccib::ChannelConfig::new(psnr_db, peak_power, symbol_rate).map_err(err)?))
    }

    #[getter]
    fn psnr_db(&self) -> f64 {
        self.0.psnr_db()
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.0.noise_var()
    }

    /// Seconds to send `dim` symbols.
    fn latency(&self, dim: usize) -> PyResult<f64> {
        ccib::channel::latency(dim, &self.0).map_err(err)
    }

    fn transmit(&self, symbols: Vec<f64>, seed: u64) -> Vec<f64> {
        ccib::channel::transmit(&symbols, &self.0, seed)
    }

    fn __repr__(&self) -> String {
        format!("ChannelConfig(psnr_db={}, noise_var={})", self.0.psnr_db(), self.0.noise_var())
    }
}

/// Per-class Gaussian priors.
#[pyclass(name = "PriorBank", frozen)]
struct PyPriorBank(ccib::PriorBank);

#[pymethods]
impl PyPriorBank {
    #[staticmethod]
    fn standard_normal(num_classes: usize, dim: usize) -> Self {
        Self(ccib::PriorBank::standard_normal(num_classes, dim))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn epoch_tag(&self) -> u32 {
        self.0.epoch_tag()
    }

    /// Log-likelihood of `z` under every class prior.
    fn scores(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        ccib::ood::score(&z, &self.0).map_err(err)
    }

    fn mean(&self, class: usize) -> PyResult<Vec<f64>> {
        Ok(self.0.get(class).map_err(err)?.mean().iter().copied().collect())
    }
}

/// A trained model restored from a checkpoint file.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    ckpt: Checkpoint,
    model: ccib::codec::Transceiver,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        let model = ckpt.restore(&Device::Cpu).map_err(err)?;
        Ok(Self { ckpt, model })
    }

    #[getter]
    fn objective(&self) -> String {
        self.ckpt.meta.objective.to_string()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.ckpt.meta.latent_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.ckpt.meta.num_classes
    }

    /// (channels, height, width)
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.ckpt.meta.input;
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn lambda_threshold(&self) -> Option<f64> {
        self.ckpt.meta.lambda_threshold
    }

    #[getter]
    fn prior_bank(&self) -> PyPriorBank {
        PyPriorBank(self.ckpt.bank.clone())
    }

    /// Encoder means and variances for `n` images flattened row-major in [0, 1].
    fn encode(&self, pixels: Vec<f32>, n: usize) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
        let out = self.model.encode(&pixels, n).map_err(err)?;
        Ok(out.into_iter().map(|o| (o.post.mean().to_vec(), o.post.var().to_vec())).collect())
    }

    /// Class probabilities for one received latent.
    fn classify(&self, latent: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.model.decode(&latent).map_err(err)?.class_probs)
    }

    /// ID/OoD verdict for one image, through the checkpoint's training channel
    /// unless `psnr_db` is given.
    #[pyo3(signature = (pixels, psnr_db = None))]
    fn detect<'py>(&self, py: Python<'py>, pixels: Vec<f32>, psnr_db: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
        let channel = match psnr_db {
            Some(db) => self.ckpt.meta.channel.with_psnr(db).map_err(err)?,
            None => self.ckpt.meta.channel.clone(),
        };
        let d = eval::detect_one(&self.ckpt, &self.model, &pixels, &channel, &DetectionConfig::default())
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("is_ood", d.is_ood)?;
        out.set_item("predicted_class", d.predicted_class)?;
        out.set_item("score", d.score)?;
        out.set_item("lambda", d.lambda)?;
        out.set_item("recon_loss", d.recon_loss)?;
        Ok(out)
    }
}

/// KL(N(mean, diag(var)) || N(prior_mean, prior_cov)).
#[pyfunction]
fn kl_diag_to_full(mean: Vec<f64>, var: Vec<f64>, prior_mean: Vec<f64>, prior_cov: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = prior_mean.len();
    if prior_cov.len() != m || prior_cov.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("prior_cov must be m x m"));
    }
    let cov = nalgebra::DMatrix::from_row_iterator(m, m, prior_cov.into_iter().flatten());
    let post = ccib::GaussianDiag::new(mean, var).map_err(err)?;
    let prior = ccib::GaussianFull::new(prior_mean, cov).map_err(err)?;
    ccib::gaussian::kl_diag_to_full(&post, &prior).map_err(err)
}

#[pyfunction]
fn psnr_to_noise_var(psnr_db: f64, peak_power: f64) -> PyResult<f64> {
    ccib::channel::psnr_to_noise_var(psnr_db, peak_power).map_err(err)
}

/// Probability that a random ID score exceeds a random OoD score (ties count ½).
#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    ccib::ood::auroc(&id_scores, &ood_scores).map_err(err)
}

/// (false_positive_rate, true_positive_rate, threshold) triples.
#[pyfunction]
fn roc_curve(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<Vec<(f64, f64, f64)>> {
    let pts = ccib::ood::roc_curve(&id_scores, &ood_scores).map_err(err)?;
    Ok(pts.into_iter().map(|p| (p.false_positive_rate, p.true_positive_rate, p.threshold)).collect())
}

/// Trains from a config file; returns the checkpoint path and final metrics.
#[pyfunction]
fn train_config<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_path(&config).map_err(err)?;
    let run = py.detach(|| train::train_run(&cfg)).map_err(err)?;
    let m = run.final_metrics();
    let out = PyDict::new(py);
    out.set_item("checkpoint", run.checkpoint.clone())?;
    out.set_item("epoch", m.epoch)?;
    out.set_item("loss", m.loss)?;
    out.set_item("train_accuracy", m.train_accuracy)?;
    out.set_item("lambda", run.lambda_threshold)?;
    Ok(out)
}

/// Evaluates a checkpoint; one dict per OoD dataset.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, config: PathBuf, checkpoint: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::from_path(&config).map_err(err)?;
    let m = py.detach(|| eval::eval_run(&cfg, &checkpoint)).map_err(err)?;
    m.ood
        .iter()
        .map(|o| {
            let d = PyDict::new(py);
            d.set_item("objective", m.objective.to_string())?;
            d.set_item("ood_dataset", &o.dataset)?;
            d.set_item("accuracy", m.accuracy)?;
            d.set_item("auroc", o.auroc)?;
            d.set_item("latency_s", m.latency_s)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn pyccib(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChannel>()?;
    m.add_class::<PyPriorBank>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(kl_diag_to_full, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_to_noise_var, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(train_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
