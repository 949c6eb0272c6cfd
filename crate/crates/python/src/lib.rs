//! Python bindings: schedules, disks data, model bundles, sampling, encoding
//! and the closed-form oracle check.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sami::cli::{self, Dtype};
use sami::data::{self, DiskConfig};
use sami::diffusion::{sample_unconditional, NoiseSchedule, ScheduleKind, ScheduleParams};
use sami::guidance::{
    self, sample_conditional, CoefficientRule, Condition, GuidanceMask, ModelBundle, SampleSettings, TrainConfig,
};
use sami::networks::{Denoiser, DenoiserConfig, Encoder, EncoderConfig, GaussianPosterior};
use sami::numerics::{RngStream, Tensor};
use sami::SamiError;

fn err(e: SamiError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(&shape, data).map_err(err)
}

/// Noise schedule with `levels` steps, indexed `0..levels`.
#[pyclass(name = "Schedule", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (kind = "linear", levels = 400))]
    fn new(kind: &str, levels: usize) -> PyResult<Self> {
        let kind = ScheduleKind::parse(kind).map_err(err)?;
        let inner = NoiseSchedule::build(kind, levels, ScheduleParams::default()).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn alpha_bar(&self) -> Vec<f64> {
        self.inner.alpha_bar.clone()
    }

    fn gamma(&self, t: usize) -> PyResult<f64> {
        self.inner.check_level(t).map_err(err)?;
        Ok(self.inner.gamma(t))
    }
}

/// Renders `n` disks images; returns `(pixels, shape, factors)` with pixels in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (n, seed = 0, size = 32, radius = 8.0))]
fn generate_disks(n: usize, seed: u64, size: usize, radius: f64) -> PyResult<(Vec<f64>, Vec<usize>, Vec<(f64, f64, f64)>)> {
    let cfg = DiskConfig {
        width: size,
        height: size,
        radius,
        ..DiskConfig::default()
    };
    let ds = data::generate_dataset(n, &RngStream::new(seed), &cfg).map_err(err)?;
    let factors = ds.factors.iter().map(|f| (f.c_x, f.c_y, f.i_bg)).collect();
    Ok((ds.images.to_vec(), ds.images.shape().to_vec(), factors))
}

/// Closed-form KL of `N(mean, diag(var))` from the standard normal.
#[pyfunction]
fn kl_to_standard_normal(mean: Vec<f64>, var: Vec<f64>) -> PyResult<f64> {
    let post = GaussianPosterior::new(Tensor::vector(&mean), Tensor::vector(&var)).map_err(err)?;
    Ok(guidance::kl_to_standard_normal(&post))
}

/// Linear-Gaussian oracle check as a dict of relative errors.
#[pyfunction]
#[pyo3(signature = (levels = 400, chains = 10_000, seed = 0))]
fn oracle_check(py: Python<'_>, levels: usize, chains: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let r = cli::oracle_report(levels, chains, &RngStream::new(seed)).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("miyasawa_error", r.miyasawa_error)?;
    d.set_item("bayes_error", r.bayes_error)?;
    d.set_item("mean_rel_error", r.mean_rel_error)?;
    d.set_item("cov_rel_error", r.cov_rel_error)?;
    Ok(d.into_any().unbind())
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::run(std::iter::once("sami".to_string()).chain(args))
}

/// Denoiser, encoder and schedule.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelBundle,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        seed = 0,
        image_size = 32,
        levels = 400,
        denoiser_base = 8,
        denoiser_mult = vec![1, 2, 2, 4, 4, 4],
        encoder_base = 16,
        encoder_mult = vec![2, 2],
        latent_dim = 3,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        image_size: usize,
        levels: usize,
        denoiser_base: usize,
        denoiser_mult: Vec<usize>,
        encoder_base: usize,
        encoder_mult: Vec<usize>,
        latent_dim: usize,
    ) -> PyResult<Self> {
        let mut rng = RngStream::new(seed);
        let dc = DenoiserConfig {
            image_size,
            base_channels: denoiser_base,
            channel_mult: denoiser_mult,
            num_levels: levels,
            ..DenoiserConfig::default()
        };
        let ec = EncoderConfig {
            image_size,
            base_channels: encoder_base,
            channel_mult: encoder_mult,
            latent_dim,
            ..EncoderConfig::default()
        };
        let inner = ModelBundle {
            denoiser: Denoiser::init(dc, &mut rng).map_err(err)?,
            encoder: Encoder::init(ec, &mut rng).map_err(err)?,
            schedule: NoiseSchedule::linear(levels).map_err(err)?,
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cli::load_checkpoint(&path).map_err(err)?,
        })
    }

    #[pyo3(signature = (path, dtype = "f64"))]
    fn save(&self, path: PathBuf, dtype: &str) -> PyResult<()> {
        let dtype = match dtype {
            "f32" => Dtype::F32,
            "f64" => Dtype::F64,
            other => return Err(PyValueError::new_err(format!("unknown dtype {other}"))),
        };
        cli::save_checkpoint(&self.inner, &path, dtype).map_err(err)
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.denoiser.config.image_size
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.encoder.config.latent_dim
    }

    /// Trains on model-space images `[N, 1, S, S]`; returns the per-step losses.
    #[pyo3(signature = (images, shape, epochs = 1, batch_size = 32, learning_rate = 2e-3, seed = 0))]
    fn train(
        &mut self,
        images: Vec<f64>,
        shape: Vec<usize>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let x = tensor(shape, images)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            anneal: guidance::KlAnneal::Exponential {
                epochs,
                start_factor: 1e-6,
            },
            ..TrainConfig::default()
        };
        let out = guidance::train(&cfg, self.inner.clone(), &x, &RngStream::new(seed)).map_err(err)?;
        self.inner = out.bundle;
        Ok(out.log.records.iter().filter_map(|r| r.loss).collect())
    }

    /// Posterior means and variances, each flattened `[N, d]`.
    fn encode(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (m, v) = self.inner.encoder.encode_batch(&tensor(shape, images)?).map_err(err)?;
        Ok((m.to_vec(), v.to_vec()))
    }

    /// Unconditional ancestral samples in model space, flattened `[n, 1, S, S]`.
    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        let s = self.image_size();
        let mut rng = RngStream::new(seed);
        let x = sample_unconditional(&self.inner.denoiser, &self.inner.schedule, &mut rng, n, &[1, s, s]).map_err(err)?;
        Ok(x.to_vec())
    }

    /// Guided samples conditioned on one model-space image `[1, S, S]` (or a
    /// latent of length `d` when `latent=True`).
    #[pyo3(signature = (condition, n, seed = 0, mask = None, rule = "derived", latent = false))]
    fn sample_conditional(
        &self,
        condition: Vec<f64>,
        n: usize,
        seed: u64,
        mask: Option<Vec<bool>>,
        rule: &str,
        latent: bool,
    ) -> PyResult<Vec<f64>> {
        let d = self.latent_dim();
        let s = self.image_size();
        let cond = if latent {
            Condition::Latent(tensor(vec![d], condition)?)
        } else {
            Condition::Image(tensor(vec![1, s, s], condition)?)
        };
        let mask = match mask {
            Some(m) => GuidanceMask::new(m).map_err(err)?,
            None => GuidanceMask::full(d),
        };
        let settings = SampleSettings {
            rule: CoefficientRule::parse(rule).map_err(err)?,
            ..SampleSettings::default()
        };
        let mut rng = RngStream::new(seed);
        let out = sample_conditional(&self.inner, &cond, &mask, &mut rng, n, settings).map_err(err)?;
        Ok(out.images.to_vec())
    }
}

#[pymodule]
fn sami_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_disks, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_standard_normal, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
