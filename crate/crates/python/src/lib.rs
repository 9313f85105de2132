//! Python bindings.
//!
//! Images cross the boundary as flat `list[float]` in channel-major order plus
//! a `(channels, height, width)` shape tuple, so no array library is needed on
//! the Python side.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use uegan_core::data;
use uegan_core::trainer::{self, checkpoint, TrainConfig, TrainSection};
use uegan_core::{losses, DiscriminatorConfig, Error, GeneratorConfig, Variant};

type Shape = (usize, usize, usize);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::MissingWeights(_) => PyIOError::new_err(e.to_string()),
        Error::Tensor(_) | Error::Diverged { .. } | Error::Integrity(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn image(values: Vec<f32>, shape: Shape) -> Result<Tensor, Error> {
    let (c, h, w) = shape;
    if values.len() != c * h * w {
        return Err(Error::Shape(format!(
            "{} values do not fill a {c}x{h}x{w} image",
            values.len()
        )));
    }
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
}

fn flat(t: &Tensor) -> Result<Vec<f32>, Error> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?)
}

fn scores(values: Vec<f64>) -> Result<Tensor, Error> {
    Ok(Tensor::new(values.as_slice(), &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64, Error> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// The enhancement generator.
#[pyclass(name = "Generator")]
pub struct PyGenerator {
    inner: uegan_core::Generator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (variant = "full", base_channels = 32, seed = 0))]
    fn new(variant: &str, base_channels: usize, seed: u64) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(to_py)?;
        let cfg = GeneratorConfig::with_variant(variant, base_channels);
        let inner = uegan_core::Generator::new(&cfg, seed, &Device::Cpu).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Load the generator stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = checkpoint::load_generator(&path, &Device::Cpu).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config().variant.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().names()
    }

    /// Enhance one image in [0,1]; any size is accepted.
    fn enhance(&self, values: Vec<f32>, shape: Shape) -> PyResult<Vec<f32>> {
        let x = image(values, shape).map_err(to_py)?;
        let y = self.inner.enhance_any_size(&x).map_err(to_py)?;
        flat(&y).map_err(to_py)
    }
}

/// The multi-scale discriminator.
#[pyclass(name = "Discriminator")]
pub struct PyDiscriminator {
    inner: uegan_core::Discriminator,
}

#[pymethods]
impl PyDiscriminator {
    #[new]
    #[pyo3(signature = (base_channels = 64, num_scales = 3, seed = 0))]
    fn new(base_channels: usize, num_scales: usize, seed: u64) -> PyResult<Self> {
        let cfg = DiscriminatorConfig {
            base_channels,
            num_scales,
            ..DiscriminatorConfig::default()
        };
        let inner = uegan_core::Discriminator::new(&cfg, seed, &Device::Cpu).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Mean realism score at each scale, shallow first.
    fn scores(&self, values: Vec<f32>, shape: Shape) -> PyResult<Vec<f64>> {
        let x = image(values, shape).map_err(to_py)?;
        let out = self.inner.discriminate(&x).map_err(to_py)?;
        out.mean_scores().map_err(to_py)
    }
}

#[pyfunction]
fn d_loss(low: Vec<f64>, high: Vec<f64>, generated: Vec<f64>) -> PyResult<f64> {
    let run = || scalar(&losses::d_loss(&scores(low)?, &scores(high)?, &scores(generated)?)?);
    run().map_err(to_py)
}

#[pyfunction]
fn g_quality_loss(high: Vec<f64>, generated: Vec<f64>) -> PyResult<f64> {
    let run = || scalar(&losses::g_quality_loss(&scores(high)?, &scores(generated)?)?);
    run().map_err(to_py)
}

#[pyfunction]
fn identity_loss(high: Vec<f32>, enhanced: Vec<f32>, shape: Shape) -> PyResult<f64> {
    let run = || scalar(&losses::identity_loss(&image(high, shape)?, &image(enhanced, shape)?)?);
    run().map_err(to_py)
}

#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>, shape: Shape) -> PyResult<f64> {
    let run = || uegan_core::psnr(&image(a, shape)?, &image(b, shape)?);
    run().map_err(to_py)
}

#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, shape: Shape) -> PyResult<f64> {
    let run = || uegan_core::ssim(&image(a, shape)?, &image(b, shape)?);
    run().map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (epoch, epochs = 150, decay_start = 75, lr = 1e-4))]
fn lr_at(epoch: u64, epochs: u64, decay_start: u64, lr: f64) -> PyResult<f64> {
    let cfg = TrainSection {
        epochs,
        decay_start,
        lr,
        ..TrainSection::default()
    };
    trainer::lr_at(epoch, &cfg).map_err(to_py)
}

/// Split ids into `low_train`, `high_train`, `val` and `test` lists.
#[pyfunction]
#[pyo3(signature = (raw_ids, retouched_ids, seed = 0))]
fn build_splits(raw_ids: Vec<String>, retouched_ids: Vec<String>, seed: u64) -> PyResult<HashMap<String, Vec<String>>> {
    let m = data::build_splits(&raw_ids, &retouched_ids, seed).map_err(to_py)?;
    Ok(HashMap::from([
        ("low_train".to_string(), m.low_train),
        ("high_train".to_string(), m.high_train),
        ("val".to_string(), m.val),
        ("test".to_string(), m.test),
    ]))
}

/// Train from a TOML config file with optional `key=value` overrides; returns
/// the last checkpoint path.
#[pyfunction]
#[pyo3(signature = (config_path, overrides = None))]
fn train(config_path: PathBuf, overrides: Option<HashMap<String, String>>) -> PyResult<String> {
    let overrides: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
    let cfg = TrainConfig::load(&config_path, &overrides).map_err(to_py)?;
    let summary = trainer::train(&cfg, &Device::Cpu).map_err(to_py)?;
    Ok(summary.last_checkpoint.display().to_string())
}

#[pymodule]
fn uegan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyDiscriminator>()?;
    m.add_function(wrap_pyfunction!(d_loss, m)?)?;
    m.add_function(wrap_pyfunction!(g_quality_loss, m)?)?;
    m.add_function(wrap_pyfunction!(identity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(build_splits, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_checks_length() {
        assert!(image(vec![0.0; 11], (3, 2, 2)).is_err());
        let t = image(vec![0.5; 12], (3, 2, 2)).unwrap();
        assert_eq!(flat(&t).unwrap(), vec![0.5; 12]);
    }

    #[test]
    fn scalar_losses_through_helpers() {
        let z = scores(vec![0.0, 0.0]).unwrap();
        assert_eq!(scalar(&losses::d_loss(&z, &z, &z).unwrap()).unwrap(), 4.0);
    }

    #[test]
    fn error_kinds() {
        Python::initialize();
        assert!(to_py(Error::UnknownVariant("x".into())).to_string().contains("ValueError"));
        assert!(to_py(Error::Integrity("bad".into())).to_string().contains("RuntimeError"));
    }
}
