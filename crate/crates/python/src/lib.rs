//! Python bindings: load, train and sample models, score examples, and
//! compute the detection metrics. Data crosses the boundary as lists of
//! rows (`list[list[float]]`).

use std::path::PathBuf;

use jebm::evaluation::{self, ScoreConfig};
use jebm::model::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
use jebm::rng::{chain_streams, stream};
use jebm::samplers::sample_prior;
use jebm::{HierarchicalModel, LangevinConfig, LatentStack, RunConfig, Tensor, Trainer};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: jebm::Error) -> PyErr {
    match e {
        jebm::Error::Usage(_) | jebm::Error::Config(_) | jebm::Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>, width: usize) -> PyResult<Tensor> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("rows must have {} values, got {}", width, r.len())));
    }
    let n = rows.len();
    Tensor::matrix(n, width, rows.into_iter().flatten().collect()).map_err(err)
}

fn sampler(steps: usize, step_size: f64, space: &str) -> PyResult<LangevinConfig> {
    let cfg = LangevinConfig {
        steps,
        step_size,
        space: space.parse().map_err(err)?,
        ..LangevinConfig::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// A trained or freshly initialized model.
#[pyclass(module = "pyjebm")]
pub struct Model {
    inner: HierarchicalModel,
    meta: serde_json::Value,
}

#[pymethods]
impl Model {
    /// Initializes a model from the [model] section of a TOML run config.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config).map_err(err)?;
        let inner = HierarchicalModel::new(&cfg.model, &mut stream(seed, "init", 0)).map_err(err)?;
        Ok(Model {
            inner,
            meta: serde_json::Value::Null,
        })
    }

    /// Loads a checkpoint directory, or the final checkpoint of a training
    /// output directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let dir = if !path.join("manifest.json").exists() && path.join("final/manifest.json").exists() {
            path.join("final")
        } else {
            path
        };
        let ck = load_checkpoint(&dir).map_err(err)?;
        Ok(Model {
            inner: ck.model,
            meta: ck.meta,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            model: self.inner.clone(),
            iteration: 0,
            meta: self.meta.clone(),
            extra: Vec::new(),
        };
        save_checkpoint(&ck, Dtype::F64, &path).map_err(err)
    }

    #[getter]
    fn latent_dims(&self) -> Vec<usize> {
        self.inner.latent_dims().to_vec()
    }

    #[getter]
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    /// Decoder means of `n` prior samples.
    #[pyo3(signature = (n, steps = 40, step_size = 0.1, space = "z", seed = 0))]
    fn sample(&self, py: Python<'_>, n: usize, steps: usize, step_size: f64, space: &str, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let cfg = sampler(steps, step_size, space)?;
        let x = py.detach(|| evaluation::sample_data(&self.inner, n, &cfg, seed)).map_err(err)?;
        Ok(x.to_rows())
    }

    /// Prior latent samples, one list of rows per layer (bottom first).
    #[pyo3(signature = (n, steps = 40, step_size = 0.1, space = "z", seed = 0))]
    fn sample_latents(
        &self,
        py: Python<'_>,
        n: usize,
        steps: usize,
        step_size: f64,
        space: &str,
        seed: u64,
    ) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let cfg = sampler(steps, step_size, space)?;
        let run = py
            .detach(|| sample_prior(&self.inner.prior, &cfg, &mut chain_streams(seed, "sample", 0, n), None))
            .map_err(err)?;
        Ok(run.z.layers().iter().map(|t| t.to_rows()).collect())
    }

    /// Inference-network codes for each row of `x`, one list per layer:
    /// the means, or reparameterized draws when `sample` is set.
    #[pyo3(signature = (x, sample = false, seed = 0))]
    fn infer(&self, x: Vec<Vec<f64>>, sample: bool, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let x = matrix(x, self.inner.data_dim())?;
        let noise = sample.then(|| {
            LatentStack::standard_normal(self.inner.latent_dims(), &mut chain_streams(seed, "q", 0, x.rows()))
        });
        let q = self.inner.inference.infer(&x, noise.as_ref()).map_err(err)?;
        Ok(q.z.layers().iter().map(|t| t.to_rows()).collect())
    }

    /// Unnormalized joint log prior of latent codes given per layer.
    fn log_prior(&self, z: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let dims = self.inner.latent_dims().to_vec();
        if z.len() != dims.len() {
            return Err(PyValueError::new_err(format!("expected {} layers, got {}", dims.len(), z.len())));
        }
        let layers = z
            .into_iter()
            .zip(&dims)
            .map(|(rows, &d)| matrix(rows, d))
            .collect::<PyResult<Vec<_>>>()?;
        let stack = LatentStack::new(layers).map_err(err)?;
        self.inner.prior.unnormalized_log_prior(&stack).map_err(err)
    }

    /// `L^{>k}` per row of `x`; higher means more in-distribution.
    #[pyo3(signature = (x, k, n_mc = 4, seed = 0, steps = 40, step_size = 0.1))]
    fn ood_scores(&self, py: Python<'_>, x: Vec<Vec<f64>>, k: usize, n_mc: usize, seed: u64, steps: usize, step_size: f64) -> PyResult<Vec<f64>> {
        let x = matrix(x, self.inner.data_dim())?;
        let cfg = score_config(n_mc, seed, steps, step_size)?;
        py.detach(|| evaluation::ood_score_values(&self.inner, &x, k, &cfg)).map_err(err)
    }

    /// `LLR^{>k} = L^{>0} - L^{>k}` per row of `x`.
    #[pyo3(signature = (x, k, n_mc = 4, seed = 0, steps = 40, step_size = 0.1))]
    fn llr_scores(&self, py: Python<'_>, x: Vec<Vec<f64>>, k: usize, n_mc: usize, seed: u64, steps: usize, step_size: f64) -> PyResult<Vec<f64>> {
        let x = matrix(x, self.inner.data_dim())?;
        let cfg = score_config(n_mc, seed, steps, step_size)?;
        py.detach(|| evaluation::llr_scores(&self.inner, &x, k, &cfg)).map_err(err)
    }

    /// Copy of the model with every energy head zeroed (the Gaussian prior).
    fn without_energy(&self) -> Model {
        let mut inner = self.inner.clone();
        inner.prior.zero_energies();
        Model {
            inner,
            meta: self.meta.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!("Model(latent_dims={:?}, data_dim={})", self.inner.latent_dims(), self.inner.data_dim())
    }
}

fn score_config(n_mc: usize, seed: u64, steps: usize, step_size: f64) -> PyResult<ScoreConfig> {
    Ok(ScoreConfig {
        n_mc,
        seed,
        sampler: sampler(steps, step_size, "eps")?,
        ..ScoreConfig::default()
    })
}

/// Trains a model from a TOML run config. `data` replaces the config's
/// [data] section when given. Returns the model and the per-iteration
/// metrics as dicts.
#[pyfunction]
#[pyo3(signature = (config, data = None))]
fn train<'py>(py: Python<'py>, config: &str, data: Option<Vec<Vec<f64>>>) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
    let cfg = RunConfig::from_toml_str(config).map_err(err)?;
    let x = match data {
        Some(rows) => matrix(rows, cfg.model.data_dim)?,
        None => cfg.data.build(cfg.trainer.seed).map_err(err)?.to_tensor(),
    };
    let (model, stats) = py
        .detach(|| -> jebm::Result<_> {
            let model = HierarchicalModel::new(&cfg.model, &mut stream(cfg.trainer.seed, "init", 0))?;
            let mut tr = Trainer::new(cfg.trainer.clone(), cfg.prior_sampler.clone(), cfg.posterior_sampler.clone(), model)?;
            let mut stats = Vec::new();
            tr.fit(&x, |_, s| {
                stats.push(serde_json::to_value(s)?);
                Ok(())
            })?;
            Ok((tr.model, stats))
        })
        .map_err(err)?;
    let dicts = stats
        .into_iter()
        .map(|v| {
            let d = PyDict::new(py);
            for (k, v) in v.as_object().into_iter().flatten() {
                match v.as_f64() {
                    Some(f) => d.set_item(k, f)?,
                    None => d.set_item(k, py.None())?,
                }
            }
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let meta = serde_json::json!({ "config": serde_json::to_value(&cfg).map_err(|e| err(e.into()))? });
    Ok((Model { inner: model, meta }, dicts))
}

/// Generates the dataset described by a config's [data] section.
/// Returns the rows and the labels (None for unlabeled data).
#[pyfunction]
#[pyo3(signature = (config, seed = None))]
fn gen_data(config: &str, seed: Option<u64>) -> PyResult<(Vec<Vec<f64>>, Option<Vec<u32>>)> {
    let cfg = RunConfig::from_toml_str(config).map_err(err)?;
    let mut data = cfg.data.clone();
    if seed.is_some() {
        data.seed = seed;
    }
    let ds = data.build(cfg.trainer.seed).map_err(err)?;
    Ok((ds.to_tensor().to_rows(), ds.labels().map(|l| l.to_vec())))
}

/// Area under the ROC curve; `pos` should score higher.
#[pyfunction]
fn auroc(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    evaluation::auroc(&pos, &neg).map_err(err)
}

/// Area under the precision-recall curve with `pos` as the positive class.
#[pyfunction]
fn auprc(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    evaluation::auprc(&pos, &neg).map_err(err)
}

/// False-positive rate at 80% true-positive rate.
#[pyfunction]
fn fpr80(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    evaluation::fpr80(&pos, &neg).map_err(err)
}

#[pymodule]
fn pyjebm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr80, m)?)?;
    Ok(())
}
