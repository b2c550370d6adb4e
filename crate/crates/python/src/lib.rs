//! Python bindings: dataset generation, configuration, training, evaluation,
//! gradient checks and the retrieval metrics.

// pyo3 0.22 macro expansion trips this lint on `?` inside #[pymethods]
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vfe_tps::alignment::{cmpm_loss, identity_labels, LossBreakdown};
use vfe_tps::metrics::{self, MetricsReport, RetrievalGroundTruth};
use vfe_tps::synthdata::{write_dataset, Dataset, DatasetConfig, Split};
use vfe_tps::tensor::{DType, Graph, Tensor};
use vfe_tps::trainer::gradcheck::{gradcheck as run_gradcheck, GradcheckOptions};
use vfe_tps::trainer::{evaluate, stored_dtype, Checkpoint, SplitData, TrainConfig, Trainer};
use vfe_tps::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Dimension { .. } | Error::Contract(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("rank1", r.rank1)?;
    d.set_item("rank5", r.rank5)?;
    d.set_item("rank10", r.rank10)?;
    d.set_item("map", r.map)?;
    d.set_item("silhouette", r.silhouette)?;
    d.set_item("avg_dist", r.avg_dist)?;
    Ok(d)
}

fn losses_dict<'py>(py: Python<'py>, epoch: usize, l: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("epoch", epoch)?;
    d.set_item("total", l.total)?;
    d.set_item("cmpm", l.l_cmpm)?;
    d.set_item("i2t", l.l_i2t)?;
    d.set_item("t2i", l.l_t2i)?;
    d.set_item("isgvfc", l.l_isgvfc)?;
    d.set_item("tgmim", l.l_tgmim)?;
    Ok(d)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new([rows.len(), cols], rows.concat()).map_err(py_err)
}

/// Writes a synthetic pedestrian dataset and returns per-split counts.
#[pyfunction]
#[pyo3(signature = (out, identities=32, views=4, captions=2, seed=0))]
fn generate_dataset(
    py: Python<'_>,
    out: PathBuf,
    identities: usize,
    views: usize,
    captions: usize,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let cfg = DatasetConfig {
        identities,
        views_per_id: views,
        captions_per_view: captions,
        seed,
        ..DatasetConfig::default()
    };
    let manifest = write_dataset(&out, &cfg).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    for (split, c) in &manifest.splits {
        d.set_item(split.as_str(), (c.identities, c.images, c.captions))?;
    }
    Ok(d.unbind())
}

/// Training configuration; keys match the command-line flags.
#[pyclass(name = "TrainConfig")]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (preset="desk", **overrides))]
    fn new(preset: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::preset(preset).map_err(py_err)?;
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                inner
                    .set(&k.extract::<String>()?, &v.str()?.to_string())
                    .map_err(py_err)?;
            }
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value.str()?.to_string()).map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(seed={}, epochs={}, dtype={})",
            self.inner.seed, self.inner.epochs, self.inner.dtype
        )
    }
}

enum AnyTrainer {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

macro_rules! dispatch {
    ($t:expr, $x:ident => $body:expr) => {
        match $t {
            AnyTrainer::F32($x) => $body,
            AnyTrainer::F64($x) => $body,
        }
    };
}

/// A model with its optimizer and training split.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: AnyTrainer,
    dataset: Dataset,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig, dataset: PathBuf) -> PyResult<Self> {
        let data = Dataset::load(&dataset).map_err(py_err)?;
        let cfg = &config.inner;
        let inner = match cfg.dtype {
            DType::F32 => AnyTrainer::F32(Trainer::new(cfg, &data).map_err(py_err)?),
            DType::F64 => AnyTrainer::F64(Trainer::new(cfg, &data).map_err(py_err)?),
        };
        Ok(Self { inner, dataset: data })
    }

    /// Restores a saved training state.
    #[staticmethod]
    #[pyo3(signature = (path, dataset=None))]
    fn load(path: PathBuf, dataset: Option<PathBuf>) -> PyResult<Self> {
        fn build<T: vfe_tps::tensor::Real>(
            path: &std::path::Path,
            dataset: Option<PathBuf>,
        ) -> vfe_tps::Result<(Trainer<T>, Dataset)> {
            let ck = Checkpoint::<T>::load(path)?;
            let data = Dataset::load(&dataset.unwrap_or_else(|| ck.meta.config.dataset.clone()))?;
            Ok((Trainer::from_checkpoint(&ck, &data)?, data))
        }
        let (inner, dataset) = match stored_dtype(&path).map_err(py_err)? {
            DType::F32 => build::<f32>(&path, dataset).map(|(t, d)| (AnyTrainer::F32(t), d)),
            DType::F64 => build::<f64>(&path, dataset).map(|(t, d)| (AnyTrainer::F64(t), d)),
        }
        .map_err(py_err)?;
        Ok(Self { inner, dataset })
    }

    /// Runs one epoch and returns its mean losses.
    fn run_epoch(&mut self, py: Python<'_>) -> PyResult<Py<PyDict>> {
        let log = dispatch!(&mut self.inner, t => t.run_epoch()).map_err(py_err)?;
        Ok(losses_dict(py, log.epoch, &log.losses)?.unbind())
    }

    /// Trains until the configured epoch count.
    fn train(&mut self) -> PyResult<()> {
        dispatch!(&mut self.inner, t => t.train(None)).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        dispatch!(&self.inner, t => t.epoch)
    }

    #[getter]
    fn history(&self, py: Python<'_>) -> PyResult<Vec<Py<PyDict>>> {
        let history = dispatch!(&self.inner, t => t.history.clone());
        history
            .iter()
            .map(|h| losses_dict(py, h.epoch, &h.losses).map(Bound::unbind))
            .collect()
    }

    /// Text-to-image retrieval metrics on a split.
    #[pyo3(signature = (split="test"))]
    fn evaluate(&self, py: Python<'_>, split: &str) -> PyResult<Py<PyDict>> {
        let split: Split = split.parse().map_err(py_err)?;
        let report = dispatch!(&self.inner, t => {
            SplitData::new(&self.dataset, split, &self.dataset.vocab, t.cfg.text_len)
                .and_then(|data| evaluate(&t.model, &data))
        })
        .map_err(py_err)?;
        Ok(report_dict(py, &report)?.unbind())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dispatch!(&self.inner, t => t.checkpoint().save(&path)).map_err(py_err)
    }
}

/// Per-loss worst relative gradient error against central differences.
#[pyfunction]
#[pyo3(signature = (config=None, tau=0.1, seeds=5))]
fn gradcheck(py: Python<'_>, config: Option<&PyTrainConfig>, tau: f64, seeds: u64) -> PyResult<Vec<Py<PyDict>>> {
    let cfg = config.map_or_else(TrainConfig::desk, |c| c.inner.clone());
    let opts = GradcheckOptions {
        tau,
        seeds: (0..seeds).collect(),
        ..GradcheckOptions::default()
    };
    run_gradcheck(&cfg, &opts)
        .map_err(py_err)?
        .into_iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("loss", &r.loss)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("passed", r.passed())?;
            Ok(d.unbind())
        })
        .collect()
}

/// `(cmpm, i2t, t2i)` for matched image and text features.
#[pyfunction]
#[pyo3(signature = (images, texts, pids, tau=0.02, eps=1e-8))]
fn cmpm(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>, pids: Vec<u32>, tau: f64, eps: f64) -> PyResult<(f64, f64, f64)> {
    let mut g = Graph::<f64>::new();
    let i = g.constant(matrix(&images)?);
    let t = g.constant(matrix(&texts)?);
    let terms = cmpm_loss(&mut g, i, t, &identity_labels(&pids, &pids), tau, eps).map_err(py_err)?;
    Ok((g.scalar(terms.cmpm), g.scalar(terms.i2t), g.scalar(terms.t2i)))
}

/// Rank-k accuracy in percent for a query x gallery similarity matrix.
#[pyfunction]
fn rank_k(similarity: Vec<Vec<f64>>, query_pids: Vec<u32>, gallery_pids: Vec<u32>, k: usize) -> PyResult<f64> {
    let gt = RetrievalGroundTruth::from_pids(&query_pids, &gallery_pids).map_err(py_err)?;
    metrics::rank_k(&matrix(&similarity)?, &gt, k).map_err(py_err)
}

/// Mean average precision in percent.
#[pyfunction]
fn mean_average_precision(similarity: Vec<Vec<f64>>, query_pids: Vec<u32>, gallery_pids: Vec<u32>) -> PyResult<f64> {
    let gt = RetrievalGroundTruth::from_pids(&query_pids, &gallery_pids).map_err(py_err)?;
    metrics::mean_average_precision(&matrix(&similarity)?, &gt).map_err(py_err)
}

#[pyfunction]
fn silhouette(features: Vec<Vec<f64>>, pids: Vec<u32>) -> PyResult<f64> {
    metrics::silhouette(&matrix(&features)?, &pids).map_err(py_err)
}

#[pymodule]
fn vfe_tps_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(cmpm, m)?)?;
    m.add_function(wrap_pyfunction!(rank_k, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    Ok(())
}
