//! Python bindings: datasets, models, bound estimates, training and the
//! verification suites.

use hvae::autodiff::Tape;
use hvae::data::{labeled_batch, LabeledImage, SceneConfig, SemiDataset};
use hvae::eval::{self, Emit, TaskMetric};
use hvae::noise::{CounterNoise, Stream};
use hvae::objectives::{self, EstimatorConfig, LabeledBatch, UnlabeledBatch};
use hvae::train::{self as trainer, Checkpoint, Mode, TrainConfig};
use hvae::{Error, ModelDims, ModelParams, NetworkSpecs};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Coverage(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Pair = (Vec<f64>, Vec<f64>);

fn pairs(records: &[LabeledImage]) -> Vec<Pair> {
    records.iter().map(|r| (r.image.clone(), r.label.clone())).collect()
}

/// Labeled, unlabeled and test splits of a synthetic or loaded dataset.
#[pyclass(name = "Dataset", module = "hybrid_vae")]
struct PyDataset {
    inner: SemiDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n, m, t, image_side=16, num_landmarks=4, depth=false, seed=0))]
    fn synthesize(n: usize, m: usize, t: usize, image_side: usize, num_landmarks: usize, depth: bool, seed: u64) -> PyResult<Self> {
        let scene = SceneConfig { image_side, num_landmarks, depth_mode: depth, seed, ..SceneConfig::default() };
        Ok(PyDataset { inner: SemiDataset::synthesize(&scene, n, m, t).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: hvae::data::load_dataset(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        hvae::data::save_dataset(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn d_dim(&self) -> usize {
        self.inner.d_dim()
    }

    #[getter]
    fn h_dim(&self) -> usize {
        self.inner.h_dim()
    }

    /// `(n, m, t)`.
    #[getter]
    fn sizes(&self) -> (usize, usize, usize) {
        (self.inner.labeled.len(), self.inner.unlabeled.len(), self.inner.test.len())
    }

    fn labeled(&self) -> Vec<Pair> {
        pairs(&self.inner.labeled)
    }

    fn unlabeled(&self) -> Vec<Vec<f64>> {
        self.inner.unlabeled.iter().map(|r| r.image.clone()).collect()
    }

    fn test(&self) -> Vec<Pair> {
        pairs(&self.inner.test)
    }

    fn __repr__(&self) -> String {
        let (n, m, t) = self.sizes();
        format!("Dataset(n={n}, m={m}, t={t}, d_dim={}, h_dim={})", self.d_dim(), self.h_dim())
    }
}

/// Parameters of the joint model, the posterior encoder and the label predictor.
#[pyclass(name = "Model", module = "hybrid_vae", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    params: ModelParams,
}

fn estimator(s_z: usize, s_h: usize) -> PyResult<EstimatorConfig> {
    EstimatorConfig::new(s_z, s_h).map_err(py_err)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (d_dim, h_dim, z_dim, hidden_width=64, depth=false, seed=0))]
    fn new(d_dim: usize, h_dim: usize, z_dim: usize, hidden_width: usize, depth: bool, seed: u64) -> PyResult<Self> {
        let dims = ModelDims::new(d_dim, h_dim, z_dim).map_err(py_err)?;
        let params = ModelParams::init(dims, NetworkSpecs::standard(dims, hidden_width, depth), seed).map_err(py_err)?;
        Ok(PyModel { params })
    }

    /// Parameters stored in an HVCK checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { params: Checkpoint::load(path).map_err(py_err)?.params })
    }

    /// Writes a step-0 checkpoint with zero optimizer velocity.
    #[pyo3(signature = (path, seed=0))]
    fn save(&self, path: &str, seed: u64) -> PyResult<()> {
        Checkpoint::new(self.params.clone(), seed).save(path).map_err(py_err)
    }

    /// `(d_dim, h_dim, z_dim)`.
    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.params.dims();
        (d.d_dim, d.h_dim, d.z_dim)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn block_names(&self) -> Vec<String> {
        self.params.blocks().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Monte Carlo estimate of the lower bound on `log p(d, h)`.
    #[pyo3(signature = (d, h, s_z=3, seed=0))]
    fn elbo_full(&self, d: Vec<f64>, h: Vec<f64>, s_z: usize, seed: u64) -> PyResult<f64> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let noise = CounterNoise::new(seed, Stream::Eval, 0);
        objectives::elbo_full(&vars, &d, &h, estimator(s_z, 1)?, &noise).and_then(|v| v.item()).map_err(py_err)
    }

    /// Monte Carlo estimate of the lower bound on `log p(d)`.
    #[pyo3(signature = (d, s_z=3, s_h=3, seed=0))]
    fn elbo_partial(&self, d: Vec<f64>, s_z: usize, s_h: usize, seed: u64) -> PyResult<f64> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let noise = CounterNoise::new(seed, Stream::Eval, 0);
        objectives::elbo_partial(&vars, &d, estimator(s_z, s_h)?, &noise).and_then(|v| v.item()).map_err(py_err)
    }

    /// `−(mean L_F + mean L_P)` over a labeled and an unlabeled batch.
    #[pyo3(signature = (labeled, unlabeled, s_z=3, s_h=3, seed=0))]
    fn hybrid_loss(&self, labeled: Vec<Pair>, unlabeled: Vec<Vec<f64>>, s_z: usize, s_h: usize, seed: u64) -> PyResult<f64> {
        let lab = LabeledBatch::from_pairs(&labeled).map_err(py_err)?;
        let unl = UnlabeledBatch::from_images(&unlabeled).map_err(py_err)?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let noise = CounterNoise::new(seed, Stream::Train, 0);
        objectives::hybrid_loss(&vars, &lab, &unl, estimator(s_z, s_h)?, &noise)
            .and_then(|l| l.value.item())
            .map_err(py_err)
    }

    /// Mean of the predictor `q(h|d)`.
    fn predict(&self, d: Vec<f64>) -> PyResult<Vec<f64>> {
        let rec = LabeledImage { image: d, label: vec![0.0; self.params.dims().h_dim], observed: None };
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let batch = labeled_batch(&[&rec]).map_err(py_err)?;
        let q = vars.predict_h(tape.constant(batch.images)).map_err(py_err)?;
        let out = q.mean().value().data().to_vec();
        Ok(out)
    }

    /// `count` decoded `(d, h)` pairs from the prior.
    #[pyo3(signature = (count, seed=0, draw=false))]
    fn sample(&self, count: usize, seed: u64, draw: bool) -> PyResult<Vec<Pair>> {
        let emit = if draw { Emit::Samples } else { Emit::Means };
        Ok(pairs(&eval::sample_joint(&self.params, count, seed, emit).map_err(py_err)?))
    }

    /// Decoder means along the latent segment between two records.
    #[pyo3(signature = (src, dst, steps=8))]
    fn interpolate(&self, src: Pair, dst: Pair, steps: usize) -> PyResult<Vec<Pair>> {
        let rec = |(image, label): Pair| LabeledImage { image, label, observed: None };
        Ok(pairs(&eval::interpolate(&self.params, &rec(src), &rec(dst), steps).map_err(py_err)?))
    }

    /// Negative mean full bound over the dataset's test split.
    #[pyo3(signature = (dataset, s_z=3, seed=0))]
    fn test_nll(&self, dataset: &PyDataset, s_z: usize, seed: u64) -> PyResult<f64> {
        let noise = CounterNoise::new(seed, Stream::Eval, 0);
        eval::test_nll(&self.params, &dataset.inner.test, estimator(s_z, 1)?, &noise).map_err(py_err)
    }

    /// Interocular-normalized landmark error of `predict` on the test split.
    fn task_loss(&self, dataset: &PyDataset) -> PyResult<f64> {
        let metric = if dataset.inner.meta.masked { TaskMetric::L2 } else { TaskMetric::Interocular };
        eval::task_loss(&self.params, &dataset.inner.test, metric).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (d, h, z) = self.dims();
        format!("Model(d_dim={d}, h_dim={h}, z_dim={z}, parameters={})", self.num_parameters())
    }
}

/// Trains a copy of `model`; returns the trained model and the ledger rows.
#[pyfunction]
#[pyo3(signature = (dataset, model, mode="hybrid", epochs=10, learning_rate=3e-4, momentum=0.9, batch_size=32, eval_every=100, seed=0, s_z=3, s_h=3, max_grad_norm=Some(1000.0)))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    model: &PyModel,
    mode: &str,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    eval_every: u64,
    seed: u64,
    s_z: usize,
    s_h: usize,
    max_grad_norm: Option<f64>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let mode: Mode = mode.parse().map_err(py_err)?;
    let cfg = TrainConfig {
        learning_rate,
        momentum,
        batch_size,
        epochs,
        mode,
        estimator: estimator(s_z, s_h)?,
        seed,
        eval_every,
        max_grad_norm,
        ..TrainConfig::default()
    };
    let (ckpt, rows) = trainer::train(&dataset.inner, cfg, model.params.clone()).map_err(py_err)?;
    let dicts = rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("mode", r.mode.as_str())?;
            d.set_item("n", r.n)?;
            d.set_item("m", r.m)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("test_nll", r.test_nll)?;
            d.set_item("task_loss", r.task_loss)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { params: ckpt.params }, dicts))
}

/// Runs the self-contained verification suites; returns `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (draws=3))]
fn verify(draws: usize) -> Vec<(String, bool, String)> {
    let budget = hvae::verify::Budget { bound_draws: draws, ..hvae::verify::Budget::default() };
    hvae::verify::run_all(budget)
        .into_iter()
        .map(|c| (format!("{}/{}", c.suite, c.name), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn hybrid_vae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
