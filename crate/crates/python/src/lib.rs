//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::HashMap;

use cpd_core::data::{self, PairedDataset, SyntheticSpec};
use cpd_core::encoders::{embed_rows, EncoderParams};
use cpd_core::evaluation::{self, LabeledFeatureSet, LayerTag, MultiView, ProbeConfig};
use cpd_core::memory_bank::{MemoryBank, Modality};
use cpd_core::objectives::{self, NceConfig, Temperature};
use cpd_core::trainer::{self, MetricsRecord, TrainState, TrainingConfig};
use cpd_core::{checkpoint, Error};
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Matrix = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_) | Error::Shape(_) | Error::ContractViolation(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) | Error::Parse { .. } | Error::Schema { .. } | Error::Format(_) => {
            PyIOError::new_err(e.to_string())
        }
        Error::NumericFault(_) | Error::DegenerateVector { .. } => PyRuntimeError::new_err(e.to_string()),
    }
}

fn array2(rows: &Matrix) -> PyResult<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((rows.len(), d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Matrix {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn tau(t: f64) -> PyResult<Temperature> {
    Temperature::new(t).map_err(py_err)
}

fn modality(name: &str) -> PyResult<Modality> {
    match name {
        "visual" => Ok(Modality::Visual),
        "text" => Ok(Modality::Text),
        _ => Err(PyValueError::new_err(format!(
            "modality must be 'visual' or 'text', got '{name}'"
        ))),
    }
}

fn layer_tag(name: &str) -> PyResult<LayerTag> {
    match name {
        "embedding" => Ok(LayerTag::Embedding),
        "penultimate" => Ok(LayerTag::Penultimate),
        _ => Err(PyValueError::new_err(format!("unknown layer tag '{name}'"))),
    }
}

fn l2_normalize_rows(x: &Matrix) -> PyResult<Array2<f64>> {
    let mut a = array2(x)?;
    for mut r in a.rows_mut() {
        let n = cpd_core::encoders::l2_normalize(r.view()).map_err(py_err)?;
        r.assign(&n);
    }
    Ok(a)
}

/// Unit-normalizes a vector.
#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    cpd_core::encoders::l2_normalize(Array1::from(v).view())
        .map(|a| a.to_vec())
        .map_err(py_err)
}

/// MLP encoder onto the unit sphere.
#[pyclass(name = "Encoder")]
#[derive(Clone)]
struct PyEncoder {
    inner: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    #[new]
    fn new(layer_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        EncoderParams::init(&layer_dims, seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims()
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let (e, _) = self.inner.forward(Array1::from(x).view()).map_err(py_err)?;
        Ok(e.to_vec())
    }

    fn embed(&self, x: Matrix) -> PyResult<Matrix> {
        Ok(rows(&embed_rows(&self.inner, &array2(&x)?).map_err(py_err)?))
    }

    #[pyo3(signature = (x, layer = "embedding"))]
    fn features(&self, x: Matrix, layer: &str) -> PyResult<Matrix> {
        let f = evaluation::extract_features(&self.inner, &array2(&x)?, layer_tag(layer)?, &MultiView::default())
            .map_err(py_err)?;
        Ok(rows(&f))
    }
}

/// Momentum-averaged embedding stores for both modalities.
#[pyclass(name = "MemoryBank")]
struct PyMemoryBank {
    inner: MemoryBank,
}

#[pymethods]
impl PyMemoryBank {
    #[new]
    fn new(n: usize, d: usize, momentum: f64, seed: u64) -> PyResult<Self> {
        MemoryBank::new(n, d, momentum, seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn row(&self, modality_name: &str, i: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.row(modality(modality_name)?, i).map_err(py_err)?.to_vec())
    }

    fn store(&self, modality_name: &str) -> PyResult<Matrix> {
        Ok(rows(&self.inner.store(modality(modality_name)?).to_owned()))
    }

    fn update(&mut self, modality_name: &str, i: usize, embedding: Vec<f64>) -> PyResult<()> {
        self.inner
            .update(modality(modality_name)?, i, Array1::from(embedding).view())
            .map_err(py_err)
    }

    #[pyo3(signature = (m, positive, exclude_positive = true, seed = 0))]
    fn sample_noise(&self, m: usize, positive: usize, exclude_positive: bool, seed: u64) -> PyResult<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner
            .sample_noise(m, positive, exclude_positive, &mut rng)
            .map(|d| d.indices)
            .map_err(py_err)
    }

    fn log_partition(&self, modality_name: &str, queries: Matrix, tau: f64) -> PyResult<f64> {
        self.inner
            .log_partition(modality(modality_name)?, array2(&queries)?.view(), tau)
            .map_err(py_err)
    }
}

/// Exact CPD loss of instance `i`; returns `(loss, grad_v, grad_t)`.
#[pyfunction]
fn cpd_loss_exact(
    f_v: Vec<f64>,
    f_t: Vec<f64>,
    i: usize,
    bank_v: Matrix,
    bank_t: Matrix,
    tau_value: f64,
) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let (bv, bt) = (array2(&bank_v)?, array2(&bank_t)?);
    let l = objectives::cpd_loss_exact(
        Array1::from(f_v).view(),
        Array1::from(f_t).view(),
        i,
        bv.view(),
        bt.view(),
        tau(tau_value)?,
    )
    .map_err(py_err)?;
    Ok((l.loss, l.grad_v.to_vec(), l.grad_t.to_vec()))
}

/// Joint instance-discrimination loss; returns `(loss, grad_v, grad_t)`.
#[pyfunction]
fn mmid_loss_exact(
    f_v: Vec<f64>,
    f_t: Vec<f64>,
    i: usize,
    bank_v: Matrix,
    bank_t: Matrix,
    tau_value: f64,
) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
    let (bv, bt) = (array2(&bank_v)?, array2(&bank_t)?);
    let l = objectives::mmid_loss_exact(
        Array1::from(f_v).view(),
        Array1::from(f_t).view(),
        i,
        bv.view(),
        bt.view(),
        tau(tau_value)?,
    )
    .map_err(py_err)?;
    Ok((l.loss, l.grad_v.to_vec(), l.grad_t.to_vec()))
}

/// Bidirectional margin ranking loss; returns `(loss, grad_v, grad_t)`.
#[pyfunction]
fn ranking_loss(batch_v: Matrix, batch_t: Matrix, delta: f64) -> PyResult<(f64, Matrix, Matrix)> {
    let (bv, bt) = (array2(&batch_v)?, array2(&batch_t)?);
    let l = objectives::ranking_loss(bv.view(), bt.view(), delta).map_err(py_err)?;
    Ok((l.loss, rows(&l.grad_v), rows(&l.grad_t)))
}

fn nce_config(m: usize, n: usize, z: Option<f64>) -> NceConfig {
    NceConfig {
        m,
        n,
        z_estimate: z,
        exclude_positive: true,
    }
}

/// NCE loss of one query; returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (query, pos, noise, n, tau_value, z = None))]
fn nce_loss(
    query: Vec<f64>,
    pos: Vec<f64>,
    noise: Matrix,
    n: usize,
    tau_value: f64,
    z: Option<f64>,
) -> PyResult<(f64, Vec<f64>)> {
    let noise = array2(&noise)?;
    let cfg = nce_config(noise.nrows(), n, z);
    let l = objectives::nce_loss(
        Array1::from(query).view(),
        Array1::from(pos).view(),
        noise.view(),
        &cfg,
        tau(tau_value)?,
    )
    .map_err(py_err)?;
    Ok((l.loss, l.grad.to_vec()))
}

/// Posterior-weighted descent direction of the NCE loss.
#[pyfunction]
#[pyo3(signature = (query, pos, noise, n, tau_value, z = None))]
fn cpd_grad_formula(
    query: Vec<f64>,
    pos: Vec<f64>,
    noise: Matrix,
    n: usize,
    tau_value: f64,
    z: Option<f64>,
) -> PyResult<Vec<f64>> {
    let noise = array2(&noise)?;
    let cfg = nce_config(noise.nrows(), n, z);
    objectives::cpd_grad_formula(
        Array1::from(query).view(),
        Array1::from(pos).view(),
        noise.view(),
        &cfg,
        tau(tau_value)?,
    )
    .map(|g| g.to_vec())
    .map_err(py_err)
}

/// Paired two-modality dataset with optional train/val/test splits.
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: PairedDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        data::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::write(&self.inner, path).map_err(py_err)
    }

    #[pyo3(signature = (train = 0.6, val = 0.2, test = 0.2, seed = 0))]
    fn split(&self, train: f64, val: f64, test: f64, seed: u64) -> PyResult<Self> {
        data::split(&self.inner, [train, val, test], seed)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `{"train": [...], "val": [...], "test": [...]}`, or `None` when unsplit.
    fn splits(&self) -> Option<HashMap<&'static str, Vec<usize>>> {
        self.inner.splits.as_ref().map(|s| {
            HashMap::from([
                ("train", s.train.clone()),
                ("val", s.val.clone()),
                ("test", s.test.clone()),
            ])
        })
    }

    fn visual(&self, indices: Vec<usize>) -> Matrix {
        rows(&self.inner.visual_matrix(&indices))
    }

    fn text(&self, indices: Vec<usize>) -> Matrix {
        rows(&self.inner.text_matrix(&indices))
    }

    fn labels(&self, indices: Vec<usize>) -> PyResult<Vec<usize>> {
        self.inner.labels(&indices).map_err(py_err)
    }
}

/// Generates the synthetic benchmark; returns `(dataset, visual_prototypes, text_prototypes)`.
#[pyfunction]
#[pyo3(signature = (classes = 10, per_class = 60, d_v = 48, d_t = 32, sigma = 0.1, rho = 0.2, seed = 0))]
fn generate(
    classes: usize,
    per_class: usize,
    d_v: usize,
    d_t: usize,
    sigma: f64,
    rho: f64,
    seed: u64,
) -> PyResult<(PyDataset, Matrix, Matrix)> {
    let spec = SyntheticSpec {
        classes,
        per_class,
        d_v,
        d_t,
        sigma,
        rho,
        seed,
        ..SyntheticSpec::default()
    };
    let out = data::generate(&spec).map_err(py_err)?;
    Ok((
        PyDataset { inner: out.dataset },
        out.prototypes.visual,
        out.prototypes.text,
    ))
}

fn record_dict(r: &MetricsRecord) -> HashMap<&'static str, String> {
    HashMap::from([
        ("epoch", r.epoch.to_string()),
        ("stage", r.stage.as_str().to_string()),
        ("objective", r.objective.to_string()),
        ("train_loss", r.train_loss.to_string()),
        ("recall1", r.val_recall_at_1.to_string()),
        ("recall5", r.val_recall_at_5.to_string()),
    ])
}

/// Training state bound to a split dataset.
#[pyclass(name = "Trainer")]
struct PyTrainer {
    state: TrainState,
    data: PairedDataset,
}

#[pymethods]
impl PyTrainer {
    /// `config` maps training keys (as in the CLI) to string values.
    #[new]
    #[pyo3(signature = (dataset, config = HashMap::new()))]
    fn new(dataset: &PyDataset, config: HashMap<String, String>) -> PyResult<Self> {
        let mut cfg = TrainingConfig::default();
        let mut keys: Vec<_> = config.iter().collect();
        keys.sort();
        for (k, v) in keys {
            cfg.set(k, v).map_err(py_err)?;
        }
        let state = TrainState::init(&dataset.inner, &cfg).map_err(py_err)?;
        Ok(Self {
            state,
            data: dataset.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(path: &str, dataset: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            state: checkpoint::load(path).map_err(py_err)?,
            data: dataset.inner.clone(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.state, path).map_err(py_err)
    }

    fn config(&self) -> HashMap<&'static str, String> {
        self.state.config.entries().into_iter().collect()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn stage(&self) -> &'static str {
        self.state.curriculum.stage.as_str()
    }

    /// One epoch plus the curriculum update.
    fn step(&mut self) -> PyResult<HashMap<&'static str, String>> {
        let record = trainer::train_epoch(&mut self.state, &self.data).map_err(py_err)?;
        trainer::advance_curriculum(&mut self.state, &self.data, record.val_recall_at_1).map_err(py_err)?;
        Ok(record_dict(&record))
    }

    /// Trains until the curriculum stops; returns the per-epoch history.
    fn run(&mut self) -> PyResult<Vec<HashMap<&'static str, String>>> {
        let history = trainer::run_curriculum_with(&mut self.state, &self.data, |_, _| Ok(())).map_err(py_err)?;
        Ok(history.iter().map(record_dict).collect())
    }

    fn visual_encoder(&self) -> PyEncoder {
        PyEncoder {
            inner: self.state.visual.clone(),
        }
    }

    fn text_encoder(&self) -> PyEncoder {
        PyEncoder {
            inner: self.state.text.clone(),
        }
    }
}

/// Cosine kNN predictions for `queries`.
#[pyfunction]
#[pyo3(signature = (train, labels, queries, k = evaluation::DEFAULT_K))]
fn knn_classify(train: Matrix, labels: Vec<usize>, queries: Matrix, k: usize) -> PyResult<Vec<usize>> {
    let set = LabeledFeatureSet::new(array2(&train)?, labels, LayerTag::Embedding).map_err(py_err)?;
    evaluation::knn_classify(&set, array2(&queries)?.view(), k).map_err(py_err)
}

/// Test accuracy of a linear probe with the default schedule.
#[pyfunction]
#[pyo3(signature = (train, train_labels, test, test_labels, seed = 0))]
fn linear_probe(
    train: Matrix,
    train_labels: Vec<usize>,
    test: Matrix,
    test_labels: Vec<usize>,
    seed: u64,
) -> PyResult<f64> {
    let a = LabeledFeatureSet::new(array2(&train)?, train_labels, LayerTag::Embedding).map_err(py_err)?;
    let b = LabeledFeatureSet::new(array2(&test)?, test_labels, LayerTag::Embedding).map_err(py_err)?;
    let cfg = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    evaluation::linear_probe(&a, &b, &cfg).map_err(py_err)
}

/// Nearest class embedding for each video embedding.
#[pyfunction]
fn zero_shot(class_embeddings: Matrix, video_embeddings: Matrix) -> PyResult<Vec<usize>> {
    let (c, v) = (
        l2_normalize_rows(&class_embeddings)?,
        l2_normalize_rows(&video_embeddings)?,
    );
    evaluation::zero_shot_from_embeddings(c.view(), v.view()).map_err(py_err)
}

/// Recall@k for both directions: `{"video_to_text": [...], "text_to_video": [...]}`.
#[pyfunction]
#[pyo3(signature = (f_v, f_t, ks = vec![1, 5, 10]))]
fn retrieval_recall(f_v: Matrix, f_t: Matrix, ks: Vec<usize>) -> PyResult<HashMap<&'static str, Vec<f64>>> {
    let r = evaluation::retrieval_recall(array2(&f_v)?.view(), array2(&f_t)?.view(), &ks).map_err(py_err)?;
    Ok(HashMap::from([
        ("video_to_text", r.video_to_text),
        ("text_to_video", r.text_to_video),
    ]))
}

#[pyfunction]
fn accuracy(predicted: Vec<usize>, truth: Vec<usize>) -> f64 {
    evaluation::accuracy(&predicted, &truth)
}

#[pymodule]
fn cpd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cpd_loss_exact, m)?)?;
    m.add_function(wrap_pyfunction!(mmid_loss_exact, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cpd_grad_formula, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(knn_classify, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_recall, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(array2(&vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        assert_eq!(rows(&array2(&m).unwrap()), m);
    }
}
