//! Python bindings: tensors, the autodiff tape, adjacency construction,
//! retrieval metrics, the synthetic dataset and training.

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dsamgn_core::autograd::{Tape, Var};
use dsamgn_core::config::RunConfig;
use dsamgn_core::data::{generate_dataset as core_generate, Dataset, Split, SyntheticSpec};
use dsamgn_core::harness::{self, inspect};
use dsamgn_core::io::Container;
use dsamgn_core::metrics::{self, RetrievalReport, RetrievalRun};
use dsamgn_core::model::Model;
use dsamgn_core::sasamg::{self, Percentile, SasamgParams, SimilarityMatrix};
use dsamgn_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(m) => PyArithmeticError::new_err(m),
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for dsamgn_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn percentile(beta: f64) -> PyResult<Percentile> {
    Percentile::new(beta).py()
}

/// Dense row-major float64 tensor.
#[pyclass(name = "Tensor", module = "dsamgn", from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self(Tensor::new(shape, data).py()?))
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(Tensor::zeros(&shape))
    }

    #[staticmethod]
    fn eye(n: usize) -> Self {
        Self(Tensor::eye(n))
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self(Tensor::from_rows(&rows).py()?))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn tolist(&self) -> PyResult<Vec<Vec<f64>>> {
        let (m, _) = self.0.dims2().py()?;
        Ok((0..m).map(|i| self.0.row(i).to_vec()).collect())
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self(self.0.reshaped(&shape).py()?))
    }

    fn transpose(&self) -> PyResult<Self> {
        Ok(Self(self.0.transpose2().py()?))
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(Self(self.0.matmul(&other.0).py()?))
    }

    fn __matmul__(&self, other: &PyTensor) -> PyResult<Self> {
        self.matmul(other)
    }

    fn __len__(&self) -> usize {
        self.0.shape().first().copied().unwrap_or(1)
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        dsamgn_core::io::save_tensor(path.as_ref(), &self.0).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(dsamgn_core::io::load_tensor(path.as_ref()).py()?))
    }

    fn to_csv(&self) -> PyResult<String> {
        dsamgn_core::io::tensor_to_csv(&self.0).py()
    }
}

/// Reverse-mode autodiff tape. Nodes are addressed by the integer handles the
/// recording methods return.
#[pyclass(name = "Tape", module = "dsamgn")]
struct PyTape {
    tape: Tape,
    vars: Vec<Var>,
}

impl PyTape {
    fn var(&self, i: usize) -> PyResult<Var> {
        self.vars.get(i).copied().ok_or_else(|| {
            PyValueError::new_err(format!("no node {i}; the tape has {} handles", self.vars.len()))
        })
    }

    fn push(&mut self, v: Var) -> usize {
        self.vars.push(v);
        self.vars.len() - 1
    }
}

#[pymethods]
impl PyTape {
    #[new]
    fn new() -> Self {
        Self {
            tape: Tape::new(),
            vars: Vec::new(),
        }
    }

    fn __len__(&self) -> usize {
        self.vars.len()
    }

    fn param(&mut self, t: &PyTensor) -> usize {
        let v = self.tape.param(t.0.clone());
        self.push(v)
    }

    fn constant(&mut self, t: &PyTensor) -> usize {
        let v = self.tape.constant(t.0.clone());
        self.push(v)
    }

    fn value(&self, v: usize) -> PyResult<PyTensor> {
        Ok(PyTensor(self.tape.value(self.var(v)?).clone()))
    }

    /// Gradient after `backward`; zeros for nodes the loss does not reach.
    fn grad(&self, v: usize) -> PyResult<PyTensor> {
        Ok(PyTensor(self.tape.grad_tensor(self.var(v)?)))
    }

    fn matmul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.var(a)?, self.var(b)?);
        let v = self.tape.matmul(a, b).py()?;
        Ok(self.push(v))
    }

    fn add(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.var(a)?, self.var(b)?);
        let v = self.tape.add(a, b).py()?;
        Ok(self.push(v))
    }

    fn mul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.var(a)?, self.var(b)?);
        let v = self.tape.mul(a, b).py()?;
        Ok(self.push(v))
    }

    fn scale(&mut self, x: usize, s: f64) -> PyResult<usize> {
        let x = self.var(x)?;
        let v = self.tape.scale(x, s);
        Ok(self.push(v))
    }

    fn relu(&mut self, x: usize) -> PyResult<usize> {
        let x = self.var(x)?;
        let v = self.tape.relu(x);
        Ok(self.push(v))
    }

    fn softmax_rows(&mut self, x: usize) -> PyResult<usize> {
        let x = self.var(x)?;
        let v = self.tape.softmax_rows(x).py()?;
        Ok(self.push(v))
    }

    fn sum(&mut self, x: usize) -> PyResult<usize> {
        let x = self.var(x)?;
        let v = self.tape.sum(x);
        Ok(self.push(v))
    }

    fn mean(&mut self, x: usize) -> PyResult<usize> {
        let x = self.var(x)?;
        let v = self.tape.mean(x);
        Ok(self.push(v))
    }

    fn cross_entropy(&mut self, logits: usize, labels: Vec<usize>) -> PyResult<usize> {
        let l = self.var(logits)?;
        let v = self.tape.cross_entropy(l, &labels).py()?;
        Ok(self.push(v))
    }

    /// Similarity and erased adjacency of patches `x` under query/key weights;
    /// returns `(s, a, threshold)`.
    fn sasamg(&mut self, x: usize, w_q: usize, w_k: usize, beta: f64) -> PyResult<(usize, usize, f64)> {
        let vars = sasamg::SasamgVars {
            w_q: self.var(w_q)?,
            w_k: self.var(w_k)?,
        };
        let x = self.var(x)?;
        let out = sasamg::sasamg_forward(&mut self.tape, x, &vars, percentile(beta)?).py()?;
        let (s, a) = (self.push(out.s), self.push(out.a));
        Ok((s, a, out.threshold))
    }

    fn graph_propagate(&mut self, h: usize, a: usize, w: usize) -> PyResult<usize> {
        let (h, a, w) = (self.var(h)?, self.var(a)?, self.var(w)?);
        let v = dsamgn_core::graph::graph_propagate(&mut self.tape, h, a, w).py()?;
        Ok(self.push(v))
    }

    fn triplet_loss(&mut self, emb: usize, labels: Vec<usize>, margin: f64) -> PyResult<usize> {
        let e = self.var(emb)?;
        let mining = dsamgn_core::losses::Mining::BatchHard;
        let v = dsamgn_core::losses::triplet_loss(&mut self.tape, e, &labels, margin, mining).py()?;
        Ok(self.push(v))
    }

    fn backward(&mut self, loss: usize) -> PyResult<()> {
        let l = self.var(loss)?;
        self.tape.backward(l).py()
    }
}

/// The `ceil(beta% · n)`-th smallest value (`-inf` when that rank is 0).
#[pyfunction]
fn percentile_threshold(values: Vec<f64>, beta: f64) -> PyResult<f64> {
    sasamg::percentile_threshold(&values, percentile(beta)?).py()
}

/// Zeroes every entry of `s` not strictly above its `beta` percentile;
/// returns `(a, threshold)`.
#[pyfunction]
fn erase(s: &PyTensor, beta: f64) -> PyResult<(PyTensor, f64)> {
    let a = sasamg::erase_matrix(&SimilarityMatrix(s.0.clone()), percentile(beta)?).py()?;
    Ok((PyTensor(a.a), a.threshold))
}

/// Returns `(s, a, threshold)` for patches `x: N×C`.
#[pyfunction]
fn generate_adjacency(x: &PyTensor, w_q: &PyTensor, w_k: &PyTensor, beta: f64) -> PyResult<(PyTensor, PyTensor, f64)> {
    let params = SasamgParams::new(w_q.0.clone(), w_k.0.clone()).py()?;
    let (s, a) = sasamg::generate_adjacency(&x.0, &params, percentile(beta)?).py()?;
    Ok((PyTensor(s.0), PyTensor(a.a), a.threshold))
}

#[pyfunction]
fn average_precision(ranked_ids: Vec<usize>, query_id: usize) -> Option<f64> {
    metrics::average_precision(&ranked_ids, query_id)
}

fn report_dict<'py>(py: Python<'py>, r: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mAP", r.map)?;
    d.set_item("rank1", r.rank1)?;
    d.set_item("rank5", r.rank5)?;
    d.set_item("per_query_ap", r.per_query_ap.clone())?;
    d.set_item("excluded_queries", r.excluded_queries)?;
    Ok(d)
}

/// mAP / rank-1 / rank-5 of query embeddings against a gallery.
#[pyfunction]
fn evaluate_retrieval<'py>(
    py: Python<'py>,
    query: &PyTensor,
    query_ids: Vec<usize>,
    gallery: &PyTensor,
    gallery_ids: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let run = RetrievalRun::evaluate(query.0.clone(), query_ids, gallery.0.clone(), gallery_ids, None).py()?;
    report_dict(py, &run.report())
}

/// A generated synthetic dataset.
#[pyclass(name = "Dataset", module = "dsamgn")]
struct PyDataset(Dataset);

fn split<'a>(d: &'a Dataset, name: &str) -> PyResult<&'a Split> {
    match name {
        "train" => Ok(&d.train),
        "query" => Ok(&d.query),
        "gallery" => Ok(&d.gallery),
        other => Err(PyValueError::new_err(format!(
            "unknown split {other:?}; expected train, query or gallery"
        ))),
    }
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn signal_positions(&self) -> Vec<usize> {
        self.0.signal_positions.clone()
    }

    /// Feature maps `B×C×H×W` of a split.
    fn x(&self, name: &str) -> PyResult<PyTensor> {
        Ok(PyTensor(split(&self.0, name)?.x.clone()))
    }

    /// One sample `C×H×W` of a split.
    fn sample(&self, name: &str, index: usize) -> PyResult<PyTensor> {
        Ok(PyTensor(split(&self.0, name)?.x.index_outer(index).py()?))
    }

    fn ids(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(split(&self.0, name)?.ids.clone())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.to_container().py()?.save(path.as_ref()).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(Dataset::from_container(&Container::load(path.as_ref()).py()?).py()?))
    }
}

/// Builds a dataset from `SyntheticSpec` keyword arguments.
#[pyfunction]
#[pyo3(signature = (**spec))]
fn generate_dataset(spec: Option<&Bound<'_, PyDict>>) -> PyResult<PyDataset> {
    let mut table = toml::Table::new();
    if let Some(kw) = spec {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = if let Ok(i) = v.extract::<i64>() {
                toml::Value::Integer(i)
            } else {
                toml::Value::Float(v.extract::<f64>()?)
            };
            table.insert(key, value);
        }
    }
    let spec: SyntheticSpec = table
        .try_into()
        .map_err(|e: toml::de::Error| PyValueError::new_err(e.to_string()))?;
    Ok(PyDataset(core_generate(&spec).py()?))
}

/// A trained or freshly initialised model.
#[pyclass(name = "Model", module = "dsamgn")]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    /// Eval-mode embeddings of a batch `B × sample shape`.
    fn embed(&self, batch: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor(self.0.embed(&batch.0).py()?))
    }

    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &harness::evaluate(&self.0, &data.0).py()?.report())
    }

    /// Per-branch `(block, branch, S, A, threshold)` for one sample `C×H×W`.
    fn inspect(&self, sample: &PyTensor) -> PyResult<Vec<(usize, String, PyTensor, PyTensor, f64)>> {
        Ok(inspect(&self.0, &sample.0)
            .py()?
            .into_iter()
            .map(|d| {
                (
                    d.block,
                    d.branch.to_string(),
                    PyTensor(d.s),
                    PyTensor(d.adjacency.a),
                    d.adjacency.threshold,
                )
            })
            .collect())
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.config.beta.value()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.to_container().py()?.save(path.as_ref()).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(Model::from_container(&Container::load(path.as_ref()).py()?).py()?))
    }
}

/// Trains on `data` with a run configuration given as TOML text (the same
/// format the command-line tool reads). Returns the model and the step log.
#[pyfunction]
#[pyo3(signature = (data, config = ""))]
fn train(data: &PyDataset, config: &str) -> PyResult<(PyModel, Vec<String>)> {
    let mut cfg = RunConfig::parse(config).py()?;
    cfg.synthetic = data.0.spec.clone();
    let model_cfg = cfg.model_config().py()?;
    let out = harness::train(&model_cfg, &cfg.train, &cfg.loss, &data.0, None).py()?;
    Ok((PyModel(out.model), out.log))
}

#[pymodule]
fn dsamgn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTape>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(percentile_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(erase, m)?)?;
    m.add_function(wrap_pyfunction!(generate_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
