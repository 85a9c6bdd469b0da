//! Python bindings: `import metatl_py`.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use metatl::data::{self, Interaction, SplitBoundary, SplitDataset};
use metatl::eval::{self, EvalResult};
use metatl::gradcheck;
use metatl::meta::TrainState;
use metatl::model::{self, ParamView, TransitionRep, Triple};
use metatl::sampler::IndexedLog;
use metatl::synthetic::{self, MarkovSpec};
use metatl::{snapshot, Error, ItemId, OuterOptimizer};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidInput(_)
        | Error::UnknownItem(_)
        | Error::Parse { .. }
        | Error::Config(_)
        | Error::EmptyPopulation(_)
        | Error::NotEnoughNegatives { .. }
        | Error::ExhaustedNegatives { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn triples(raw: &[(u32, u32, u32)]) -> Vec<Triple> {
    raw.iter()
        .map(|&(h, t, n)| Triple::new(ItemId(h), ItemId(t), ItemId(n)))
        .collect()
}

#[pyclass(name = "HyperParams", from_py_object)]
#[derive(Clone)]
struct PyHyperParams {
    inner: metatl::HyperParams,
}

#[pymethods]
impl PyHyperParams {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut hp = PyHyperParams {
            inner: metatl::HyperParams::default(),
        };
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                hp.set(&key, &value)?;
            }
        }
        hp.inner.validate().map_err(to_py)?;
        Ok(hp)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let h = &mut self.inner;
        match key {
            "dim" => h.dim = value.extract()?,
            "task_lr" => h.task_lr = value.extract()?,
            "meta_lr" => h.meta_lr = value.extract()?,
            "margin" => h.margin = value.extract()?,
            "k" => h.k = value.extract()?,
            "inner_steps" => h.inner_steps = value.extract()?,
            "meta_batch" => h.meta_batch = value.extract()?,
            "negatives_per_pair" => h.negatives_per_pair = value.extract()?,
            "eval_negatives" => h.eval_negatives = value.extract()?,
            "seed" => h.seed = value.extract()?,
            "outer_optimizer" => {
                let name: String = value.extract()?;
                h.outer_optimizer = name.parse::<OuterOptimizer>().map_err(to_py)?;
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown hyperparameter {other:?}"
                )))
            }
        }
        Ok(())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn inner_steps(&self) -> usize {
        self.inner.inner_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Params", from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: model::Params,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn zeros(n_items: usize, dim: usize) -> PyResult<Self> {
        let inner = model::Params::zeros(n_items, dim).map_err(to_py)?;
        Ok(PyParams { inner })
    }

    /// Random initialisation drawn from `hp.seed`.
    #[staticmethod]
    fn init(n_items: usize, hp: &PyHyperParams) -> PyResult<Self> {
        let inner = metatl::meta::initial_params(n_items, &hp.inner).map_err(to_py)?;
        Ok(PyParams { inner })
    }

    #[staticmethod]
    fn from_parts(
        dim: usize,
        n_items: usize,
        embeddings: Vec<f64>,
        transform: Vec<f64>,
        bias: Vec<f64>,
    ) -> PyResult<Self> {
        let inner =
            model::Params::from_parts(dim, n_items, embeddings, transform, bias).map_err(to_py)?;
        Ok(PyParams { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = snapshot::load(path).map_err(to_py)?;
        Ok(PyParams { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        snapshot::save(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn embeddings(&self) -> Vec<f64> {
        self.inner.embeddings().to_vec()
    }

    fn transform(&self) -> Vec<f64> {
        self.inner.transform().to_vec()
    }

    fn bias(&self) -> Vec<f64> {
        self.inner.bias().to_vec()
    }

    fn fingerprint(&self) -> u64 {
        self.inner.fingerprint()
    }

    fn __eq__(&self, other: &PyParams) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Params(n_items={}, dim={})",
            self.inner.n_items(),
            self.inner.dim()
        )
    }
}

#[pyfunction]
fn transition_rep(params: &PyParams, head: u32, tail: u32) -> PyResult<Vec<f64>> {
    model::transition_rep(&params.inner, ItemId(head), ItemId(tail))
        .map(TransitionRep::into_inner)
        .map_err(to_py)
}

#[pyfunction]
fn aggregate(reps: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let reps: Vec<_> = reps.into_iter().map(TransitionRep::new).collect();
    model::aggregate(&reps)
        .map(TransitionRep::into_inner)
        .map_err(to_py)
}

/// Mean transition representation of `(head, tail)` pairs.
#[pyfunction]
fn support_rep(params: &PyParams, pairs: Vec<(u32, u32)>) -> PyResult<Vec<f64>> {
    let pairs: Vec<_> = pairs
        .into_iter()
        .map(|(h, t)| (ItemId(h), ItemId(t)))
        .collect();
    model::support_rep(&params.inner, &pairs)
        .map(TransitionRep::into_inner)
        .map_err(to_py)
}

#[pyfunction]
fn score(params: &PyParams, tr: Vec<f64>, head: u32, tail: u32) -> PyResult<f64> {
    model::score(
        &params.inner,
        &TransitionRep::new(tr),
        ItemId(head),
        ItemId(tail),
    )
    .map_err(to_py)
}

#[pyfunction]
fn margin_loss(
    params: &PyParams,
    margin: f64,
    tr: Vec<f64>,
    triples: Vec<(u32, u32, u32)>,
) -> PyResult<f64> {
    model::margin_loss(
        &params.inner,
        margin,
        &TransitionRep::new(tr),
        &self::triples(&triples),
    )
    .map_err(to_py)
}

/// Support loss and gradient as `(loss, {"embeddings": {item: [...]},
/// "transform": [...], "bias": [...]})`.
#[pyfunction]
fn loss_and_grad<'py>(
    py: Python<'py>,
    params: &PyParams,
    margin: f64,
    triples: Vec<(u32, u32, u32)>,
) -> PyResult<(f64, Bound<'py, PyDict>)> {
    let (loss, grads) =
        model::loss_and_grad(&params.inner, margin, &self::triples(&triples)).map_err(to_py)?;
    let emb = PyDict::new(py);
    for (item, g) in &grads.d_embeddings {
        emb.set_item(item.0, g.clone())?;
    }
    let out = PyDict::new(py);
    out.set_item("embeddings", emb)?;
    out.set_item("transform", grads.d_transform)?;
    out.set_item("bias", grads.d_bias)?;
    Ok((loss, out))
}

#[pyfunction]
fn rank_truth(scores: Vec<(u32, f64)>, truth: u32) -> PyResult<usize> {
    let scores: Vec<_> = scores.into_iter().map(|(i, s)| (ItemId(i), s)).collect();
    eval::rank_truth(&scores, ItemId(truth)).map_err(to_py)
}

/// Finite-difference check; returns `(passed, max_rel_error, summary)`.
#[pyfunction]
fn check_gradients(hp: &PyHyperParams, trials: usize) -> PyResult<(bool, f64, String)> {
    let report = gradcheck::check_gradients(&hp.inner, trials).map_err(to_py)?;
    Ok((report.passed, report.max_rel_error, report.summary()))
}

/// Synthetic cycle-chain log as `(user, item, timestamp)` rows.
#[pyfunction]
#[pyo3(signature = (n_items, n_train_users, n_test_users, noise=0.0, seed=0, seq_len_min=10, seq_len_max=20))]
fn gen_cycle_dataset(
    n_items: usize,
    n_train_users: usize,
    n_test_users: usize,
    noise: f64,
    seed: u64,
    seq_len_min: usize,
    seq_len_max: usize,
) -> PyResult<Vec<(String, String, i64)>> {
    let spec = MarkovSpec {
        n_train_users,
        n_test_users,
        noise,
        seq_len_range: (seq_len_min, seq_len_max),
        ..MarkovSpec::cycle(n_items)
    };
    let log = synthetic::gen_dataset(&spec, seed).map_err(to_py)?;
    Ok(log
        .into_iter()
        .map(|r| (r.user, r.item, r.timestamp))
        .collect())
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: SplitDataset,
}

fn parse_boundary(boundary: &str) -> PyResult<SplitBoundary> {
    boundary.parse().map_err(to_py)
}

#[pymethods]
impl PyDataset {
    /// Parse a TSV log, drop rare items and split at `split_time`.
    #[staticmethod]
    #[pyo3(signature = (path, split_time=synthetic::DEFAULT_SPLIT_TIME, min_item_count=10, boundary="test"))]
    fn load(path: &str, split_time: i64, min_item_count: usize, boundary: &str) -> PyResult<Self> {
        let inner = data::load_dataset(path, min_item_count, split_time, parse_boundary(boundary)?)
            .map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (rows, split_time=synthetic::DEFAULT_SPLIT_TIME, min_item_count=10, boundary="test"))]
    fn from_rows(
        rows: Vec<(String, String, i64)>,
        split_time: i64,
        min_item_count: usize,
        boundary: &str,
    ) -> PyResult<Self> {
        let log: Vec<_> = rows
            .into_iter()
            .map(|(u, i, t)| Interaction::new(u, i, t))
            .collect();
        let filtered = data::filter_items(&log, min_item_count);
        let inner = data::temporal_split(&filtered, split_time, parse_boundary(boundary)?)
            .map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    #[getter]
    fn n_train_users(&self) -> usize {
        self.inner.train_users.len()
    }

    #[getter]
    fn n_test_users(&self) -> usize {
        self.inner.test_users.len()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }
}

fn indexed(users: &[data::UserHistory], n_items: usize) -> PyResult<IndexedLog> {
    IndexedLog::new(users.to_vec(), n_items).map_err(to_py)
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    state: TrainState,
    log: IndexedLog,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(dataset: &PyDataset, hp: &PyHyperParams) -> PyResult<Self> {
        hp.inner.validate().map_err(to_py)?;
        let n_items = dataset.inner.n_items();
        let state = TrainState::initialize(n_items, hp.inner.clone()).map_err(to_py)?;
        let log = indexed(&dataset.inner.train_users, n_items)?;
        Ok(PyTrainer { state, log })
    }

    /// Run meta-training and return `(step, support_loss, query_loss)` per
    /// meta-step.
    fn train(
        &mut self,
        py: Python<'_>,
        epochs: usize,
        tasks_per_epoch: usize,
    ) -> PyResult<Vec<(u64, f64, f64)>> {
        let PyTrainer { state, log } = self;
        py.detach(|| {
            let mut stats = Vec::new();
            state
                .train(log, epochs, tasks_per_epoch, |s| {
                    stats.push((s.step, s.support_loss, s.query_loss))
                })
                .map(|()| stats)
        })
        .map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn params(&self) -> PyParams {
        PyParams {
            inner: self.state.params.clone(),
        }
    }
}

fn result_dict<'py>(py: Python<'py>, r: &EvalResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mrr", r.mrr)?;
    d.set_item("hit_at_1", r.hit_at_1)?;
    d.set_item("users_evaluated", r.users_evaluated)?;
    d.set_item("users_skipped", r.users_skipped)?;
    d.set_item("K", r.k)?;
    if let Some(w) = &r.warning {
        d.set_item("warning", w)?;
    }
    Ok(d)
}

/// Adapt to every test user and return MRR / Hit@1.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    params: &PyParams,
    dataset: &PyDataset,
    hp: &PyHyperParams,
) -> PyResult<Bound<'py, PyDict>> {
    if params.inner.n_items() != dataset.inner.n_items() {
        return Err(PyValueError::new_err(format!(
            "params have {} items, dataset has {}",
            params.inner.n_items(),
            dataset.inner.n_items()
        )));
    }
    let test = indexed(&dataset.inner.test_users, dataset.inner.n_items())?;
    let result = py
        .detach(|| eval::evaluate(&params.inner, &test, &hp.inner))
        .map_err(to_py)?;
    result_dict(py, &result)
}

#[pymodule]
fn metatl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHyperParams>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(transition_rep, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(support_rep, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(rank_truth, m)?)?;
    m.add_function(wrap_pyfunction!(check_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(gen_cycle_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
