//! Python bindings: datasets, configuration, both training stages, the
//! end-to-end pipeline, checkpoints and the metrics.
//!
//! Every library error surfaces as `lmd_py.LmdError(message, exit_code)`,
//! with the same exit code the CLI would use.

use std::path::PathBuf;

use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use lmd_core::datagen::{self, LongTailSpec};
use lmd_core::harness::{self, Checkpoint, RunConfig};
use lmd_core::icc::run_icc;
use lmd_core::metrics::{self, GroupSpec};
use lmd_core::rrl::train_stage1;
use lmd_core::{eval, seed};

pyo3::create_exception!(lmd_py, LmdError, PyException);

fn err(e: lmd_core::Error) -> PyErr {
    LmdError::new_err((e.to_string(), e.exit_code()))
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn flatten(rows: &[Vec<f64>], dim: usize) -> PyResult<Vec<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(err(lmd_core::Error::Shape(format!(
            "row of length {} where {dim} was expected",
            r.len()
        ))));
    }
    Ok(rows.concat())
}

/// A labelled feature matrix.
#[pyclass(module = "lmd_py", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl Dataset {
    /// Pareto long-tailed Gaussian classes.
    #[staticmethod]
    #[pyo3(signature = (num_classes=8, head_count=1000, imbalance_factor=100.0, feature_dim=8, noise_dims=8, class_separation=2.5, seed=0))]
    fn synthetic(
        num_classes: usize,
        head_count: usize,
        imbalance_factor: f64,
        feature_dim: usize,
        noise_dims: usize,
        class_separation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = LongTailSpec {
            num_classes,
            head_count,
            imbalance_factor,
            feature_dim,
            class_separation,
            noise_dims,
            seed,
        };
        Ok(Self {
            inner: datagen::synth_longtail(&spec).map_err(err)?,
        })
    }

    /// Binary or (by `.csv` extension) CSV file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: datagen::load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        datagen::save_dataset(&self.inner, &path).map_err(err)
    }

    /// Stratified train/val/test split, seeded as the pipeline seeds it.
    #[pyo3(signature = (seed, train=0.7, val=0.1, test=0.2))]
    fn split(&self, seed: u64, train: f64, val: f64, test: f64) -> PyResult<(Dataset, Dataset, Dataset)> {
        let ratios = datagen::SplitRatios { train, val, test };
        let (a, b, c) = datagen::split(&self.inner, ratios, seed::derive(seed, &[seed::TAG_SPLIT]))
            .map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }, Self { inner: c }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts.clone()
    }

    /// Rows as lists of floats.
    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.features_f64().chunks(self.inner.dim).map(<[f64]>::to_vec).collect()
    }
}

/// Run configuration in the flat `key = value` format.
#[pyclass(module = "lmd_py", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::load(&p).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_kv_text(text).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_kv_text()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }
}

/// Encoder, classifier and EMA teacher.
#[pyclass(module = "lmd_py", from_py_object)]
#[derive(Clone)]
struct Model {
    inner: lmd_core::diffcore::ModelState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: harness::load_checkpoint(&path).map_err(err)?.state,
        })
    }

    #[pyo3(signature = (path, stage="stage1", seed=0, config_hash=""))]
    fn save(&self, path: PathBuf, stage: &str, seed: u64, config_hash: &str) -> PyResult<()> {
        let ck = Checkpoint {
            stage: stage.into(),
            seed,
            config_hash: config_hash.into(),
            state: self.inner.clone(),
        };
        harness::save_checkpoint(&ck, &path).map_err(err)
    }

    fn predict_proba(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = flatten(&rows, self.inner.arch.input_dim)?;
        let p = self.inner.predict_proba(&x, rows.len()).map_err(err)?;
        Ok(p.chunks(self.inner.arch.num_classes).map(<[f64]>::to_vec).collect())
    }

    /// Encoder outputs.
    fn features(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = flatten(&rows, self.inner.arch.input_dim)?;
        let z = self.inner.features(&x, rows.len()).map_err(err)?;
        Ok(z.chunks(self.inner.arch.feature_dim).map(<[f64]>::to_vec).collect())
    }

    /// Report dict; groups are tertiles of `train_counts` when given.
    #[pyo3(signature = (dataset, train_counts=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        train_counts: Option<Vec<usize>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let counts = train_counts.unwrap_or_else(|| dataset.inner.class_counts.clone());
        let groups = GroupSpec::from_train_counts(&counts);
        let r = eval::evaluate(&self.inner, &dataset.inner, &groups).map_err(err)?;
        json(py, &r.to_json(0, ""))
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.arch.feature_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.arch.num_classes
    }
}

/// Stage one for `seed` under `config` (ablations and baselines applied).
#[pyfunction(name = "train_stage1")]
fn stage1<'py>(
    py: Python<'py>,
    config: &Config,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let eff = config.inner.effective(seed);
    let (state, trace) = train_stage1(&train.inner, &val.inner, &eff.stage1).map_err(err)?;
    let t = serde_json_string(&trace)?;
    Ok((Model { inner: state }, json(py, &t)?))
}

/// Stage two from a stage-one model.
#[pyfunction]
fn run_stage2<'py>(
    py: Python<'py>,
    config: &Config,
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let c2 = config
        .inner
        .effective(seed)
        .stage2
        .ok_or_else(|| err(lmd_core::Error::Config("this configuration disables stage 2".into())))?;
    let (state, trace) = run_icc(&train.inner, &val.inner, &model.inner, &c2).map_err(err)?;
    let t = serde_json_string(&trace)?;
    Ok((Model { inner: state }, json(py, &t)?))
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| err(lmd_core::Error::Validation(e.to_string())))
}

/// Every seed end to end; returns the aggregate dict.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let report = harness::run_pipeline(&config.inner).map_err(err)?;
    json(py, &report.aggregate_json())
}

#[pyfunction]
fn pareto_counts(num_classes: usize, head_count: usize, imbalance_factor: f64) -> PyResult<Vec<usize>> {
    let spec = LongTailSpec {
        num_classes,
        head_count,
        imbalance_factor,
        feature_dim: 2,
        class_separation: 1.0,
        noise_dims: 0,
        seed: 0,
    };
    datagen::pareto_counts(&spec).map_err(err)
}

#[pyfunction]
fn balanced_accuracy(y_true: Vec<usize>, y_pred: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    let c = metrics::confusion_matrix(&y_true, &y_pred, num_classes).map_err(err)?;
    Ok(metrics::balanced_accuracy(&c))
}

#[pyfunction]
fn quadratic_weighted_kappa(y_true: Vec<usize>, y_pred: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    let c = metrics::confusion_matrix(&y_true, &y_pred, num_classes).map_err(err)?;
    Ok(metrics::quadratic_weighted_kappa(&c))
}

/// Macro one-vs-rest AUC of an `N×K` score matrix.
#[pyfunction]
fn auc_ovr_macro(scores: Vec<Vec<f64>>, y_true: Vec<usize>) -> PyResult<f64> {
    let k = scores.first().map_or(0, Vec::len);
    let flat = flatten(&scores, k)?;
    metrics::auc_ovr_macro(&flat, &y_true, k).map_err(err)
}

#[pymodule]
fn lmd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LmdError", m.py().get_type::<LmdError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(stage1, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_counts, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(quadratic_weighted_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(auc_ovr_macro, m)?)?;
    Ok(())
}
