//! Python bindings: loss functions, config handling, stage runners and
//! checkpoint inference. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use mgkd_core::checkpoint::LoadedModel;
use mgkd_core::config::ExperimentConfig;
use mgkd_core::distill::DistillScheme;
use mgkd_core::eval::{self, CkaKernel, RepresentationMatrix};
use mgkd_core::math::{self, LabelBatch, LogitsBatch, ProbBatch, Temperature};
use mgkd_core::model::GranularitySpec;
use mgkd_core::{pipeline, Error};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Format(_) | Error::IncompatibleVersion { .. } => {
            PyValueError::new_err(msg)
        }
        Error::NotFound { .. } => PyFileNotFoundError::new_err(msg),
        Error::NumericFailure(_) => PyArithmeticError::new_err(msg),
        Error::Io(_) | Error::Json(_) => PyIOError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mgkd_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn logits(rows: Vec<Vec<f64>>) -> PyResult<LogitsBatch> {
    LogitsBatch::from_rows(&rows).py()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows<T: Copy + Into<f64>>(a: &Array2<T>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| v.into()).collect()).collect()
}

fn temp(tau: f64) -> PyResult<Temperature> {
    Temperature::new(tau).py()
}

/// `tau^2` times the batch-mean KL divergence between tempered softmaxes.
#[pyfunction]
fn hkd_loss(teacher: Vec<Vec<f64>>, student: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    math::hkd_loss(&logits(teacher)?, &logits(student)?, temp(tau)?).py()
}

#[pyfunction]
fn cross_entropy(logits_rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    math::cross_entropy(&logits(logits_rows)?, &LabelBatch::new(labels)).py()
}

#[pyfunction]
fn kl_divergence(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    math::kl_divergence(&ProbBatch::from_rows(&p).py()?, &ProbBatch::from_rows(&q).py()?).py()
}

#[pyfunction]
fn ensemble_average(a: Vec<Vec<f64>>, n: Vec<Vec<f64>>, d: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let e = math::ensemble_average(&logits(a)?, &logits(n)?, &logits(d)?).py()?;
    Ok(rows(e.values()))
}

#[pyfunction]
#[pyo3(signature = (records, fraction = 0.25))]
fn early_loss_stability(records: Vec<f64>, fraction: f64) -> PyResult<f64> {
    math::early_loss_stability(&records, fraction).py()
}

/// Raises `ValueError` unless `2 <= dim_ak < num_classes < dim_dk`.
#[pyfunction]
fn validate_spec(dim_ak: usize, num_classes: usize, dim_dk: usize) -> PyResult<()> {
    GranularitySpec::new(dim_ak, num_classes, dim_dk).py().map(|_| ())
}

#[pyfunction]
fn validate_branch_temperatures(tau_akb: f64, tau_dkb: f64) -> PyResult<()> {
    mgkd_core::self_analyze::validate_branch_temperatures(tau_akb, tau_dkb).py()
}

#[pyfunction]
#[pyo3(signature = (x, y, kernel = "linear"))]
fn cka(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, kernel: &str) -> PyResult<f64> {
    let k = match kernel {
        "linear" => CkaKernel::Linear,
        "rbf" => CkaKernel::Rbf,
        other => return Err(PyValueError::new_err(format!("unknown kernel {other:?}; valid options: {{linear, rbf}}"))),
    };
    let x = RepresentationMatrix::new(matrix(&x)?, "x").py()?;
    let y = RepresentationMatrix::new(matrix(&y)?, "y").py()?;
    eval::cka_similarity(&x, &y, k).py()
}

#[pyfunction]
fn noise_grid() -> Vec<f64> {
    eval::default_noise_grid()
}

/// A validated experiment config.
#[pyclass(name = "Config", module = "mgkd")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).py()? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::from_toml_str(text).py()? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().py()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, p: PathBuf) {
        self.inner.out_dir = p;
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Sets the distillation scheme (`gwd`, `se` or `plain`).
    fn set_scheme(&mut self, scheme: &str) -> PyResult<()> {
        let s: DistillScheme = scheme.parse().py()?;
        match self.inner.distill.as_mut() {
            Some(d) => {
                d.scheme = s;
                Ok(())
            }
            None => Err(PyValueError::new_err("config has no [distill] table")),
        }
    }
}

fn summary_json(path: &std::path::Path) -> PyResult<String> {
    std::fs::read_to_string(path).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Self-analysis for one seed (training the teacher first if needed).
/// Returns the summary as a JSON string.
#[pyfunction]
fn self_analyze(py: Python<'_>, config: &PyConfig, seed: u64) -> PyResult<String> {
    let cfg = config.inner.clone();
    let dir = py
        .detach(move || -> mgkd_core::Result<PathBuf> {
            let data = pipeline::load_data(&cfg)?;
            Ok(pipeline::self_analyze(&cfg, &data, seed, true)?.dir)
        })
        .py()?;
    summary_json(&dir.join("summary.json"))
}

/// Distillation for one seed against the stored self-analyzed teacher.
#[pyfunction]
fn distill(py: Python<'_>, config: &PyConfig, seed: u64) -> PyResult<String> {
    let cfg = config.inner.clone();
    let dir = py
        .detach(move || -> mgkd_core::Result<PathBuf> {
            let data = pipeline::load_data(&cfg)?;
            Ok(pipeline::distill(&cfg, &data, seed)?.dir)
        })
        .py()?;
    summary_json(&dir.join("summary.json"))
}

/// Any model checkpoint: plain network, self-analyzed teacher or student.
#[pyclass(name = "Model", module = "mgkd")]
struct PyModel {
    inner: LoadedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: LoadedModel::load(&path).py()? })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner {
            LoadedModel::Network(_) => "network",
            LoadedModel::Teacher(_) => "teacher",
            LoadedModel::Student(_) => "student",
        }
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.as_native().num_classes()
    }

    /// Native-head logits for a batch of flattened inputs.
    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(&x)?.mapv(|v| v as f32);
        Ok(rows(&self.inner.as_native().native_logits(&x).py()?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let l = self.logits(x)?;
        Ok(logits(l)?.argmax())
    }
}

#[pymodule]
fn mgkd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hkd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_average, m)?)?;
    m.add_function(wrap_pyfunction!(early_loss_stability, m)?)?;
    m.add_function(wrap_pyfunction!(validate_spec, m)?)?;
    m.add_function(wrap_pyfunction!(validate_branch_temperatures, m)?)?;
    m.add_function(wrap_pyfunction!(cka, m)?)?;
    m.add_function(wrap_pyfunction!(noise_grid, m)?)?;
    m.add_function(wrap_pyfunction!(self_analyze, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
