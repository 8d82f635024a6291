//! Python bindings. Reports come back as plain dicts and lists.

use mcmc::chain::{run_chain, ChainError, SampleMatrix};
use mcmc::estimators::{
    batch_means_cov, confidence_region, region_volume, BatchPlan, ConfidenceRegion, EstimatorError,
    EstimatorReport, DEFAULT_KAPPA,
};
use mcmc::experiment::{
    cmd_regen_demo, cmd_run_fixed, cmd_run_stop, ExperimentConfig, ExperimentError, Mode,
    RegenChain, SamplerSpec,
};
use mcmc::numkit::{self, stream, NumError};
use mcmc::stopping::{run_until_stop, Scaling, StopConfig, StopError};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

fn estimator_err(e: EstimatorError) -> PyErr {
    match e {
        EstimatorError::InvalidArgument(_)
        | EstimatorError::TooFewSamples { .. }
        | EstimatorError::TooFewBatches { .. }
        | EstimatorError::InsufficientLag { .. } => value_err(e),
        _ => PyArithmeticError::new_err(e.to_string()),
    }
}

fn num_err(e: NumError) -> PyErr {
    PyArithmeticError::new_err(e.to_string())
}

fn chain_err(e: ChainError) -> PyErr {
    value_err(e)
}

fn stop_err(e: StopError) -> PyErr {
    match e {
        StopError::InvalidConfig(_) => value_err(e),
        _ => PyArithmeticError::new_err(e.to_string()),
    }
}

/// Serializes through JSON into Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Recorded chain output: `n` rows of `d` values with cycle length `k`.
#[pyclass(name = "SampleMatrix", module = "cyclic_mcmc", frozen)]
struct PySampleMatrix {
    inner: SampleMatrix,
}

#[pymethods]
impl PySampleMatrix {
    #[new]
    #[pyo3(signature = (rows, k = 1, phase_offset = 1))]
    fn new(rows: Vec<Vec<f64>>, k: usize, phase_offset: usize) -> PyResult<Self> {
        SampleMatrix::with_cycle(&rows, k, phase_offset)
            .map(|inner| Self { inner })
            .map_err(chain_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(<[f64]>::to_vec).collect()
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mean()
    }

    fn phase_counts(&self) -> Vec<usize> {
        self.inner.phase_counts()
    }

    fn prefix(&self, m: usize) -> PyResult<Self> {
        if m > self.inner.n() {
            return Err(value_err(format!(
                "prefix {m} exceeds n = {}",
                self.inner.n()
            )));
        }
        Ok(Self {
            inner: self.inner.prefix(m),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "SampleMatrix(n={}, d={}, k={})",
            self.inner.n(),
            self.inner.d(),
            self.inner.k()
        )
    }
}

/// Batch-means confidence ellipsoid.
#[pyclass(name = "ConfidenceRegion", module = "cyclic_mcmc", frozen)]
struct PyConfidenceRegion {
    inner: ConfidenceRegion,
}

#[pymethods]
impl PyConfidenceRegion {
    #[getter]
    fn center(&self) -> Vec<f64> {
        self.inner.center.clone()
    }

    #[getter]
    fn shape(&self) -> Vec<Vec<f64>> {
        self.inner.shape.matrix().to_rows()
    }

    #[getter]
    fn radius2(&self) -> f64 {
        self.inner.radius2
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    fn contains(&self, x: Vec<f64>) -> PyResult<bool> {
        if x.len() != self.inner.dim() {
            return Err(value_err(format!(
                "point has {} entries, region has dimension {}",
                x.len(),
                self.inner.dim()
            )));
        }
        Ok(self.inner.contains(&x))
    }

    fn volume(&self) -> f64 {
        region_volume(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "ConfidenceRegion(center={:?}, radius2={:.4e}, alpha={})",
            self.inner.center, self.inner.radius2, self.inner.alpha
        )
    }
}

fn sampler_spec(kind: &str, k1: usize, a: f64, b: f64) -> PyResult<SamplerSpec> {
    match kind {
        "curve" => Ok(SamplerSpec::Curve { k1 }),
        "lmm" => Ok(SamplerSpec::Lmm { data: None, k1 }),
        "flip" => Ok(SamplerSpec::Flip { a, b }),
        other => Err(value_err(format!(
            "unknown sampler `{other}`; expected curve, lmm or flip"
        ))),
    }
}

/// Runs one chain of a reference sampler.
#[pyfunction]
#[pyo3(signature = (sampler, n, seed = 0, k1 = 3, burn_in = 0, a = 0.25, b = 0.5))]
#[allow(clippy::too_many_arguments)]
fn run_sampler(
    py: Python<'_>,
    sampler: &str,
    n: usize,
    seed: u64,
    k1: usize,
    burn_in: usize,
    a: f64,
    b: f64,
) -> PyResult<PySampleMatrix> {
    let built = sampler_spec(sampler, k1, a, b)?
        .build()
        .map_err(experiment_err)?;
    let inner = py
        .detach(|| {
            run_chain(
                &built,
                built.initial_state(),
                n,
                burn_in,
                &mut stream(seed, 0),
            )
        })
        .map_err(chain_err)?;
    Ok(PySampleMatrix { inner })
}

/// Mean, sample and batch-means covariances, ESS and TESS.
#[pyfunction]
#[pyo3(signature = (samples, kappa = DEFAULT_KAPPA))]
fn estimate<'py>(
    py: Python<'py>,
    samples: &PySampleMatrix,
    kappa: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = EstimatorReport::compute(&samples.inner, kappa).map_err(estimator_err)?;
    to_py(py, &report)
}

/// Batch-means estimate of the asymptotic covariance.
#[pyfunction]
#[pyo3(signature = (samples, kappa = DEFAULT_KAPPA, batch_len = None))]
fn batch_means(
    samples: &PySampleMatrix,
    kappa: f64,
    batch_len: Option<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let n = samples.inner.n();
    let plan = match batch_len {
        Some(b) => BatchPlan::with_batch_len(n, b, kappa),
        None => BatchPlan::new(n, kappa),
    }
    .map_err(estimator_err)?;
    let cov = batch_means_cov(&samples.inner, &plan).map_err(estimator_err)?;
    Ok(cov.matrix().to_rows())
}

/// `1 − alpha` confidence region from batch means.
#[pyfunction]
#[pyo3(signature = (samples, alpha = 0.1, kappa = DEFAULT_KAPPA))]
fn region(samples: &PySampleMatrix, alpha: f64, kappa: f64) -> PyResult<PyConfidenceRegion> {
    let plan = BatchPlan::new(samples.inner.n(), kappa).map_err(estimator_err)?;
    confidence_region(&samples.inner, &plan, alpha)
        .map(|inner| PyConfidenceRegion { inner })
        .map_err(estimator_err)
}

/// Runs a reference sampler until the fixed-volume rule stops it.
#[pyfunction]
#[pyo3(signature = (
    sampler, epsilon, alpha = 0.1, seed = 0, k1 = 3, n0 = 1000,
    scaling = "det_psi", check_growth = 1.2, max_n = None, kappa = DEFAULT_KAPPA,
))]
#[allow(clippy::too_many_arguments)]
fn run_until_stopped<'py>(
    py: Python<'py>,
    sampler: &str,
    epsilon: f64,
    alpha: f64,
    seed: u64,
    k1: usize,
    n0: usize,
    scaling: &str,
    check_growth: f64,
    max_n: Option<usize>,
    kappa: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let scaling = match scaling {
        "det_psi" => Scaling::DetPsi,
        "unit" => Scaling::Unit,
        other => return Err(value_err(format!("unknown scaling `{other}`"))),
    };
    let cfg = StopConfig {
        n0,
        scaling,
        check_growth,
        max_n,
        kappa,
        ..StopConfig::new(alpha, epsilon)
    };
    let built = sampler_spec(sampler, k1, 0.25, 0.5)?
        .build()
        .map_err(experiment_err)?;
    let report = py
        .detach(|| run_until_stop(&built, built.initial_state(), &cfg, stream(seed, 0)))
        .map_err(stop_err)?;
    to_py(py, &report)
}

/// Runs a whole experiment described in TOML and returns its summary.
#[pyfunction]
#[pyo3(signature = (config, cache_dir = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &str,
    cache_dir: Option<std::path::PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExperimentConfig::from_toml(config).map_err(experiment_err)?;
    let out = py
        .detach(|| match cfg.mode {
            Mode::Fixed => cmd_run_fixed(&cfg, cache_dir.as_deref()),
            Mode::Stop => cmd_run_stop(&cfg, cache_dir.as_deref()),
        })
        .map_err(experiment_err)?;
    to_py(py, &out)
}

/// Split-chain demo: `three_state`, `iid` or `flip`.
#[pyfunction]
#[pyo3(signature = (chain = "three_state", steps = 1_000_000, seed = 0))]
fn regen_demo<'py>(
    py: Python<'py>,
    chain: &str,
    steps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let chain = match chain {
        "three_state" => RegenChain::ThreeState,
        "iid" => RegenChain::Iid,
        "flip" => RegenChain::Flip,
        other => return Err(value_err(format!("unknown chain `{other}`"))),
    };
    let rep = py
        .detach(|| cmd_regen_demo(chain, steps, seed))
        .map_err(experiment_err)?;
    to_py(py, &rep)
}

#[pyfunction]
fn chisq_quantile(p: f64, dof: usize) -> PyResult<f64> {
    numkit::chisq_quantile(p, dof).map_err(num_err)
}

#[pyfunction]
fn hotelling_t2_quantile(p: f64, d: usize, df: usize) -> PyResult<f64> {
    numkit::hotelling_t2_quantile(p, d, df).map_err(num_err)
}

/// Minimum ESS at which the stopping rule can hold.
#[pyfunction]
fn ess_threshold(alpha: f64, d: usize, epsilon: f64) -> PyResult<f64> {
    mcmc::stopping::ess_threshold(alpha, d, epsilon).map_err(stop_err)
}

#[pymodule]
#[pyo3(name = "cyclic_mcmc")]
fn cyclic_mcmc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySampleMatrix>()?;
    m.add_class::<PyConfidenceRegion>()?;
    m.add_function(wrap_pyfunction!(run_sampler, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(batch_means, m)?)?;
    m.add_function(wrap_pyfunction!(region, m)?)?;
    m.add_function(wrap_pyfunction!(run_until_stopped, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(regen_demo, m)?)?;
    m.add_function(wrap_pyfunction!(chisq_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(hotelling_t2_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(ess_threshold, m)?)?;
    m.add("SAMPLERS", PyList::new(m.py(), ["curve", "lmm", "flip"])?)?;
    m.add("DEFAULT_KAPPA", DEFAULT_KAPPA)?;
    Ok(())
}
