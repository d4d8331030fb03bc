//! Python bindings over the core library: kernels, GP regression, the
//! two-fidelity model, UCB selection, and the benchmark campaign.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mftune_core::bayesopt::{beta_schedule, ucb_select, DesignGrid, GridDim};
use mftune_core::bench::{run_campaign, ExperimentConfig};
use mftune_core::gp::{Dataset, FitOptions, GpPosterior};
use mftune_core::kernel::KernelSpec;
use mftune_core::mfgp::{fit_ar1_hyperparameters, Ar1FitConfig, Ar1Model, Ar1Posterior};
use mftune_core::MfError;

fn to_py(err: MfError) -> PyErr {
    match &err {
        MfError::InvalidInput(_) | MfError::DimensionMismatch { .. } | MfError::Config(_) => {
            PyValueError::new_err(err.to_string())
        }
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn build_dataset(xs: Vec<Vec<f64>>, ys: Vec<f64>, noise_variance: f64) -> PyResult<Dataset> {
    let mut data = Dataset::empty(noise_variance).map_err(to_py)?;
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err(format!(
            "{} inputs but {} outputs",
            xs.len(),
            ys.len()
        )));
    }
    for (x, y) in xs.into_iter().zip(ys) {
        data.push(x, y).map_err(to_py)?;
    }
    Ok(data)
}

/// Squared-exponential covariance with per-dimension lengthscales.
#[pyclass(name = "Kernel", from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: KernelSpec,
}

#[pymethods]
impl PyKernel {
    #[staticmethod]
    fn squared_exponential(signal_variance: f64, lengthscales: Vec<f64>) -> PyResult<Self> {
        KernelSpec::squared_exponential(signal_variance, lengthscales)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    fn eval(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&x, &y).map_err(to_py)
    }

    #[getter]
    fn signal_variance(&self) -> f64 {
        self.inner.signal_variance()
    }

    #[getter]
    fn lengthscales(&self) -> Vec<f64> {
        self.inner.lengthscales().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Kernel(signal_variance={}, lengthscales={:?})",
            self.inner.signal_variance(),
            self.inner.lengthscales()
        )
    }
}

/// Gaussian-process posterior over one dataset.
#[pyclass(name = "Gp")]
struct PyGp {
    inner: GpPosterior,
}

#[pymethods]
impl PyGp {
    #[new]
    fn new(
        kernel: PyKernel,
        xs: Vec<Vec<f64>>,
        ys: Vec<f64>,
        noise_variance: f64,
    ) -> PyResult<Self> {
        let data = build_dataset(xs, ys, noise_variance)?;
        GpPosterior::fit(kernel.inner, data)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Posterior (mean, std) at one point.
    fn predict(&self, x: Vec<f64>) -> PyResult<(f64, f64)> {
        self.inner.predict(&x).map_err(to_py)
    }

    /// Adds one observation, extending the factorization.
    fn append(&mut self, x: Vec<f64>, y: f64) -> PyResult<()> {
        self.inner = self.inner.append(x, y).map_err(to_py)?;
        Ok(())
    }

    fn log_marginal_likelihood(&self) -> PyResult<f64> {
        mftune_core::gp::log_marginal_likelihood(self.inner.kernel(), self.inner.data())
            .map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }
}

/// Two-fidelity posterior: f = rho * f_low + delta.
#[pyclass(name = "Ar1")]
struct PyAr1 {
    inner: Ar1Posterior,
    rho: f64,
}

#[pymethods]
impl PyAr1 {
    #[new]
    #[pyo3(signature = (kernel_low, kernel_delta, rho, xs_low, ys_low, noise_low, xs_high, ys_high, noise_high))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kernel_low: PyKernel,
        kernel_delta: PyKernel,
        rho: f64,
        xs_low: Vec<Vec<f64>>,
        ys_low: Vec<f64>,
        noise_low: f64,
        xs_high: Vec<Vec<f64>>,
        ys_high: Vec<f64>,
        noise_high: f64,
    ) -> PyResult<Self> {
        let low = build_dataset(xs_low, ys_low, noise_low)?;
        let high = build_dataset(xs_high, ys_high, noise_high)?;
        let model =
            Ar1Model::new(rho, kernel_low.inner, kernel_delta.inner, low, high).map_err(to_py)?;
        Ar1Posterior::fit(model)
            .map(|inner| Self { inner, rho })
            .map_err(to_py)
    }

    /// High-fidelity posterior (mean, std) at one point.
    fn predict(&self, x: Vec<f64>) -> PyResult<(f64, f64)> {
        let (means, stds) = self.inner.predict_batch(std::slice::from_ref(&x)).map_err(to_py)?;
        Ok((means[0], stds[0]))
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.rho
    }
}

/// Fits rho and kernel hyperparameters from the two datasets, then returns
/// the resulting posterior.
#[pyfunction]
#[pyo3(signature = (kernel_low, kernel_delta, xs_low, ys_low, noise_low, xs_high, ys_high, noise_high, rho_default = 1.0, fit_kernels = false))]
#[allow(clippy::too_many_arguments)]
fn fit_ar1(
    kernel_low: PyKernel,
    kernel_delta: PyKernel,
    xs_low: Vec<Vec<f64>>,
    ys_low: Vec<f64>,
    noise_low: f64,
    xs_high: Vec<Vec<f64>>,
    ys_high: Vec<f64>,
    noise_high: f64,
    rho_default: f64,
    fit_kernels: bool,
) -> PyResult<PyAr1> {
    let low = build_dataset(xs_low, ys_low, noise_low)?;
    let high = build_dataset(xs_high, ys_high, noise_high)?;
    let mut cfg = Ar1FitConfig::new(kernel_low.inner, kernel_delta.inner);
    cfg.rho_default = rho_default;
    cfg.fit_kernels = fit_kernels;
    cfg.fit = FitOptions::default();
    let model = fit_ar1_hyperparameters(&low, &high, &cfg).map_err(to_py)?;
    let rho = model.rho();
    Ar1Posterior::fit(model)
        .map(|inner| PyAr1 { inner, rho })
        .map_err(to_py)
}

/// Rectangular lattice over per-dimension (min, max, count) ranges.
#[pyclass(name = "Grid")]
struct PyGrid {
    inner: DesignGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(dims: Vec<(f64, f64, usize)>) -> PyResult<Self> {
        let dims = dims
            .into_iter()
            .map(|(min, max, count)| GridDim { min, max, count })
            .collect();
        DesignGrid::new(dims).map(|inner| Self { inner }).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn point(&self, index: usize) -> PyResult<Vec<f64>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {index} out of range for grid of {}",
                self.inner.len()
            )));
        }
        Ok(self.inner.point(index).to_vec())
    }

    fn points(&self) -> Vec<Vec<f64>> {
        self.inner.points().to_vec()
    }
}

/// Confidence-width schedule for UCB over a finite domain.
#[pyfunction(name = "beta_schedule")]
fn py_beta_schedule(t: usize, domain_size: usize, delta: f64) -> PyResult<f64> {
    beta_schedule(t, domain_size, delta).map_err(to_py)
}

/// Index of the maximal mean + sqrt(beta) * std; ties go to the lowest index.
#[pyfunction(name = "ucb_select")]
fn py_ucb_select(means: Vec<f64>, stds: Vec<f64>, beta: f64) -> PyResult<usize> {
    ucb_select(&means, &stds, beta).map_err(to_py)
}

/// Runs a benchmark campaign from a TOML config string; returns per-iteration
/// aggregates as dicts. Pass an empty string for the built-in default profile.
#[pyfunction]
#[pyo3(signature = (config_toml = ""))]
fn run_benchmark(py: Python<'_>, config_toml: &str) -> PyResult<Vec<Py<PyAny>>> {
    let cfg = if config_toml.trim().is_empty() {
        ExperimentConfig::paper_default()
    } else {
        ExperimentConfig::from_toml_str(config_toml).map_err(to_py)?
    };
    let campaign = run_campaign(&cfg).map_err(to_py)?;
    let mut rows = Vec::with_capacity(campaign.aggregates.len());
    for row in &campaign.aggregates {
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("formulation", row.formulation.code())?;
        dict.set_item("iter", row.iter)?;
        dict.set_item("cum_regret_mean", row.cum_mean)?;
        dict.set_item("cum_regret_std", row.cum_std)?;
        dict.set_item("best_regret_mean", row.best_mean)?;
        dict.set_item("best_regret_std", row.best_std)?;
        dict.set_item("trials", row.trials)?;
        rows.push(dict.into_any().unbind());
    }
    Ok(rows)
}

#[pymodule]
fn mftune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyGp>()?;
    m.add_class::<PyAr1>()?;
    m.add_class::<PyGrid>()?;
    m.add_function(wrap_pyfunction!(fit_ar1, m)?)?;
    m.add_function(wrap_pyfunction!(py_beta_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(py_ucb_select, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
