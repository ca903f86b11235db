//! Python bindings for the spectral lab.

use num_complex::Complex64;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use nlslab_core::functionals as fun;
use nlslab_core::resonance as res;
use nlslab_core::sampler::{self, CutoffSpec, EnsembleSpec};
use nlslab_core::spectral;
use nlslab_core::transport::{self, Observable, TransportMode};
use nlslab_core::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Model parameters `(p, s, N)` with integrator settings.
#[pyclass(name = "ModelParams", from_py_object)]
#[derive(Clone)]
struct PyModelParams {
    inner: spectral::ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (p, s, n, tol=None, sigma=None, linear=false))]
    fn new(p: usize, s: f64, n: usize, tol: Option<f64>, sigma: Option<f64>, linear: bool) -> PyResult<Self> {
        let mut inner = spectral::ModelParams::new(p, s, n).map_err(to_py)?;
        if let Some(t) = tol {
            inner.tol = t;
        }
        if let Some(v) = sigma {
            inner.sigma = v;
        }
        inner.linear_diagnostic = linear;
        inner.validate().map_err(to_py)?;
        Ok(PyModelParams { inner })
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p
    }
    #[getter]
    fn s(&self) -> f64 {
        self.inner.s
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }
    #[getter]
    fn tol(&self) -> f64 {
        self.inner.tol
    }
    #[getter]
    fn grid_size(&self) -> usize {
        self.inner.grid_size
    }

    fn __repr__(&self) -> String {
        let m = &self.inner;
        format!("ModelParams(p={}, s={}, n={}, sigma={}, tol={:e})", m.p, m.s, m.n, m.sigma, m.tol)
    }
}

/// Fourier coefficients `c_n`, `|n| ≤ n_ambient`.
#[pyclass(name = "FourierState", from_py_object)]
#[derive(Clone)]
struct PyFourierState {
    inner: spectral::FourierState,
}

#[pymethods]
impl PyFourierState {
    /// Coefficients ordered `n = -n_ambient ..= n_ambient`.
    #[new]
    fn new(coeffs: Vec<Complex64>) -> PyResult<Self> {
        if coeffs.len() % 2 == 0 {
            return Err(PyValueError::new_err("need an odd number of coefficients"));
        }
        let n = coeffs.len() / 2;
        Ok(PyFourierState {
            inner: spectral::FourierState::from_coeffs(n, coeffs).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_ambient(&self) -> usize {
        self.inner.n_ambient()
    }

    fn coeffs(&self) -> Vec<Complex64> {
        self.inner.coeffs().to_vec()
    }

    fn get(&self, n: i64) -> Complex64 {
        self.inner.get(n)
    }

    fn sobolev_norm(&self, r: f64) -> f64 {
        spectral::sobolev_norm(&self.inner, r)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mut buf = Vec::new();
        self.inner.write_binary(&mut buf).map_err(to_py)?;
        Ok(PyBytes::new(py, &buf))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyFourierState {
            inner: spectral::FourierState::read_binary(data).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.coeffs().len()
    }

    fn __eq__(&self, other: &PyFourierState) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("FourierState(n_ambient={})", self.inner.n_ambient())
    }
}

fn wrap(inner: spectral::FourierState) -> PyFourierState {
    PyFourierState { inner }
}

/// Sample `index` of the `μ_s` ensemble with `master_seed`.
#[pyfunction]
fn sample(seed: u64, index: usize, s: f64, n_ambient: usize) -> PyResult<PyFourierState> {
    let spec = EnsembleSpec::new(seed, index + 1, s, n_ambient).map_err(to_py)?;
    Ok(wrap(sampler::sample_mu_s(&spec, index).map_err(to_py)?))
}

/// `Φ^N_t u`.
#[pyfunction]
fn evolve(py: Python<'_>, u: &PyFourierState, t: f64, params: &PyModelParams) -> PyResult<PyFourierState> {
    let (u, p) = (u.inner.clone(), params.inner.clone());
    py.detach(move || nlslab_core::flow::evolve(&u, t, &p)).map(wrap).map_err(to_py)
}

#[pyfunction]
fn mass(u: &PyFourierState) -> f64 {
    fun::mass(&u.inner)
}

#[pyfunction]
fn hamiltonian(u: &PyFourierState, params: &PyModelParams) -> PyResult<f64> {
    fun::hamiltonian(&u.inner, &params.inner).map_err(to_py)
}

#[pyfunction]
fn renormalized_energy(u: &PyFourierState, params: &PyModelParams) -> PyResult<f64> {
    fun::renormalized_energy(&u.inner, &params.inner).map_err(to_py)
}

#[pyfunction]
fn energy_correction(u: &PyFourierState, params: &PyModelParams) -> PyResult<f64> {
    fun::energy_correction(&u.inner, &params.inner).map_err(to_py)
}

#[pyfunction]
fn modified_energy(u: &PyFourierState, params: &PyModelParams) -> PyResult<f64> {
    fun::modified_energy(&u.inner, &params.inner).map_err(to_py)
}

#[pyfunction]
fn modified_energy_derivative(u: &PyFourierState, params: &PyModelParams) -> PyResult<f64> {
    fun::modified_energy_derivative(&u.inner, &params.inner).map_err(to_py)
}

/// `(M, T, N)` with the bracket symbol.
#[pyfunction]
fn multilinear_forms(u: &PyFourierState, params: &PyModelParams) -> PyResult<(Complex64, Complex64, Complex64)> {
    let v = fun::multilinear_forms(&u.inner, &params.inner, fun::Symbol::Bracket).map_err(to_py)?;
    Ok((v.resonant, v.nonresonant, v.nonlinear))
}

#[pyfunction]
fn log_density_g(u: &PyFourierState, t: f64, params: &PyModelParams) -> PyResult<f64> {
    fun::log_density_g(&u.inner, t, &params.inner).map_err(to_py)
}

#[pyfunction]
fn log_density_f(u: &PyFourierState, t: f64, params: &PyModelParams) -> PyResult<f64> {
    fun::log_density_f(&u.inner, t, &params.inner).map_err(to_py)
}

#[pyfunction]
fn normal_form_identity_check<'py>(
    py: Python<'py>,
    u: &PyFourierState,
    params: &PyModelParams,
) -> PyResult<Bound<'py, PyAny>> {
    let c = fun::normal_form_identity_check(&u.inner, &params.inner).map_err(to_py)?;
    json_to_py(py, &c)
}

#[pyfunction]
fn sp_threshold(p: usize) -> PyResult<f64> {
    res::sp_threshold(p).map_err(to_py)
}

#[pyfunction]
fn omega_lower_bound_scan<'py>(py: Python<'py>, p: usize, k: i64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| res::omega_lower_bound_scan(p, k)).map_err(to_py)?;
    json_to_py(py, &r)
}

#[pyfunction]
fn remark_scan<'py>(py: Python<'py>, p: usize, k: i64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| res::remark_scan(p, k)).map_err(to_py)?;
    json_to_py(py, &r)
}

#[pyfunction]
fn psi_upper_bound_scan<'py>(py: Python<'py>, p: usize, s: f64, k: i64) -> PyResult<Bound<'py, PyAny>> {
    let r = py.detach(|| res::psi_upper_bound_scan(p, s, k)).map_err(to_py)?;
    json_to_py(py, &r)
}

/// Transport battery report as a dict; `cutoff_radius=None` uses twice the median energy.
#[pyfunction]
#[pyo3(signature = (params, times, seed, samples, modes=None, observables=None, cutoff_radius=None))]
#[allow(clippy::too_many_arguments)]
fn transport_battery<'py>(
    py: Python<'py>,
    params: &PyModelParams,
    times: Vec<f64>,
    seed: u64,
    samples: usize,
    modes: Option<Vec<String>>,
    observables: Option<Vec<String>>,
    cutoff_radius: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = params.inner.clone();
    let modes: Vec<TransportMode> = match modes {
        Some(m) => m.iter().map(|id| TransportMode::from_id(id)).collect::<Result<_, _>>().map_err(to_py)?,
        None => TransportMode::ALL.to_vec(),
    };
    let observables: Vec<Observable> = match observables {
        Some(o) => o.iter().map(|id| Observable::from_id(id)).collect::<Result<_, _>>().map_err(to_py)?,
        None => Observable::ALL.to_vec(),
    };
    let battery = py
        .detach(move || -> nlslab_core::Result<_> {
            let spec = EnsembleSpec::new(seed, samples, params.s, params.n)?;
            let cut = if modes.iter().any(|m| *m != TransportMode::Plain) {
                let r = match cutoff_radius {
                    Some(r) => r,
                    None => transport::default_cutoff_radius(&params, &spec)?,
                };
                Some(CutoffSpec::new(r, params.n, params.s)?)
            } else {
                None
            };
            transport::transport_battery(&params, &times, &observables, &modes, &spec, cut.as_ref())
        })
        .map_err(to_py)?;
    json_to_py(py, &battery)
}

/// Runs the command-line interface with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(move || nlslab_core::cli::run(std::iter::once("nlslab".to_string()).chain(args)))
}

#[pymodule]
fn nlslab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", nlslab_core::CODE_VERSION)?;
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyFourierState>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(mass, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian, m)?)?;
    m.add_function(wrap_pyfunction!(renormalized_energy, m)?)?;
    m.add_function(wrap_pyfunction!(energy_correction, m)?)?;
    m.add_function(wrap_pyfunction!(modified_energy, m)?)?;
    m.add_function(wrap_pyfunction!(modified_energy_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(multilinear_forms, m)?)?;
    m.add_function(wrap_pyfunction!(log_density_g, m)?)?;
    m.add_function(wrap_pyfunction!(log_density_f, m)?)?;
    m.add_function(wrap_pyfunction!(normal_form_identity_check, m)?)?;
    m.add_function(wrap_pyfunction!(sp_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(omega_lower_bound_scan, m)?)?;
    m.add_function(wrap_pyfunction!(remark_scan, m)?)?;
    m.add_function(wrap_pyfunction!(psi_upper_bound_scan, m)?)?;
    m.add_function(wrap_pyfunction!(transport_battery, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
