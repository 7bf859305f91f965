//! Python bindings: markets, coverage and revenue, the fair solver, the
//! simulator and the batch commands.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use fairbid::cli::{self, Cli, Command, CommonArgs};
use fairbid::config::MarketConfig;
use fairbid::coverage::{coverage_of_shift, revenue_of_shift};
use fairbid::market::validate;
use fairbid::outer_solver::{self, OuterSolverConfig};
use fairbid::simulator::{self, MechanismSummary};
use fairbid::{FairnessSpec, MarketInstance, Matrix, ShiftMatrix};

create_exception!(fairbid_py, FairbidError, PyException);
create_exception!(fairbid_py, InfeasibleError, FairbidError);

fn to_py(e: fairbid::FairbidError) -> PyErr {
    match e {
        fairbid::FairbidError::Infeasible(msg) => InfeasibleError::new_err(msg),
        other => FairbidError::new_err(other.to_string()),
    }
}

fn to_object<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

#[derive(Serialize)]
struct SolveOutput {
    alpha: Vec<Vec<f64>>,
    coverage: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    revenue: f64,
    iterations: usize,
    best_iter: usize,
    converged: bool,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct SweepPoint {
    ell: f64,
    kappa: f64,
    d_tv: f64,
    slift: f64,
    revenue_f: f64,
    revenue_m: f64,
    converged: bool,
}

/// An auction market: per-type probabilities and per-cell distributions.
#[pyclass(frozen, module = "fairbid_py")]
struct Market {
    config: MarketConfig,
    inner: MarketInstance,
}

impl Market {
    fn from_config(config: MarketConfig) -> PyResult<Self> {
        let inner = config.build_market().map_err(to_py)?;
        Ok(Market { config, inner })
    }

    fn shift(&self, alpha: Option<Vec<Vec<f64>>>) -> PyResult<ShiftMatrix> {
        match alpha {
            Some(rows) => ShiftMatrix::gauge_fixed(&matrix(rows)?).map_err(to_py),
            None => Ok(ShiftMatrix::zeros(self.inner.n(), self.inner.m())),
        }
    }

    fn spec(&self, lower: Option<Vec<Vec<f64>>>, upper: Option<Vec<Vec<f64>>>) -> PyResult<FairnessSpec> {
        if lower.is_none() && upper.is_none() {
            return self.config.fairness_spec().map_err(to_py);
        }
        let (n, m) = (self.inner.n(), self.inner.m());
        let lower = lower.map(matrix).transpose()?.unwrap_or_else(|| Matrix::zeros(n, m));
        let upper = upper.map(matrix).transpose()?.unwrap_or_else(|| Matrix::filled(n, m, 1.0));
        FairnessSpec::new(lower, upper, vec![true; n]).map_err(to_py)
    }
}

#[pymethods]
impl Market {
    /// Reads a JSON or TOML market file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_config(MarketConfig::load(path).map_err(to_py)?)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let config = serde_json::from_str(text).map_err(|e| FairbidError::new_err(e.to_string()))?;
        Self::from_config(config)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn advertisers(&self) -> Vec<String> {
        self.inner.advertisers().to_vec()
    }

    #[getter]
    fn type_prob(&self) -> Vec<f64> {
        self.inner.type_prob().to_vec()
    }

    /// Exact coverage `q[i][j]` under shifts `alpha` (zero by default).
    #[pyo3(signature = (alpha=None))]
    fn coverage(&self, alpha: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let a = self.shift(alpha)?;
        Ok(coverage_of_shift(&self.inner, &a).map_err(to_py)?.matrix().to_rows())
    }

    /// Expected virtual surplus under shifts `alpha` (zero by default).
    #[pyo3(signature = (alpha=None))]
    fn revenue(&self, alpha: Option<Vec<Vec<f64>>>) -> PyResult<f64> {
        let a = self.shift(alpha)?;
        revenue_of_shift(&self.inner, &a).map_err(to_py)
    }

    /// Violation messages for the given bounds, or the file's own bounds.
    #[pyo3(signature = (lower=None, upper=None))]
    fn validate(&self, py: Python<'_>, lower: Option<Vec<Vec<f64>>>, upper: Option<Vec<Vec<f64>>>) -> PyResult<Py<PyAny>> {
        let spec = self.spec(lower, upper)?;
        let report = validate(&self.inner, &spec).map_err(to_py)?;
        to_object(py, &report.violations)
    }

    /// Revenue-optimal shifts subject to coverage bounds.
    #[pyo3(signature = (lower=None, upper=None, epsilon=1e-4, max_iters=None))]
    fn solve(
        &self,
        py: Python<'_>,
        lower: Option<Vec<Vec<f64>>>,
        upper: Option<Vec<Vec<f64>>>,
        epsilon: f64,
        max_iters: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let spec = self.spec(lower, upper)?;
        let report = validate(&self.inner, &spec).map_err(to_py)?;
        if let Some(v) = report.violations.iter().find(|v| v.infeasible) {
            return Err(InfeasibleError::new_err(v.message.clone()));
        }
        let cfg = OuterSolverConfig {
            epsilon,
            max_iters,
            ..Default::default()
        };
        let res = py.detach(|| outer_solver::solve(&self.inner, &spec, &cfg)).map_err(to_py)?;
        let out = SolveOutput {
            alpha: res.alpha.matrix().to_rows(),
            coverage: res.coverage.matrix().to_rows(),
            target: res.target.matrix().to_rows(),
            revenue: res.revenue,
            iterations: res.iterations,
            best_iter: res.best_iter,
            converged: res.converged,
            warnings: report.violations.into_iter().map(|v| v.message).collect(),
        };
        to_object(py, &out)
    }

    /// Monte-Carlo run of the shifted auction.
    #[pyo3(signature = (alpha=None, samples=100_000, seed=0))]
    fn simulate(&self, py: Python<'_>, alpha: Option<Vec<Vec<f64>>>, samples: u64, seed: u64) -> PyResult<Py<PyAny>> {
        let a = self.shift(alpha)?;
        let report = py.detach(|| simulator::simulate(&self.inner, &a, samples, seed)).map_err(to_py)?;
        to_object(py, &report)
    }

    /// Exact fairness metrics for a uniform lower bound on `points` values
    /// of `ell` in `[0, ell_max]`.
    #[pyo3(signature = (ell_max=0.5, points=11, epsilon=1e-4))]
    fn sweep(&self, py: Python<'_>, ell_max: f64, points: usize, epsilon: f64) -> PyResult<Py<PyAny>> {
        let market = &self.inner;
        let rows = py
            .detach(|| -> fairbid::Result<Vec<SweepPoint>> {
                let zero = ShiftMatrix::zeros(market.n(), market.m());
                let reference = MechanismSummary::exact(&coverage_of_shift(market, &zero)?, revenue_of_shift(market, &zero)?);
                let cfg = OuterSolverConfig {
                    epsilon,
                    ..Default::default()
                };
                cli::ell_grid(points, ell_max)
                    .into_iter()
                    .map(|ell| {
                        let spec = FairnessSpec::uniform_lower(market.n(), market.m(), ell);
                        let res = outer_solver::solve(market, &spec, &cfg)?;
                        let mt = simulator::metrics(&reference, &MechanismSummary::exact(&res.coverage, res.revenue))?;
                        Ok(SweepPoint {
                            ell,
                            kappa: mt.kappa,
                            d_tv: mt.d_tv,
                            slift: mt.slift,
                            revenue_f: res.revenue,
                            revenue_m: reference.revenue,
                            converged: res.converged,
                        })
                    })
                    .collect()
            })
            .map_err(to_py)?;
        to_object(py, &rows)
    }

    fn __repr__(&self) -> String {
        format!("Market(n={}, m={}, advertisers={:?})", self.inner.n(), self.inner.m(), self.inner.advertisers())
    }
}

/// `kappa`, `d_tv` and `slift` of a fair mechanism against a reference.
#[pyfunction]
fn fairness_metrics(
    py: Python<'_>,
    coverage_m: Vec<Vec<f64>>,
    revenue_m: f64,
    coverage_f: Vec<Vec<f64>>,
    revenue_f: f64,
) -> PyResult<Py<PyAny>> {
    let m = MechanismSummary {
        coverage: matrix(coverage_m)?,
        revenue: revenue_m,
    };
    let f = MechanismSummary {
        coverage: matrix(coverage_f)?,
        revenue: revenue_f,
    };
    to_object(py, &simulator::metrics(&m, &f).map_err(to_py)?)
}

/// Runs a batch command (`solve`, `sweep`, `simulate`, `ingest`,
/// `validate`) on a run file and returns its exit code.
#[pyfunction]
#[pyo3(signature = (command, config, out=None, seed=None, samples=None, jobs=None, ell_grid=None))]
fn run_command(
    py: Python<'_>,
    command: &str,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    samples: Option<u64>,
    jobs: Option<usize>,
    ell_grid: Option<usize>,
) -> PyResult<i32> {
    let args = CommonArgs {
        config,
        out,
        seed,
        samples,
        jobs,
        ell_grid,
    };
    let command = match command {
        "solve" => Command::Solve(args),
        "sweep" => Command::Sweep(args),
        "simulate" => Command::Simulate(args),
        "ingest" => Command::Ingest(args),
        "validate" => Command::Validate(args),
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    };
    Ok(py.detach(|| cli::run(Cli { command })))
}

#[pymodule]
fn fairbid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FairbidError", m.py().get_type::<FairbidError>())?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add_class::<Market>()?;
    m.add_function(wrap_pyfunction!(fairness_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
