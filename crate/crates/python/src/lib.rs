//! Python bindings: panels, backtests, the comparison matrix, the dynamic
//! logistic filter, the model pool and the headline metrics.

use std::collections::HashMap;
use std::path::PathBuf;

use dynmom::data::{load_panel as load_panel_csv, write_panel, ColumnMap, PanelDataset};
use dynmom::engine::{default_matrix, run_backtest as run_backtest_rs, run_matrix as run_matrix_rs, BacktestResult, Layout, RunConfig, Strategy};
use dynmom::features::LookbackSet;
use dynmom::filter::{self, FilterPrior, LambdaGrid, LaplaceMode};
use dynmom::metrics;
use dynmom::pool::{AlphaGrid, AlphaTiming, PoolState};
use dynmom::synth::{generate_synthetic, SynthSpec};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: dynmom::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(settings: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// Monthly return panel.
#[pyclass(name = "Panel", frozen)]
struct PyPanel {
    inner: PanelDataset,
}

#[pymethods]
impl PyPanel {
    #[getter]
    fn asset_ids(&self) -> Vec<String> {
        self.inner.assets().iter().map(|a| a.asset_id.clone()).collect()
    }

    /// First calendar month as `YYYY-MM`.
    #[getter]
    fn start(&self) -> String {
        self.inner.start().to_string()
    }

    #[getter]
    fn n_months(&self) -> usize {
        self.inner.calendar_len()
    }

    /// `(asset_class, first_month, returns)` of one asset.
    fn asset(&self, asset_id: &str) -> PyResult<(String, String, Vec<f64>)> {
        let a = self
            .inner
            .get(asset_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown asset `{asset_id}`")))?;
        Ok((a.asset_class.to_string(), a.start_month.to_string(), a.returns.clone()))
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        write_panel(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.assets().len()
    }

    fn __repr__(&self) -> String {
        format!("Panel({} assets, {} months from {})", self.inner.assets().len(), self.inner.calendar_len(), self.inner.start())
    }
}

#[pyfunction]
fn load_panel(path: PathBuf) -> PyResult<PyPanel> {
    Ok(PyPanel {
        inner: load_panel_csv(&path, &ColumnMap::default()).map_err(py_err)?,
    })
}

/// Synthetic panel from a JSON generator spec; returns the panel and the
/// ground truth as JSON.
#[pyfunction]
#[pyo3(signature = (spec_json, seed=0))]
fn synth(spec_json: &str, seed: u64) -> PyResult<(PyPanel, String)> {
    let spec: SynthSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (panel, truth) = generate_synthetic(&spec, seed).map_err(py_err)?;
    let truth = serde_json::to_string(&truth).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((PyPanel { inner: panel }, truth))
}

/// A finished single-strategy backtest.
#[pyclass(name = "Backtest", frozen)]
struct PyBacktest {
    result: BacktestResult,
    report_json: String,
    months: Vec<String>,
}

#[pymethods]
impl PyBacktest {
    #[getter]
    fn strategy(&self) -> String {
        self.result.strategy.to_string()
    }

    #[getter]
    fn months(&self) -> Vec<String> {
        self.months.clone()
    }

    #[getter]
    fn gross(&self) -> Vec<f64> {
        self.result.evaluation.returns.gross.clone()
    }

    #[getter]
    fn net(&self) -> Vec<f64> {
        self.result.evaluation.returns.net.clone()
    }

    #[getter]
    fn cost(&self) -> Vec<f64> {
        self.result.evaluation.returns.cost.clone()
    }

    /// Net returns scaled to the ex-post volatility target.
    #[getter]
    fn scaled(&self) -> Vec<f64> {
        self.result.evaluation.returns.scaled.clone()
    }

    #[getter]
    fn scale_factor(&self) -> f64 {
        self.result.evaluation.returns.scale_factor
    }

    #[getter]
    fn sharpe(&self) -> Option<f64> {
        self.result.report.sharpe
    }

    /// Management fee against the naive benchmark, bp per year.
    #[getter]
    fn phi(&self) -> Option<f64> {
        self.result.report.phi
    }

    #[getter]
    fn report_json(&self) -> String {
        self.report_json.clone()
    }
}

/// Runs one strategy (`dma@tvp`, `single:12`, `naive:12`, ...). `config`
/// takes the same keys as the CLI config file.
#[pyfunction]
#[pyo3(signature = (panel, strategy="dma@cp", config=None))]
fn run_backtest(py: Python<'_>, panel: &PyPanel, strategy: &str, config: Option<HashMap<String, String>>) -> PyResult<PyBacktest> {
    let mut cfg = self::config(config)?;
    cfg.strategy = Strategy::parse_with(strategy, cfg.strategy.lambda).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    let result = py.detach(|| run_backtest_rs(&panel.inner, &cfg)).map_err(py_err)?;
    let report_json = serde_json::to_string(&result.doc(&cfg)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let months = result
        .evaluation
        .returns
        .months
        .iter()
        .map(|&m| panel.inner.month(m).to_string())
        .collect();
    Ok(PyBacktest {
        result,
        report_json,
        months,
    })
}

/// Comparison table as CSV; `rows` defaults to the full matrix.
#[pyfunction]
#[pyo3(signature = (panel, rows=None, config=None, layout="standard"))]
fn run_matrix(
    py: Python<'_>,
    panel: &PyPanel,
    rows: Option<Vec<String>>,
    config: Option<HashMap<String, String>>,
    layout: &str,
) -> PyResult<String> {
    let cfg = self::config(config)?;
    let strategies = match rows {
        Some(list) => list
            .iter()
            .map(|s| Strategy::parse_with(s, cfg.strategy.lambda))
            .collect::<dynmom::Result<Vec<_>>>()
            .map_err(py_err)?,
        None => default_matrix(&cfg.lookbacks),
    };
    let layout: Layout = layout.parse().map_err(py_err)?;
    let result = py.detach(|| run_matrix_rs(&panel.inner, &cfg, &strategies, layout)).map_err(py_err)?;
    result.to_csv().map_err(py_err)
}

fn grid(lambdas: Option<Vec<f64>>) -> PyResult<LambdaGrid> {
    match lambdas {
        Some(v) => LambdaGrid::new(v).map_err(py_err),
        None => Ok(LambdaGrid::constant()),
    }
}

fn laplace_mode(name: &str) -> PyResult<LaplaceMode> {
    match name {
        "updated" => Ok(LaplaceMode::UpdatedMean),
        "prior" => Ok(LaplaceMode::PriorMean),
        other => Err(PyValueError::new_err(format!("unknown laplace mode `{other}` (updated|prior)"))),
    }
}

/// Dynamic logistic regression with discount-factor selection.
#[pyclass(name = "DynamicLogit")]
struct PyDynamicLogit {
    inner: filter::DynamicLogit,
}

#[pymethods]
impl PyDynamicLogit {
    #[new]
    #[pyo3(signature = (dim, lambdas=None, prior_scale=100.0, laplace="updated"))]
    fn new(dim: usize, lambdas: Option<Vec<f64>>, prior_scale: f64, laplace: &str) -> PyResult<Self> {
        let prior = FilterPrior::new(prior_scale).map_err(py_err)?;
        Ok(Self {
            inner: filter::DynamicLogit::new(dim, &prior, grid(lambdas)?, laplace_mode(laplace)?),
        })
    }

    /// Probability of a non-negative return given regressors `x`.
    fn forecast(&self, x: Vec<f64>) -> f64 {
        self.inner.forecast(&DVector::from_vec(x))
    }

    /// Updates with outcome `s`; returns `(lambda, log_lik)`.
    fn observe(&mut self, x: Vec<f64>, s: u8) -> PyResult<(f64, f64)> {
        let step = self.inner.observe(&DVector::from_vec(x), s).map_err(py_err)?;
        Ok((step.lambda, step.log_lik()))
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.state.mean.iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        let c = &self.inner.state.cov;
        (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect()
    }
}

/// Log of the Laplace-approximated one-step predictive likelihood.
#[pyfunction]
fn laplace_predictive(a: Vec<f64>, r: Vec<Vec<f64>>, x: Vec<f64>, s: u8) -> PyResult<f64> {
    let d = a.len();
    if r.len() != d || r.iter().any(|row| row.len() != d) {
        return Err(PyValueError::new_err(format!("covariance must be {d}x{d}")));
    }
    let r = DMatrix::from_fn(d, d, |i, j| r[i][j]);
    filter::laplace_predictive(&DVector::from_vec(a), &r, &DVector::from_vec(x), s).map_err(py_err)
}

/// All non-empty subsets of the look-backs, combined by model averaging.
#[pyclass(name = "ModelPool")]
struct PyModelPool {
    inner: PoolState,
    lambdas: LambdaGrid,
    alphas: AlphaGrid,
}

#[pymethods]
impl PyModelPool {
    #[new]
    #[pyo3(signature = (lookbacks, lambdas=None, alphas=None, prior_scale=100.0))]
    fn new(lookbacks: Vec<usize>, lambdas: Option<Vec<f64>>, alphas: Option<Vec<f64>>, prior_scale: f64) -> PyResult<Self> {
        let lookbacks = LookbackSet::new(lookbacks).map_err(py_err)?;
        let prior = FilterPrior::new(prior_scale).map_err(py_err)?;
        let alphas = match alphas {
            Some(v) => AlphaGrid::new(v).map_err(py_err)?,
            None => AlphaGrid::default(),
        };
        Ok(Self {
            inner: PoolState::new(&lookbacks, &prior).map_err(py_err)?,
            lambdas: grid(lambdas)?,
            alphas,
        })
    }

    /// Forecasts with `[1, mom_1, ..., mom_K]`, then updates with outcome
    /// `s`. Returns `(dma, dms, dms_model_id, alpha)`.
    fn step(&mut self, x: Vec<f64>, s: u8) -> PyResult<(f64, f64, u32, f64)> {
        let rec = self
            .inner
            .step(&x, s, &self.lambdas, &self.alphas, LaplaceMode::UpdatedMean, AlphaTiming::SelectedAtUpdate)
            .map_err(py_err)?;
        Ok((rec.forecast.dma, rec.forecast.dms, rec.forecast.dms_model_id, rec.alpha))
    }

    #[getter]
    fn n_models(&self) -> usize {
        self.inner.n_models()
    }

    #[getter]
    fn pi_post(&self) -> Vec<f64> {
        self.inner.pi_post.clone()
    }

    fn inclusion_probability(&self, lookback: usize) -> PyResult<f64> {
        self.inner.inclusion_probability(lookback).map_err(py_err)
    }
}

#[pyfunction]
fn max_drawdown(log_returns: Vec<f64>) -> f64 {
    metrics::max_drawdown(&log_returns)
}

#[pyfunction]
fn sharpe(log_returns: Vec<f64>) -> PyResult<f64> {
    metrics::sharpe(&log_returns).map_err(py_err)
}

/// `(monthly, bp_per_year, residual)` equating quadratic utilities of two
/// gross-return series.
#[pyfunction]
#[pyo3(signature = (gross, benchmark_gross, gamma=10.0))]
fn management_fee(gross: Vec<f64>, benchmark_gross: Vec<f64>, gamma: f64) -> PyResult<(f64, f64, f64)> {
    let fee = metrics::management_fee(&gross, &benchmark_gross, gamma).map_err(py_err)?;
    Ok((fee.monthly, fee.bps_per_year, fee.residual))
}

#[pymodule]
fn dynmom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanel>()?;
    m.add_class::<PyBacktest>()?;
    m.add_class::<PyDynamicLogit>()?;
    m.add_class::<PyModelPool>()?;
    m.add_function(wrap_pyfunction!(load_panel, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_backtest, m)?)?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_predictive, m)?)?;
    m.add_function(wrap_pyfunction!(max_drawdown, m)?)?;
    m.add_function(wrap_pyfunction!(sharpe, m)?)?;
    m.add_function(wrap_pyfunction!(management_fee, m)?)?;
    Ok(())
}
