//! Forecast-quality and portfolio performance metrics.
//!
//! Return series are monthly log-returns. Annualization uses 12 periods.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Sign;

pub const PERIODS_PER_YEAR: f64 = 12.0;

/// One out-of-sample forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub asset_id: String,
    pub month: usize,
    /// Forecast probability; absent for the naive rule.
    pub shat: Option<f64>,
    pub s: u8,
    pub sign_pred: Sign,
}

impl ForecastRecord {
    pub fn sign_real(&self) -> Sign {
        Sign::of_label(self.s)
    }
}

/// Forecasts of all assets stacked as one series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastLedger {
    records: Vec<ForecastRecord>,
}

impl ForecastLedger {
    pub fn new(mut records: Vec<ForecastRecord>) -> Result<Self> {
        records.sort_by(|a, b| (a.month, &a.asset_id).cmp(&(b.month, &b.asset_id)));
        if let Some(w) = records
            .windows(2)
            .find(|w| w[0].month == w[1].month && w[0].asset_id == w[1].asset_id)
        {
            return Err(Error::Insufficient(format!(
                "duplicate forecast for {} at month {}",
                w[0].asset_id, w[0].month
            )));
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ForecastRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose month lies in `[first, last]`.
    pub fn window(&self, first: usize, last: usize) -> ForecastLedger {
        ForecastLedger {
            records: self
                .records
                .iter()
                .filter(|r| r.month >= first && r.month <= last)
                .cloned()
                .collect(),
        }
    }
}

/// Pooled hit rate `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(ledger: &ForecastLedger) -> Result<f64> {
    if ledger.is_empty() {
        return Err(Error::Insufficient("accuracy of an empty ledger".into()));
    }
    let hits = ledger
        .records()
        .iter()
        .filter(|r| r.sign_pred == r.sign_real())
        .count();
    Ok(hits as f64 / ledger.len() as f64)
}

/// Mean absolute error of forecast probabilities against labels.
pub fn mae(ledger: &ForecastLedger) -> Result<f64> {
    if ledger.is_empty() {
        return Err(Error::Insufficient("MAE of an empty ledger".into()));
    }
    let mut total = 0.0;
    for r in ledger.records() {
        let shat = r
            .shat
            .ok_or_else(|| Error::Insufficient("MAE needs probability forecasts".into()))?;
        total += (shat - f64::from(r.s)).abs();
    }
    Ok(total / ledger.len() as f64)
}

/// `1 - MAE / MAE_benchmark` over identical (asset, month) keys.
pub fn relative_mae(ledger: &ForecastLedger, benchmark: &ForecastLedger) -> Result<f64> {
    let keys = |l: &ForecastLedger| -> Vec<(usize, String)> {
        l.records().iter().map(|r| (r.month, r.asset_id.clone())).collect()
    };
    if keys(ledger) != keys(benchmark) {
        return Err(Error::Insufficient(
            "forecast ledgers cover different (asset, month) keys".into(),
        ));
    }
    Ok(1.0 - mae(ledger)? / mae(benchmark)?)
}

fn mean(series: &[f64]) -> f64 {
    series.iter().sum::<f64>() / series.len() as f64
}

/// Annualized arithmetic mean (fraction per year).
pub fn annualized_mean(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Insufficient("mean of an empty series".into()));
    }
    Ok(mean(series) * PERIODS_PER_YEAR)
}

/// Annualized sample standard deviation (fraction per year).
pub fn annualized_vol(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Insufficient("volatility needs at least two observations".into()));
    }
    if series.iter().all(|&r| r == series[0]) {
        return Ok(0.0);
    }
    let m = mean(series);
    let var = series.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (series.len() - 1) as f64;
    Ok(var.sqrt() * PERIODS_PER_YEAR.sqrt())
}

pub fn mean_vol(series: &[f64]) -> Result<(f64, f64)> {
    Ok((annualized_mean(series)?, annualized_vol(series)?))
}

/// Annualized Sharpe ratio of excess returns.
pub fn sharpe(series: &[f64]) -> Result<f64> {
    let (m, v) = mean_vol(series)?;
    if v == 0.0 {
        return Err(Error::numeric("Sharpe ratio of a zero-variance series"));
    }
    Ok(m / v)
}

/// Cumulative log-return path starting at 0 before the first month.
pub fn cumulative_path(series: &[f64]) -> Vec<f64> {
    let mut path = Vec::with_capacity(series.len() + 1);
    let mut c = 0.0;
    path.push(c);
    for r in series {
        c += r;
        path.push(c);
    }
    path
}

/// Largest peak-to-trough loss of portfolio value, as a fraction.
pub fn max_drawdown(series: &[f64]) -> f64 {
    let path = cumulative_path(series);
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &c in &path {
        peak = peak.max(c);
        worst = worst.max(1.0 - (c - peak).exp());
    }
    worst
}

/// Total log-return over the series.
pub fn accumulated(series: &[f64]) -> f64 {
    series.iter().sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManagementFee {
    /// Fee per month in gross-return units.
    pub monthly: f64,
    /// Annualized fee in basis points.
    pub bps_per_year: f64,
    /// Average utility difference left at the root.
    pub residual: f64,
}

fn fee_gap(dcm: &[f64], bench: &[f64], k: f64, phi: f64) -> f64 {
    let total: f64 = dcm
        .iter()
        .zip(bench)
        .map(|(&r, &b)| {
            let a = r - phi;
            // (a - b) - k (a^2 - b^2)
            (a - b) * (1.0 - k * (a + b))
        })
        .sum();
    total / dcm.len() as f64
}

/// Fee that equates the average quadratic utility of two gross-return
/// series, found by bisection.
pub fn management_fee(dcm_gross: &[f64], bench_gross: &[f64], gamma: f64) -> Result<ManagementFee> {
    if dcm_gross.len() != bench_gross.len() || dcm_gross.is_empty() {
        return Err(Error::Insufficient(
            "management fee needs two non-empty aligned series".into(),
        ));
    }
    let k = gamma / (2.0 * (1.0 + gamma));
    let f = |phi: f64| fee_gap(dcm_gross, bench_gross, k, phi);
    if f(0.0) == 0.0 {
        return Ok(ManagementFee {
            monthly: 0.0,
            bps_per_year: 0.0,
            residual: 0.0,
        });
    }

    // The gap is a concave quadratic in phi (linear when gamma = 0). Bracket
    // the root nearest zero between the vertex and a point beyond it.
    let vertex = if k > 0.0 {
        mean(dcm_gross) - 1.0 / (2.0 * k)
    } else {
        f64::NEG_INFINITY
    };
    let (anchor, dir) = if vertex.is_finite() {
        let top = f(vertex);
        if top < 0.0 {
            if top > -1e-15 {
                return Ok(ManagementFee {
                    monthly: vertex,
                    bps_per_year: vertex * PERIODS_PER_YEAR * 1e4,
                    residual: top,
                });
            }
            return Err(Error::numeric("no fee equates the two utilities"));
        }
        (vertex, if vertex >= 0.0 { -1.0 } else { 1.0 })
    } else {
        (0.0, if f(0.0) >= 0.0 { 1.0 } else { -1.0 })
    };
    let mut step = anchor.abs().max(0.01);
    let mut far = anchor + dir * step;
    while f(far).signum() == f(anchor).signum() && f(far) != 0.0 {
        step *= 2.0;
        if step > 1e6 {
            return Err(Error::numeric("management fee root is not bracketed"));
        }
        far = anchor + dir * step;
    }
    let (mut lo, mut hi) = if anchor < far { (anchor, far) } else { (far, anchor) };
    let mut f_lo = f(lo);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    let phi = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    Ok(ManagementFee {
        monthly: phi,
        bps_per_year: phi * PERIODS_PER_YEAR * 1e4,
        residual: f(phi),
    })
}

/// Converts monthly log-returns to gross returns.
pub fn gross_returns(log_returns: &[f64]) -> Vec<f64> {
    log_returns.iter().map(|r| r.exp()).collect()
}

/// Performance summary of one strategy over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub window: (String, String),
    pub months: usize,
    /// Percent per year.
    pub mean: f64,
    /// Percent per year; `None` with fewer than two months.
    pub vol: Option<f64>,
    pub sharpe: Option<f64>,
    /// Percent.
    pub max_dd: f64,
    /// Percent, total log-return over the window.
    pub accumulated: f64,
    /// Basis points per year against the benchmark.
    pub phi: Option<f64>,
    /// Percent per month.
    pub turnover: Option<f64>,
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub relative_mae: Option<f64>,
}

/// Inputs for a report over one window.
pub struct ReportInputs<'a> {
    pub window: (String, String),
    /// Scaled net log-returns of the strategy.
    pub series: &'a [f64],
    /// Scaled net log-returns of the fee benchmark on the same months.
    pub benchmark: Option<&'a [f64]>,
    pub gamma: f64,
    pub turnover: Option<f64>,
    pub ledger: Option<&'a ForecastLedger>,
    pub mae_benchmark: Option<&'a ForecastLedger>,
}

pub fn subperiod_report(inp: &ReportInputs<'_>) -> Result<PerfReport> {
    if inp.series.is_empty() {
        return Err(Error::Insufficient(format!(
            "window {}..{} is empty",
            inp.window.0, inp.window.1
        )));
    }
    let vol = annualized_vol(inp.series).ok();
    let phi = match inp.benchmark {
        Some(b) => Some(
            management_fee(&gross_returns(inp.series), &gross_returns(b), inp.gamma)?.bps_per_year,
        ),
        None => None,
    };
    let ledger = inp.ledger.filter(|l| !l.is_empty());
    let mae_value = ledger.and_then(|l| mae(l).ok());
    let relative = match (ledger, inp.mae_benchmark, mae_value) {
        (Some(l), Some(b), Some(_)) => relative_mae(l, b).ok(),
        _ => None,
    };
    Ok(PerfReport {
        window: inp.window.clone(),
        months: inp.series.len(),
        mean: annualized_mean(inp.series)? * 100.0,
        vol: vol.map(|v| v * 100.0),
        sharpe: sharpe(inp.series).ok(),
        max_dd: max_drawdown(inp.series) * 100.0,
        accumulated: accumulated(inp.series) * 100.0,
        phi,
        turnover: inp.turnover,
        accuracy: ledger.and_then(|l| accuracy(l).ok()),
        mae: mae_value,
        relative_mae: relative,
    })
}

/// Aligns two month-keyed series on their common months.
pub fn align(a: (&[usize], &[f64]), b: (&[usize], &[f64])) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let bm: BTreeMap<usize, f64> = b.0.iter().copied().zip(b.1.iter().copied()).collect();
    let mut months = Vec::new();
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (&m, &v) in a.0.iter().zip(a.1) {
        if let Some(&w) = bm.get(&m) {
            months.push(m);
            xa.push(v);
            xb.push(w);
        }
    }
    (months, xa, xb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rec(id: &str, month: usize, shat: f64, s: u8) -> ForecastRecord {
        ForecastRecord {
            asset_id: id.into(),
            month,
            shat: Some(shat),
            s,
            sign_pred: crate::signal::apply_cutoff(shat, 0.5),
        }
    }

    #[test]
    fn accuracy_and_mae() {
        let perfect = ForecastLedger::new(vec![rec("A", 0, 1.0, 1), rec("A", 1, 0.0, 0)]).unwrap();
        assert_eq!(accuracy(&perfect).unwrap(), 1.0);
        assert_eq!(mae(&perfect).unwrap(), 0.0);
        let half = ForecastLedger::new(vec![rec("A", 0, 0.5, 1), rec("B", 0, 0.5, 0)]).unwrap();
        assert_eq!(mae(&half).unwrap(), 0.5);
        assert_eq!(relative_mae(&half, &half).unwrap(), 0.0);
        assert!(accuracy(&ForecastLedger::default()).is_err());
        let other = ForecastLedger::new(vec![rec("A", 0, 0.5, 1)]).unwrap();
        assert!(relative_mae(&half, &other).is_err());
        assert!(ForecastLedger::new(vec![rec("A", 0, 0.5, 1), rec("A", 0, 0.4, 1)]).is_err());
    }

    #[test]
    fn mean_vol_sharpe() {
        assert!(sharpe(&[0.01; 24]).is_err());
        let s = [0.01, -0.02, 0.03, 0.015, -0.005];
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        assert_relative_eq!(sharpe(&neg).unwrap(), -sharpe(&s).unwrap(), epsilon = 1e-15);
        assert!(annualized_vol(&[0.1]).is_err());
    }

    #[test]
    fn drawdowns() {
        assert_eq!(max_drawdown(&[0.01, 0.02, 0.0, 0.03]), 0.0);
        assert_relative_eq!(max_drawdown(&[-0.10]), 1.0 - (-0.1f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(max_drawdown(&[-0.10]) * 100.0, 9.516, epsilon = 1e-3);
        assert_relative_eq!(max_drawdown(&[0.1, -0.05, -0.1, 0.3]), 1.0 - (-0.15f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn fee_identities() {
        let a = [1.01, 0.99, 1.03, 0.97, 1.005];
        let fee = management_fee(&a, &a, 10.0).unwrap();
        assert!(fee.monthly.abs() < 1e-15);
        let b = [1.0, 1.0, 1.02, 0.98, 1.0];
        let fee = management_fee(&a, &b, 0.0).unwrap();
        let diff = mean(&a) - mean(&b);
        assert!((fee.monthly - diff).abs() < 1e-12);
        assert_relative_eq!(fee.bps_per_year, diff * 12.0 * 1e4, epsilon = 1e-8);
        assert!(management_fee(&a, &b[..3], 10.0).is_err());
    }

    #[test]
    fn fee_near_utility_satiation() {
        // mean gross return close to 1/(2k): the gap has a double root near zero
        let a: Vec<f64> = [0.0, 0.0, 0.1816, -0.1416, 0.1878].iter().map(|r: &f64| r.exp()).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 0.002).collect();
        let fee = management_fee(&a, &b, 21.1).unwrap();
        assert!(fee.residual.abs() < 1e-12);
        assert!(fee.monthly > 0.0 && fee.monthly < 0.01);
    }

    #[test]
    fn report_windows() {
        let s = [0.02, -0.01, 0.03, -0.04, 0.01];
        let full = subperiod_report(&ReportInputs {
            window: ("a".into(), "b".into()),
            series: &s,
            benchmark: Some(&s),
            gamma: 10.0,
            turnover: None,
            ledger: None,
            mae_benchmark: None,
        })
        .unwrap();
        assert!(full.phi.unwrap().abs() < 1e-9);
        assert_relative_eq!(full.accumulated, 1.0, epsilon = 1e-12);
        let one = subperiod_report(&ReportInputs {
            window: ("a".into(), "a".into()),
            series: &s[..1],
            benchmark: None,
            gamma: 10.0,
            turnover: None,
            ledger: None,
            mae_benchmark: None,
        })
        .unwrap();
        assert_eq!(one.vol, None);
        assert_relative_eq!(one.mean, 24.0, epsilon = 1e-12);
        let head = accumulated(&s[..2]);
        let tail = accumulated(&s[2..]);
        assert_relative_eq!(head + tail, accumulated(&s), epsilon = 1e-15);
    }

    #[test]
    fn alignment() {
        let (m, a, b) = align((&[1, 2, 4], &[0.1, 0.2, 0.4]), (&[2, 3, 4], &[2.0, 3.0, 4.0]));
        assert_eq!(m, vec![2, 4]);
        assert_eq!(a, vec![0.2, 0.4]);
        assert_eq!(b, vec![2.0, 4.0]);
    }
}
