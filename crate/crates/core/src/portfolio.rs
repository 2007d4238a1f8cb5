//! Volatility-targeted time-series momentum portfolios, trading costs,
//! turnover and ex-post volatility scaling.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AssetClass;
use crate::error::{Error, Result};
use crate::metrics;
use crate::signal::Sign;

/// Sign of the naive momentum rule: long when past cumulative return is non-negative.
pub fn naive_sign(momentum: f64) -> Sign {
    if momentum >= 0.0 {
        Sign::Long
    } else {
        Sign::Short
    }
}

/// Leverage that targets `sigma_target` given ex-ante volatility `sigma_ante`.
pub fn position_weight(sigma_target: f64, sigma_ante: f64) -> f64 {
    sigma_target / sigma_ante
}

pub fn asset_strategy_return(sign: Sign, sigma_target: f64, sigma_ante: f64, r: f64) -> f64 {
    sign.value() * position_weight(sigma_target, sigma_ante) * r
}

/// One asset's position in one month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub asset_id: String,
    pub asset_class: AssetClass,
    pub sign: Sign,
    pub weight: f64,
    /// Realized log-return of the asset over the month.
    pub ret: f64,
}

impl PositionRow {
    pub fn exposure(&self) -> f64 {
        self.sign.value() * self.weight
    }
}

/// Positions held over one calendar month, sorted by asset id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthBook {
    pub month: usize,
    pub rows: Vec<PositionRow>,
}

impl MonthBook {
    pub fn new(month: usize, mut rows: Vec<PositionRow>) -> Self {
        rows.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
        Self { month, rows }
    }
}

/// Equal-weighted average of volatility-scaled asset returns; `None` when
/// no asset is held.
pub fn portfolio_return(rows: &[PositionRow]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let total: f64 = rows.iter().map(|p| p.exposure() * p.ret).sum();
    Some(total / rows.len() as f64)
}

/// Basis-point costs per asset class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSchedule {
    /// Charged on traded notional `|w_t - w_{t-1}|`.
    pub rebalance_bp: HashMap<AssetClass, f64>,
    /// Charged monthly on held notional `|w_t|`.
    pub rollover_bp: HashMap<AssetClass, f64>,
}

impl Default for CostSchedule {
    /// Placeholder schedule; replace with a sourced one for real studies.
    fn default() -> Self {
        let rebalance_bp = [
            (AssetClass::Equity, 2.0),
            (AssetClass::Bond, 1.0),
            (AssetClass::Currency, 1.0),
            (AssetClass::Commodity, 3.0),
        ]
        .into_iter()
        .collect();
        let rollover_bp = AssetClass::ALL.iter().map(|&c| (c, 1.0)).collect();
        Self {
            rebalance_bp,
            rollover_bp,
        }
    }
}

impl CostSchedule {
    pub fn zero() -> Self {
        Self {
            rebalance_bp: AssetClass::ALL.iter().map(|&c| (c, 0.0)).collect(),
            rollover_bp: AssetClass::ALL.iter().map(|&c| (c, 0.0)).collect(),
        }
    }

    pub fn rebalance(&self, class: AssetClass) -> f64 {
        self.rebalance_bp.get(&class).copied().unwrap_or(0.0)
    }

    pub fn rollover(&self, class: AssetClass) -> f64 {
        self.rollover_bp.get(&class).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.rebalance_bp.values().chain(self.rollover_bp.values()).all(|&v| v == 0.0)
    }

    /// Parses `key = value` lines. Keys are `<class>.rebalance_bp`,
    /// `<class>.rollover_bp`, or `rebalance_bp` / `rollover_bp` for every
    /// class. Unlisted entries keep the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut schedule = CostSchedule::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("cost schedule line {}: expected key = value", n + 1)))?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::config(format!("cost schedule line {}: bad number `{}`", n + 1, value.trim()))
            })?;
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::config(format!(
                    "cost schedule line {}: costs must be non-negative",
                    n + 1
                )));
            }
            schedule
                .set(key.trim(), value)
                .map_err(|e| Error::config(format!("cost schedule line {}: {e}", n + 1)))?;
        }
        Ok(schedule)
    }

    /// Sets one entry; see [`CostSchedule::parse`] for the key names.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::config(format!("cost `{key}` must be non-negative")));
        }
        let (classes, kind) = match key.split_once('.') {
            Some((class, kind)) => (vec![class.parse::<AssetClass>()?], kind),
            None => (AssetClass::ALL.to_vec(), key),
        };
        let table = match kind {
            "rebalance_bp" => &mut self.rebalance_bp,
            "rollover_bp" => &mut self.rollover_bp,
            other => return Err(Error::config(format!("unknown cost key `{other}`"))),
        };
        for c in classes {
            table.insert(c, value);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for c in AssetClass::ALL {
            out.push_str(&format!("{c}.rebalance_bp = {}\n", self.rebalance(c)));
            out.push_str(&format!("{c}.rollover_bp = {}\n", self.rollover(c)));
        }
        out
    }
}

/// `|w_t - w_{t-1}|` per row, with `w_{t-1} = 0` when the asset was not held
/// in the previous calendar month.
fn trades(books: &[MonthBook]) -> Vec<Vec<f64>> {
    let mut prev: HashMap<&str, (usize, f64)> = HashMap::new();
    let mut out = Vec::with_capacity(books.len());
    for book in books {
        let mut month_trades = Vec::with_capacity(book.rows.len());
        for row in &book.rows {
            let before = match prev.get(row.asset_id.as_str()) {
                Some(&(m, w)) if m + 1 == book.month => w,
                _ => 0.0,
            };
            month_trades.push((row.exposure() - before).abs());
        }
        for row in &book.rows {
            prev.insert(row.asset_id.as_str(), (book.month, row.exposure()));
        }
        out.push(month_trades);
    }
    out
}

/// Monthly cost as a fraction of the portfolio, averaged over held assets.
pub fn apply_costs(books: &[MonthBook], schedule: &CostSchedule) -> Vec<f64> {
    books
        .iter()
        .zip(trades(books))
        .map(|(book, traded)| {
            if book.rows.is_empty() {
                return 0.0;
            }
            let total: f64 = book
                .rows
                .iter()
                .zip(&traded)
                .map(|(row, dw)| {
                    schedule.rebalance(row.asset_class) * dw
                        + schedule.rollover(row.asset_class) * row.exposure().abs()
                })
                .sum();
            total / 1e4 / book.rows.len() as f64
        })
        .collect()
}

/// Average monthly turnover in percent: the mean over months after the
/// first of `(1/N_t) sum_i |w_{i,t} - w_{i,t-1}|`, times 100.
pub fn turnover(books: &[MonthBook]) -> Option<f64> {
    if books.len() < 2 {
        return None;
    }
    let per_month: Vec<f64> = books
        .iter()
        .zip(trades(books))
        .skip(1)
        .map(|(book, traded)| {
            if book.rows.is_empty() {
                0.0
            } else {
                traded.iter().sum::<f64>() / book.rows.len() as f64
            }
        })
        .collect();
    Some(100.0 * per_month.iter().sum::<f64>() / per_month.len() as f64)
}

/// Scales `series` to realized annualized volatility `target`.
pub fn expost_scale(series: &[f64], target: f64) -> Result<(Vec<f64>, f64)> {
    let vol = metrics::annualized_vol(series)?;
    if vol == 0.0 {
        return Err(Error::numeric("cannot scale a zero-variance series"));
    }
    let factor = target / vol;
    Ok((series.iter().map(|r| r * factor).collect(), factor))
}

/// Monthly return series of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReturns {
    /// Calendar month index of each observation.
    pub months: Vec<usize>,
    pub gross: Vec<f64>,
    pub cost: Vec<f64>,
    pub net: Vec<f64>,
    pub n_assets: Vec<usize>,
    /// Percent per month.
    pub turnover: Option<f64>,
    pub scale_factor: f64,
    /// Net returns scaled to the ex-post volatility target.
    pub scaled: Vec<f64>,
}

impl StrategyReturns {
    /// Assembles gross, cost and net series from monthly books. Months
    /// without positions are dropped.
    pub fn from_books(books: &[MonthBook], schedule: &CostSchedule, target_vol: f64) -> Result<Self> {
        let books: Vec<MonthBook> = books.iter().filter(|b| !b.rows.is_empty()).cloned().collect();
        if books.is_empty() {
            return Err(Error::Insufficient("strategy holds no positions".into()));
        }
        let cost = apply_costs(&books, schedule);
        let gross: Vec<f64> = books
            .iter()
            .map(|b| portfolio_return(&b.rows).unwrap())
            .collect();
        let net: Vec<f64> = gross.iter().zip(&cost).map(|(g, c)| g - c).collect();
        let (scaled, scale_factor) = expost_scale(&net, target_vol)?;
        Ok(Self {
            months: books.iter().map(|b| b.month).collect(),
            n_assets: books.iter().map(|b| b.rows.len()).collect(),
            turnover: turnover(&books),
            gross,
            cost,
            net,
            scale_factor,
            scaled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn row(id: &str, sign: Sign, weight: f64, ret: f64) -> PositionRow {
        PositionRow {
            asset_id: id.into(),
            asset_class: AssetClass::Equity,
            sign,
            weight,
            ret,
        }
    }

    #[test]
    fn naive_signs() {
        assert_eq!(naive_sign(0.0), Sign::Long);
        assert_eq!(naive_sign(-0.001), Sign::Short);
        assert_eq!(naive_sign(0.05), Sign::Long);
    }

    #[test]
    fn asset_returns() {
        assert_relative_eq!(asset_strategy_return(Sign::Long, 0.4, 0.2, 0.01), 0.02, epsilon = 1e-15);
        assert_relative_eq!(asset_strategy_return(Sign::Short, 0.4, 0.4, 0.01), -0.01, epsilon = 1e-15);
        let a = asset_strategy_return(Sign::Long, 0.4, 0.13, 0.037);
        assert_eq!(asset_strategy_return(Sign::Short, 0.4, 0.13, 0.037), -a);
    }

    #[test]
    fn portfolio_average() {
        let one = [row("A", Sign::Long, 2.0, 0.01)];
        assert_eq!(portfolio_return(&one), Some(asset_strategy_return(Sign::Long, 0.4, 0.2, 0.01)));
        let two = [row("A", Sign::Long, 2.0, 0.01), row("B", Sign::Short, 1.0, 0.02)];
        assert_eq!(portfolio_return(&two), Some(0.0));
        assert_eq!(portfolio_return(&[]), None);
        // 3-asset hand calculation: (2*0.01 - 0.5*(-0.04) + 1.25*0.008) / 3 = 0.05/3
        let three = [
            row("A", Sign::Long, 2.0, 0.01),
            row("B", Sign::Short, 0.5, -0.04),
            row("C", Sign::Long, 1.25, 0.008),
        ];
        assert_relative_eq!(portfolio_return(&three).unwrap(), 0.05 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_schedule_costs_nothing() {
        let books = vec![MonthBook::new(0, vec![row("A", Sign::Long, 2.0, 0.01)])];
        assert_eq!(apply_costs(&books, &CostSchedule::zero()), vec![0.0]);
    }

    #[test]
    fn constant_book_costs_only_at_entry() {
        let mut s = CostSchedule::zero();
        s.rebalance_bp.insert(AssetClass::Equity, 10.0);
        let books: Vec<_> = (0..4).map(|m| MonthBook::new(m, vec![row("A", Sign::Long, 1.5, 0.01)])).collect();
        let c = apply_costs(&books, &s);
        assert_relative_eq!(c[0], 1.5 * 10.0 / 1e4, epsilon = 1e-18);
        assert_eq!(&c[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(turnover(&books), Some(0.0));
    }

    #[test]
    fn flipping_costs() {
        let mut s = CostSchedule::zero();
        s.rebalance_bp.insert(AssetClass::Equity, 10.0);
        let books: Vec<_> = (0..6)
            .map(|m| {
                let sign = if m % 2 == 0 { Sign::Long } else { Sign::Short };
                MonthBook::new(m, vec![row("A", sign, 2.0, 0.01)])
            })
            .collect();
        let c = apply_costs(&books, &s);
        for &v in &c[1..] {
            assert_relative_eq!(v, 0.004, epsilon = 1e-15);
        }
        let unit: Vec<_> = (0..6)
            .map(|m| {
                let sign = if m % 2 == 0 { Sign::Long } else { Sign::Short };
                MonthBook::new(m, vec![row("A", sign, 1.0, 0.01)])
            })
            .collect();
        assert_relative_eq!(turnover(&unit).unwrap(), 200.0, epsilon = 1e-12);
    }

    #[test]
    fn reentry_after_gap_is_an_entry() {
        let mut s = CostSchedule::zero();
        s.rebalance_bp.insert(AssetClass::Equity, 10.0);
        let books = vec![
            MonthBook::new(0, vec![row("A", Sign::Long, 1.0, 0.0)]),
            MonthBook::new(2, vec![row("A", Sign::Long, 1.0, 0.0)]),
        ];
        let c = apply_costs(&books, &s);
        assert_eq!(c[0], c[1]);
    }

    #[test]
    fn scaling() {
        let series = [0.02, -0.01, 0.03, 0.0, -0.02];
        let vol = metrics::annualized_vol(&series).unwrap();
        let (scaled, f) = expost_scale(&series, vol / 2.0).unwrap();
        assert_relative_eq!(f, 0.5, epsilon = 1e-15);
        assert_relative_eq!(metrics::annualized_vol(&scaled).unwrap(), vol / 2.0, epsilon = 1e-15);
        let (_, f) = expost_scale(&series, vol).unwrap();
        assert_relative_eq!(f, 1.0, epsilon = 1e-15);
        assert!(expost_scale(&[0.01, 0.01], 0.1).is_err());
    }

    #[test]
    fn schedule_parsing() {
        let s = CostSchedule::parse("# costs\nrollover_bp = 0.5\ncommodity.rebalance_bp = 4 # wide\n").unwrap();
        assert_eq!(s.rollover(AssetClass::Bond), 0.5);
        assert_eq!(s.rebalance(AssetClass::Commodity), 4.0);
        assert_eq!(s.rebalance(AssetClass::Equity), 2.0);
        assert!(CostSchedule::parse("equity.rebalance_bp = -1").is_err());
        assert!(CostSchedule::parse("metals.rebalance_bp = 1").is_err());
        assert!(CostSchedule::parse("rebalance = 1").is_err());
        let round = CostSchedule::parse(&s.to_kv()).unwrap();
        assert_eq!(round, s);
    }

    #[test]
    fn net_below_gross_with_costs() {
        let books: Vec<_> = (0..12)
            .map(|m| {
                let sign = if m % 3 == 0 { Sign::Long } else { Sign::Short };
                MonthBook::new(m, vec![row("A", sign, 1.0 + m as f64 * 0.1, 0.01 * (m as f64 - 5.0))])
            })
            .collect();
        let sr = StrategyReturns::from_books(&books, &CostSchedule::default(), 0.1).unwrap();
        for (g, n) in sr.gross.iter().zip(&sr.net) {
            assert!(n < g);
        }
        assert_relative_eq!(metrics::annualized_vol(&sr.scaled).unwrap(), 0.1, epsilon = 1e-12);
    }
}
