//! Per-asset forecasting pipelines, strategy backtests and the strategy matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{test_start, AssetClass, AssetSeries, PanelDataset, SplitPolicy, YearMonth};
use crate::error::{Error, Result};
use crate::features::{AssetFeatures, EwmaConfig, LookbackSet, MeanConvention};
use crate::filter::{DynamicLogit, FilterPrior, LambdaGrid, LaplaceMode};
use crate::metrics::{
    align, gross_returns, management_fee, subperiod_report, ForecastLedger, ForecastRecord,
    ManagementFee, PerfReport, ReportInputs,
};
use crate::pool::{AlphaGrid, AlphaTiming, PoolState};
use crate::portfolio::{naive_sign, position_weight, CostSchedule, MonthBook, PositionRow, StrategyReturns};
use crate::signal::{apply_cutoff, bayes_decide, cv_select_cutoff, CutoffPolicy, SecondMoment, Sign, UtilityTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LambdaMode {
    Cp,
    Tvp,
}

impl LambdaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LambdaMode::Cp => "cp",
            LambdaMode::Tvp => "tvp",
        }
    }
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LambdaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cp" => Ok(LambdaMode::Cp),
            "tvp" => Ok(LambdaMode::Tvp),
            other => Err(Error::config(format!("unknown lambda mode `{other}` (cp|tvp)"))),
        }
    }
}

/// How forecasts (or the naive rule) produce a trading sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Combine {
    Dma,
    Dms,
    Single(usize),
    Naive(usize),
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Combine::Dma => f.write_str("dma"),
            Combine::Dms => f.write_str("dms"),
            Combine::Single(l) => write!(f, "single:{l}"),
            Combine::Naive(l) => write!(f, "naive:{l}"),
        }
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let lookback = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("bad look-back in `{s}`")))
        };
        match s.split_once(':') {
            None if s == "dma" => Ok(Combine::Dma),
            None if s == "dms" => Ok(Combine::Dms),
            Some(("single", l)) => Ok(Combine::Single(lookback(l)?)),
            Some(("naive", l)) => Ok(Combine::Naive(lookback(l)?)),
            _ => Err(Error::config(format!(
                "unknown combine mode `{s}` (dma|dms|single:L|naive:L)"
            ))),
        }
    }
}

/// A combine mode together with the filter configuration it runs under.
/// The lambda mode is ignored by naive strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub combine: Combine,
    pub lambda: LambdaMode,
}

impl Strategy {
    pub fn new(combine: Combine, lambda: LambdaMode) -> Self {
        let lambda = match combine {
            Combine::Naive(_) => LambdaMode::Cp,
            _ => lambda,
        };
        Self { combine, lambda }
    }

    pub fn naive(lookback: usize) -> Self {
        Self::new(Combine::Naive(lookback), LambdaMode::Cp)
    }

    pub fn is_naive(&self) -> bool {
        matches!(self.combine, Combine::Naive(_))
    }

    /// Row label in comparison tables.
    pub fn row_label(&self) -> String {
        match self.combine {
            Combine::Dma => "DMA".into(),
            Combine::Dms => "DMS".into(),
            Combine::Single(l) | Combine::Naive(l) => format!("{l}m"),
        }
    }

    /// Column group in comparison tables.
    pub fn group_label(&self) -> &'static str {
        match (self.combine, self.lambda) {
            (Combine::Naive(_), _) => "Naive",
            (_, LambdaMode::Cp) => "CP",
            (_, LambdaMode::Tvp) => "TVP",
        }
    }

    /// Parses `combine[@lambda]`, using `default` when no lambda is given.
    pub fn parse_with(s: &str, default: LambdaMode) -> Result<Self> {
        let (c, l) = match s.split_once('@') {
            Some((c, l)) => (c, l.parse()?),
            None => (s, default),
        };
        Ok(Self::new(c.parse()?, l))
    }

    fn lookback(&self) -> Option<usize> {
        match self.combine {
            Combine::Single(l) | Combine::Naive(l) => Some(l),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_naive() {
            write!(f, "{}", self.combine)
        } else {
            write!(f, "{}@{}", self.combine, self.lambda)
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::parse_with(s, LambdaMode::Cp)
    }
}

/// Every setting of a run. Defaults reproduce the main specification.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub lookbacks: LookbackSet,
    pub strategy: Strategy,
    pub cutoff: CutoffPolicy,
    pub costs: CostSchedule,
    pub costs_path: Option<PathBuf>,
    /// Inclusive evaluation window.
    pub window: Option<(YearMonth, YearMonth)>,
    /// Only consumed by synthetic generation; backtests are deterministic.
    pub seed: u64,
    pub sigma_target: f64,
    pub expost_target: f64,
    pub gamma: f64,
    pub split: SplitPolicy,
    pub ewma: EwmaConfig,
    pub prior: FilterPrior,
    pub tvp_grid: LambdaGrid,
    pub alpha_grid: AlphaGrid,
    pub laplace: LaplaceMode,
    pub alpha_timing: AlphaTiming,
    /// Look-back of the naive fee benchmark; 12 (or the largest look-back)
    /// when unset.
    pub benchmark_lookback: Option<usize>,
    pub filter_trace: bool,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            output: None,
            lookbacks: LookbackSet::default(),
            strategy: Strategy::new(Combine::Dma, LambdaMode::Cp),
            cutoff: CutoffPolicy::default(),
            costs: CostSchedule::default(),
            costs_path: None,
            window: None,
            seed: 0,
            sigma_target: 0.40,
            expost_target: 0.10,
            gamma: 10.0,
            split: SplitPolicy::default(),
            ewma: EwmaConfig::default(),
            prior: FilterPrior::default(),
            tvp_grid: LambdaGrid::time_varying(),
            alpha_grid: AlphaGrid::default(),
            laplace: LaplaceMode::default(),
            alpha_timing: AlphaTiming::default(),
            benchmark_lookback: None,
            filter_trace: false,
            jobs: None,
        }
    }
}

fn parse_list<T: FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad entry `{s}` for {key}")))
        })
        .collect()
}

fn parse_num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for {key}")))
}

/// Parses `start:end` with either month spelling.
pub fn parse_window(v: &str) -> Result<(YearMonth, YearMonth)> {
    let (a, b) = v
        .split_once(':')
        .or_else(|| v.split_once(".."))
        .ok_or_else(|| Error::config(format!("bad window `{v}`, expected START:END")))?;
    let w = (a.parse()?, b.parse()?);
    if w.1 < w.0 {
        return Err(Error::config(format!("window `{v}` ends before it starts")));
    }
    Ok(w)
}

impl RunConfig {
    pub fn lambda_grid(&self, mode: LambdaMode) -> LambdaGrid {
        match mode {
            LambdaMode::Cp => LambdaGrid::constant(),
            LambdaMode::Tvp => self.tvp_grid.clone(),
        }
    }

    /// Look-back of the naive fee benchmark and the single-model MAE benchmark.
    pub fn benchmark_lookback(&self) -> usize {
        self.benchmark_lookback.unwrap_or_else(|| {
            if self.lookbacks.position(12).is_some() {
                12
            } else {
                self.lookbacks.max()
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        SplitPolicy::new(self.split.train_months, self.lookbacks.max())?;
        self.cutoff.validate()?;
        self.ewma.validate()?;
        for (v, name) in [
            (self.sigma_target, "sigma_target"),
            (self.expost_target, "expost_target"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma {} must be non-negative", self.gamma)));
        }
        let known = |l: usize| {
            self.lookbacks
                .position(l)
                .map(|_| ())
                .ok_or_else(|| Error::config(format!("look-back {l} is not in {:?}", self.lookbacks.as_slice())))
        };
        if let Some(l) = self.strategy.lookback() {
            known(l)?;
        }
        known(self.benchmark_lookback())?;
        if self.jobs == Some(0) {
            return Err(Error::config("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            "lookbacks" => self.lookbacks = LookbackSet::new(parse_list(v, key)?)?,
            "lambda" => self.strategy = Strategy::new(self.strategy.combine, v.parse()?),
            "combine" => self.strategy = Strategy::parse_with(v, self.strategy.lambda)?,
            "cutoff" => self.cutoff = v.parse()?,
            "costs" => {
                self.costs = CostSchedule::load(Path::new(v))?;
                self.costs_path = Some(PathBuf::from(v));
            }
            "window" => self.window = Some(parse_window(v)?),
            "seed" => self.seed = parse_num(v, key)?,
            "sigma_target" => self.sigma_target = parse_num(v, key)?,
            "expost_target" => self.expost_target = parse_num(v, key)?,
            "gamma" => {
                self.gamma = parse_num(v, key)?;
                if let CutoffPolicy::Bayes { gamma, .. } = &mut self.cutoff {
                    *gamma = self.gamma;
                }
            }
            "train_months" => self.split = SplitPolicy { train_months: parse_num(v, key)? },
            "ewma_decay" => self.ewma.decay = parse_num(v, key)?,
            "vol_floor" => self.ewma.floor = parse_num(v, key)?,
            "ewma_mean" => {
                self.ewma.mean = match v {
                    "running" => MeanConvention::Running,
                    "zero" => MeanConvention::Zero,
                    _ => return Err(Error::config(format!("ewma_mean `{v}` (running|zero)"))),
                }
            }
            "prior_scale" => self.prior = FilterPrior::new(parse_num(v, key)?)?,
            "tvp_grid" => self.tvp_grid = LambdaGrid::new(parse_list(v, key)?)?,
            "alpha_grid" => self.alpha_grid = AlphaGrid::new(parse_list(v, key)?)?,
            "laplace" => {
                self.laplace = match v {
                    "updated" => LaplaceMode::UpdatedMean,
                    "prior" => LaplaceMode::PriorMean,
                    _ => return Err(Error::config(format!("laplace `{v}` (updated|prior)"))),
                }
            }
            "alpha_timing" => {
                self.alpha_timing = match v {
                    "selected" => AlphaTiming::SelectedAtUpdate,
                    "forecast" => AlphaTiming::ForecastAlpha,
                    _ => return Err(Error::config(format!("alpha_timing `{v}` (selected|forecast)"))),
                }
            }
            "bayes_moment" => {
                let moment = match v {
                    "mean-square" => SecondMoment::MeanSquare,
                    "variance" => SecondMoment::Variance,
                    _ => {
                        return Err(Error::config(format!(
                            "bayes_moment `{v}` (mean-square|variance)"
                        )))
                    }
                };
                if let CutoffPolicy::Bayes { moment: m, .. } = &mut self.cutoff {
                    *m = moment;
                }
            }
            "benchmark" => self.benchmark_lookback = Some(parse_num(v, key)?),
            "filter_trace" => self.filter_trace = parse_num(v, key)?,
            "jobs" => self.jobs = Some(parse_num(v, key)?),
            k if k.ends_with("_bp") => self.costs.set(k, parse_num(v, k)?)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a key-value config text (`key = value`, `#` comments).
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Echo of the settings that affect results, in config-file syntax.
    pub fn to_kv(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv(
            "lookbacks",
            self.lookbacks
                .as_slice()
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("combine", self.strategy.combine.to_string());
        kv("lambda", self.strategy.lambda.to_string());
        kv("cutoff", self.cutoff.to_string());
        if let Some((a, b)) = self.window {
            kv("window", format!("{a}:{b}"));
        }
        kv("sigma_target", self.sigma_target.to_string());
        kv("expost_target", self.expost_target.to_string());
        kv("gamma", self.gamma.to_string());
        kv("train_months", self.split.train_months.to_string());
        kv("ewma_decay", self.ewma.decay.to_string());
        kv("vol_floor", self.ewma.floor.to_string());
        kv(
            "ewma_mean",
            match self.ewma.mean {
                MeanConvention::Running => "running",
                MeanConvention::Zero => "zero",
            }
            .into(),
        );
        kv("prior_scale", self.prior.c0_scale.to_string());
        kv("tvp_grid", list(self.tvp_grid.values()));
        kv("alpha_grid", list(self.alpha_grid.values()));
        kv(
            "laplace",
            match self.laplace {
                LaplaceMode::UpdatedMean => "updated",
                LaplaceMode::PriorMean => "prior",
            }
            .into(),
        );
        kv(
            "alpha_timing",
            match self.alpha_timing {
                AlphaTiming::SelectedAtUpdate => "selected",
                AlphaTiming::ForecastAlpha => "forecast",
            }
            .into(),
        );
        kv("benchmark", self.benchmark_lookback().to_string());
        out.push_str(&self.costs.to_kv());
        out
    }
}

/// One traded month of one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Calendar month index.
    pub month: usize,
    pub sign: Sign,
    pub weight: f64,
    pub shat: Option<f64>,
    pub cutoff: Option<f64>,
    pub s: u8,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetDecisions {
    pub asset_id: String,
    pub asset_class: AssetClass,
    pub decisions: Vec<Decision>,
}

/// Pool state summary after the update at one month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolTraceRow {
    pub month: usize,
    pub alpha: f64,
    pub dms_model_id: u32,
    pub inclusion: Vec<f64>,
    pub shat_dma: f64,
    pub shat_dms: f64,
}

/// Single-filter state after the update at one month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTraceRow {
    pub month: usize,
    pub lambda: f64,
    pub log_lik: f64,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PathKey {
    Pool(LambdaMode),
    Single(usize, LambdaMode),
}

impl Strategy {
    fn path_key(&self) -> Option<PathKey> {
        match self.combine {
            Combine::Dma | Combine::Dms => Some(PathKey::Pool(self.lambda)),
            Combine::Single(l) => Some(PathKey::Single(l, self.lambda)),
            Combine::Naive(_) => None,
        }
    }
}

/// Forecast probability per local month of one asset.
#[derive(Debug, Default)]
struct Paths {
    dma: Vec<Option<f64>>,
    dms: Vec<Option<f64>>,
    single: Vec<Option<f64>>,
    pool_trace: Vec<PoolTraceRow>,
    filter_trace: Vec<FilterTraceRow>,
}

struct Prepared<'a> {
    asset: &'a AssetSeries,
    offset: usize,
    features: AssetFeatures,
    test_start: usize,
}

fn with_asset(id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{id}: {m}")),
        Error::Insufficient(m) => Error::Insufficient(format!("{id}: {m}")),
        e => e,
    }
}

fn run_pool(p: &Prepared<'_>, cfg: &RunConfig, mode: LambdaMode) -> Result<Paths> {
    let n = p.features.len();
    let cols: Vec<usize> = (0..cfg.lookbacks.len()).collect();
    let grid = cfg.lambda_grid(mode);
    let mut pool = PoolState::new(&cfg.lookbacks, &cfg.prior)?;
    let mut out = Paths {
        dma: vec![None; n],
        dms: vec![None; n],
        ..Paths::default()
    };
    for t in 0..n {
        let Some(x) = p.features.regressors(t, &cols) else {
            continue;
        };
        let rec = pool
            .step(&x, p.features.labels[t], &grid, &cfg.alpha_grid, cfg.laplace, cfg.alpha_timing)
            .map_err(with_asset(&p.asset.asset_id))?;
        out.dma[t] = Some(rec.forecast.dma);
        out.dms[t] = Some(rec.forecast.dms);
        out.pool_trace.push(PoolTraceRow {
            month: p.offset + t,
            alpha: rec.alpha,
            dms_model_id: rec.forecast.dms_model_id,
            inclusion: rec.inclusion,
            shat_dma: rec.forecast.dma,
            shat_dms: rec.forecast.dms,
        });
    }
    Ok(out)
}

fn run_single(p: &Prepared<'_>, cfg: &RunConfig, lookback: usize, mode: LambdaMode) -> Result<Paths> {
    let n = p.features.len();
    let col = cfg
        .lookbacks
        .position(lookback)
        .ok_or_else(|| Error::config(format!("look-back {lookback} is not configured")))?;
    let mut filter = DynamicLogit::new(2, &cfg.prior, cfg.lambda_grid(mode), cfg.laplace);
    let mut out = Paths {
        single: vec![None; n],
        ..Paths::default()
    };
    for t in 0..n {
        let Some(x) = p.features.regressors(t, &[col]) else {
            continue;
        };
        let x = DVector::from_vec(x);
        out.single[t] = Some(filter.forecast(&x));
        let step = filter
            .observe(&x, p.features.labels[t])
            .map_err(with_asset(&p.asset.asset_id))?;
        if cfg.filter_trace {
            out.filter_trace.push(FilterTraceRow {
                month: p.offset + t,
                lambda: step.lambda,
                log_lik: step.log_lik(),
                mean: step.state.mean.iter().copied().collect(),
                cov_diag: step.state.cov.diagonal().iter().copied().collect(),
            });
        }
    }
    Ok(out)
}

enum Source<'a> {
    Forecast(&'a [Option<f64>]),
    Naive(usize),
}

fn decide(p: &Prepared<'_>, source: Source<'_>, cfg: &RunConfig) -> Result<Vec<Decision>> {
    let returns = &p.asset.returns;
    let mut out: Vec<Decision> = Vec::with_capacity(returns.len() - p.test_start);
    for t in p.test_start..returns.len() {
        let sigma = p.features.sigma[t].ok_or_else(|| {
            Error::Insufficient(format!("{}: no volatility estimate at local month {t}", p.asset.asset_id))
        })?;
        let (sign, shat, cutoff) = match source {
            Source::Naive(col) => {
                let mom = p.features.momentum[t][col].ok_or_else(|| {
                    Error::Insufficient(format!("{}: no momentum at local month {t}", p.asset.asset_id))
                })?;
                (naive_sign(mom), None, None)
            }
            Source::Forecast(path) => {
                let shat = path[t].ok_or_else(|| {
                    Error::Insufficient(format!("{}: no forecast at local month {t}", p.asset.asset_id))
                })?;
                match &cfg.cutoff {
                    CutoffPolicy::Fixed(c) => (apply_cutoff(shat, *c), Some(shat), Some(*c)),
                    CutoffPolicy::Cv { grid, window } => {
                        let from = out.len().saturating_sub(*window);
                        let history: Vec<(f64, u8)> = out[from..]
                            .iter()
                            .map(|d| (d.shat.unwrap(), d.s))
                            .collect();
                        let c = cv_select_cutoff(&history, grid);
                        (apply_cutoff(shat, c), Some(shat), Some(c))
                    }
                    CutoffPolicy::Bayes { gamma, moment } => {
                        let table = UtilityTable::from_history(&returns[..t], *gamma, *moment);
                        let c = table.and_then(|t| t.implicit_cutoff()).or(table.is_none().then_some(0.5));
                        (bayes_decide(shat, table.as_ref()), Some(shat), c)
                    }
                }
            }
        };
        out.push(Decision {
            month: p.offset + t,
            sign,
            weight: position_weight(cfg.sigma_target, sigma),
            shat,
            cutoff,
            s: p.features.labels[t],
            r: returns[t],
        });
    }
    Ok(out)
}

/// Decisions of one strategy for every included asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub assets: Vec<AssetDecisions>,
}

impl StrategyRun {
    /// Monthly books over calendar months `first..=last`.
    pub fn books(&self, first: usize, last: usize) -> Vec<MonthBook> {
        let mut by_month: BTreeMap<usize, Vec<PositionRow>> = BTreeMap::new();
        for a in &self.assets {
            for d in a.decisions.iter().filter(|d| d.month >= first && d.month <= last) {
                by_month.entry(d.month).or_default().push(PositionRow {
                    asset_id: a.asset_id.clone(),
                    asset_class: a.asset_class,
                    sign: d.sign,
                    weight: d.weight,
                    ret: d.r,
                });
            }
        }
        by_month
            .into_iter()
            .map(|(m, rows)| MonthBook::new(m, rows))
            .collect()
    }

    pub fn ledger(&self, first: usize, last: usize) -> Result<ForecastLedger> {
        let records = self
            .assets
            .iter()
            .flat_map(|a| {
                a.decisions
                    .iter()
                    .filter(|d| d.month >= first && d.month <= last)
                    .map(|d| ForecastRecord {
                        asset_id: a.asset_id.clone(),
                        month: d.month,
                        shat: d.shat,
                        s: d.s,
                        sign_pred: d.sign,
                    })
            })
            .collect();
        ForecastLedger::new(records)
    }
}

/// Everything computed for a set of strategies on one panel.
#[derive(Debug, Clone)]
pub struct Computed {
    pub runs: BTreeMap<Strategy, StrategyRun>,
    /// Per lambda mode, per asset.
    pub pool_traces: BTreeMap<LambdaMode, BTreeMap<String, Vec<PoolTraceRow>>>,
    /// Per (look-back, lambda mode), per asset.
    pub filter_traces: BTreeMap<(usize, LambdaMode), BTreeMap<String, Vec<FilterTraceRow>>>,
    pub excluded: Vec<String>,
}

/// Runs `f` on a worker pool of `jobs` threads (all cores when unset).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the forecasting pipelines needed by `strategies` over every asset.
pub fn compute(panel: &PanelDataset, cfg: &RunConfig, strategies: &[Strategy]) -> Result<Computed> {
    cfg.validate()?;
    for s in strategies {
        if let Some(l) = s.lookback() {
            if cfg.lookbacks.position(l).is_none() {
                return Err(Error::config(format!("{s}: look-back {l} is not configured")));
            }
        }
    }
    let strategies: Vec<Strategy> = strategies
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let keys: BTreeSet<PathKey> = strategies.iter().filter_map(|s| s.path_key()).collect();

    let mut excluded = Vec::new();
    let mut included = Vec::new();
    for a in panel.assets() {
        if test_start(a, cfg.split).is_some() {
            included.push(a);
        } else {
            excluded.push(a.asset_id.clone());
        }
    }
    if included.is_empty() {
        return Err(Error::Insufficient(format!(
            "no asset has more than {} months",
            cfg.split.train_months
        )));
    }

    type AssetOut = (Vec<Vec<Decision>>, BTreeMap<PathKey, Paths>);
    let job = || -> Result<Vec<AssetOut>> {
        included
            .par_iter()
            .map(|&asset| {
                let p = Prepared {
                    asset,
                    offset: panel.offset_of(asset),
                    features: AssetFeatures::compute(&asset.returns, &cfg.lookbacks, &cfg.ewma),
                    test_start: cfg.split.train_months,
                };
                let mut paths = BTreeMap::new();
                for &key in &keys {
                    let computed = match key {
                        PathKey::Pool(mode) => run_pool(&p, cfg, mode)?,
                        PathKey::Single(l, mode) => run_single(&p, cfg, l, mode)?,
                    };
                    paths.insert(key, computed);
                }
                let decisions = strategies
                    .iter()
                    .map(|s| {
                        let source = match (s.combine, s.path_key()) {
                            (Combine::Naive(l), _) => Source::Naive(cfg.lookbacks.position(l).unwrap()),
                            (Combine::Dma, Some(k)) => Source::Forecast(&paths[&k].dma),
                            (Combine::Dms, Some(k)) => Source::Forecast(&paths[&k].dms),
                            (_, Some(k)) => Source::Forecast(&paths[&k].single),
                            _ => unreachable!("forecast strategies carry a path key"),
                        };
                        decide(&p, source, cfg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((decisions, paths))
            })
            .collect()
    };
    let per_asset = with_jobs(cfg.jobs, job)??;

    let mut runs: BTreeMap<Strategy, StrategyRun> = strategies
        .iter()
        .map(|&s| {
            (
                s,
                StrategyRun {
                    strategy: s,
                    assets: Vec::with_capacity(included.len()),
                },
            )
        })
        .collect();
    let mut pool_traces: BTreeMap<LambdaMode, BTreeMap<String, Vec<PoolTraceRow>>> = BTreeMap::new();
    let mut filter_traces: BTreeMap<(usize, LambdaMode), BTreeMap<String, Vec<FilterTraceRow>>> =
        BTreeMap::new();
    for (asset, (decisions, paths)) in included.iter().zip(per_asset) {
        for (s, d) in strategies.iter().zip(decisions) {
            runs.get_mut(s).unwrap().assets.push(AssetDecisions {
                asset_id: asset.asset_id.clone(),
                asset_class: asset.asset_class,
                decisions: d,
            });
        }
        for (key, p) in paths {
            match key {
                PathKey::Pool(mode) => {
                    pool_traces
                        .entry(mode)
                        .or_default()
                        .insert(asset.asset_id.clone(), p.pool_trace);
                }
                PathKey::Single(l, mode) if cfg.filter_trace => {
                    filter_traces
                        .entry((l, mode))
                        .or_default()
                        .insert(asset.asset_id.clone(), p.filter_trace);
                }
                PathKey::Single(..) => {}
            }
        }
    }
    Ok(Computed {
        runs,
        pool_traces,
        filter_traces,
        excluded,
    })
}

/// Calendar indices of the evaluation window, clipped to the panel.
pub fn window_indices(panel: &PanelDataset, window: Option<(YearMonth, YearMonth)>) -> Result<(usize, usize)> {
    let last_index = panel.calendar_len() - 1;
    let Some((a, b)) = window else {
        return Ok((0, last_index));
    };
    let first = a.months_since(panel.start()).max(0);
    let last = b.months_since(panel.start()).min(last_index as i64);
    if last < first {
        return Err(Error::Insufficient(format!(
            "window {a}..{b} does not overlap the panel calendar"
        )));
    }
    Ok((first as usize, last as usize))
}

/// Return series and forecast ledger of one strategy over a window.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub returns: StrategyReturns,
    pub ledger: ForecastLedger,
}

pub fn evaluate(run: &StrategyRun, window: (usize, usize), cfg: &RunConfig) -> Result<Evaluation> {
    let books = run.books(window.0, window.1);
    let returns = StrategyReturns::from_books(&books, &cfg.costs, cfg.expost_target)
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{}: {m}", run.strategy)),
            Error::Insufficient(m) => Error::Insufficient(format!("{}: {m}", run.strategy)),
            e => e,
        })?;
    Ok(Evaluation {
        returns,
        ledger: run.ledger(window.0, window.1)?,
    })
}

/// Fee that makes the strategy's scaled series as attractive as the benchmark's.
pub fn fee_against(eval: &Evaluation, bench: &Evaluation, gamma: f64) -> Result<ManagementFee> {
    let (_, a, b) = align(
        (&eval.returns.months, &eval.returns.scaled),
        (&bench.returns.months, &bench.returns.scaled),
    );
    if a.is_empty() {
        return Err(Error::Insufficient("strategy and benchmark share no months".into()));
    }
    management_fee(&gross_returns(&a), &gross_returns(&b), gamma)
}

fn report_for(
    panel: &PanelDataset,
    eval: &Evaluation,
    bench: &Evaluation,
    mae_bench: &ForecastLedger,
    cfg: &RunConfig,
) -> Result<(PerfReport, ManagementFee)> {
    let months = &eval.returns.months;
    let window = (
        panel.month(months[0]).to_string(),
        panel.month(*months.last().unwrap()).to_string(),
    );
    let mut report = subperiod_report(&ReportInputs {
        window,
        series: &eval.returns.scaled,
        benchmark: None,
        gamma: cfg.gamma,
        turnover: eval.returns.turnover,
        ledger: Some(&eval.ledger),
        mae_benchmark: Some(mae_bench),
    })?;
    let fee = fee_against(eval, bench, cfg.gamma)?;
    report.phi = Some(fee.bps_per_year);
    Ok((report, fee))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub strategy: String,
    pub cutoff: String,
    pub fee_benchmark: String,
    pub mae_benchmark: String,
    pub report: PerfReport,
    pub scale_factor: f64,
    pub fee_monthly: f64,
    pub fee_residual: f64,
    pub assets: Vec<String>,
    pub excluded: Vec<String>,
}

/// A finished single-strategy backtest.
#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub strategy: Strategy,
    pub run: StrategyRun,
    pub evaluation: Evaluation,
    pub benchmark: Evaluation,
    pub mae_benchmark: ForecastLedger,
    pub report: PerfReport,
    pub fee: ManagementFee,
    pub pool_trace: BTreeMap<String, Vec<PoolTraceRow>>,
    pub filter_trace: BTreeMap<String, Vec<FilterTraceRow>>,
    pub excluded: Vec<String>,
    pub calendar_start: YearMonth,
}

impl BacktestResult {
    pub fn doc(&self, cfg: &RunConfig) -> ReportDoc {
        let b = cfg.benchmark_lookback();
        ReportDoc {
            strategy: self.strategy.to_string(),
            cutoff: if self.strategy.is_naive() {
                "none".into()
            } else {
                cfg.cutoff.to_string()
            },
            fee_benchmark: Strategy::naive(b).to_string(),
            mae_benchmark: Strategy::new(Combine::Single(b), LambdaMode::Cp).to_string(),
            report: self.report.clone(),
            scale_factor: self.evaluation.returns.scale_factor,
            fee_monthly: self.fee.monthly,
            fee_residual: self.fee.residual,
            assets: self.run.assets.iter().map(|a| a.asset_id.clone()).collect(),
            excluded: self.excluded.clone(),
        }
    }
}

/// Runs the configured strategy together with its benchmarks.
pub fn run_backtest(panel: &PanelDataset, cfg: &RunConfig) -> Result<BacktestResult> {
    let b = cfg.benchmark_lookback();
    let fee_bench = Strategy::naive(b);
    let mae_bench = Strategy::new(Combine::Single(b), LambdaMode::Cp);
    let mut computed = compute(panel, cfg, &[cfg.strategy, fee_bench, mae_bench])?;
    let window = window_indices(panel, cfg.window)?;

    let run = computed.runs.remove(&cfg.strategy).unwrap();
    let evaluation = evaluate(&run, window, cfg)?;
    let benchmark = if cfg.strategy == fee_bench {
        evaluation.clone()
    } else {
        evaluate(&computed.runs[&fee_bench], window, cfg)?
    };
    let mae_ledger = if cfg.strategy == mae_bench {
        evaluation.ledger.clone()
    } else {
        computed.runs[&mae_bench].ledger(window.0, window.1)?
    };
    let (report, fee) = report_for(panel, &evaluation, &benchmark, &mae_ledger, cfg)?;
    let pool_trace = match cfg.strategy.path_key() {
        Some(PathKey::Pool(mode)) => computed.pool_traces.remove(&mode).unwrap_or_default(),
        _ => BTreeMap::new(),
    };
    let filter_trace = match cfg.strategy.path_key() {
        Some(PathKey::Single(l, mode)) => computed.filter_traces.remove(&(l, mode)).unwrap_or_default(),
        _ => BTreeMap::new(),
    };
    Ok(BacktestResult {
        strategy: cfg.strategy,
        run,
        evaluation,
        benchmark,
        mae_benchmark: mae_ledger,
        report,
        fee,
        pool_trace,
        filter_trace,
        excluded: computed.excluded,
        calendar_start: panel.start(),
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Writes the artifact bundle of a backtest into `dir`.
pub fn write_bundle(result: &BacktestResult, cfg: &RunConfig, lookbacks: &LookbackSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ym = |m: usize| result.calendar_start.offset(m as i64).to_string();
    let r = &result.evaluation.returns;

    let mut w = csv::Writer::from_path(dir.join("returns.csv"))?;
    w.write_record(["month", "gross", "net", "cost", "n_assets"])?;
    for i in 0..r.months.len() {
        w.write_record([
            ym(r.months[i]),
            fmt_f(r.gross[i]),
            fmt_f(r.net[i]),
            fmt_f(r.cost[i]),
            r.n_assets[i].to_string(),
        ])?;
    }
    w.flush()?;

    let b = &result.benchmark.returns;
    let mut w = csv::Writer::from_path(dir.join("benchmark.csv"))?;
    w.write_record(["month", "net"])?;
    for (m, v) in b.months.iter().zip(&b.net) {
        w.write_record([ym(*m), fmt_f(*v)])?;
    }
    w.flush()?;

    let (first, last) = (r.months[0], *r.months.last().unwrap());
    let mut rows: Vec<(usize, &str, &Decision)> = result
        .run
        .assets
        .iter()
        .flat_map(|a| {
            a.decisions
                .iter()
                .filter(|d| d.month >= first && d.month <= last)
                .map(move |d| (d.month, a.asset_id.as_str(), d))
        })
        .collect();
    rows.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));

    let mut pos = csv::Writer::from_path(dir.join("positions.csv"))?;
    pos.write_record(["month", "asset", "sign", "weight"])?;
    let mut fc = csv::Writer::from_path(dir.join("forecasts.csv"))?;
    fc.write_record(["month", "asset", "shat", "cutoff", "s"])?;
    for (m, id, d) in &rows {
        pos.write_record([ym(*m), id.to_string(), d.sign.as_i8().to_string(), fmt_f(d.weight)])?;
        fc.write_record([
            ym(*m),
            id.to_string(),
            fmt_opt(d.shat),
            fmt_opt(d.cutoff),
            d.s.to_string(),
        ])?;
    }
    pos.flush()?;
    fc.flush()?;

    let mut w = csv::Writer::from_path(dir.join("mae_benchmark.csv"))?;
    w.write_record(["month", "asset", "shat", "s"])?;
    for rec in result.mae_benchmark.records() {
        w.write_record([ym(rec.month), rec.asset_id.clone(), fmt_opt(rec.shat), rec.s.to_string()])?;
    }
    w.flush()?;

    if !result.pool_trace.is_empty() {
        let sub = dir.join("pool_trace");
        fs::create_dir_all(&sub)?;
        for (id, trace) in &result.pool_trace {
            let mut w = csv::Writer::from_path(sub.join(format!("{id}.csv")))?;
            let mut header = vec!["t".to_string(), "alpha".into(), "dms_model_id".into()];
            header.extend(lookbacks.as_slice().iter().map(|l| format!("IP_{l}")));
            header.extend(["shat_dma".to_string(), "shat_dms".into()]);
            w.write_record(&header)?;
            for row in trace {
                let mut rec = vec![ym(row.month), fmt_f(row.alpha), row.dms_model_id.to_string()];
                rec.extend(row.inclusion.iter().map(|v| fmt_f(*v)));
                rec.extend([fmt_f(row.shat_dma), fmt_f(row.shat_dms)]);
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }
    if !result.filter_trace.is_empty() {
        let sub = dir.join("filter_trace");
        fs::create_dir_all(&sub)?;
        for (id, trace) in &result.filter_trace {
            let mut w = csv::Writer::from_path(sub.join(format!("{id}.csv")))?;
            let d = trace.first().map_or(0, |r| r.mean.len());
            let mut header = vec!["t".to_string(), "lambda".into(), "loglik".into()];
            header.extend((0..d).map(|i| format!("m{i}")));
            header.extend((0..d).map(|i| format!("C{i}{i}")));
            w.write_record(&header)?;
            for row in trace {
                let mut rec = vec![ym(row.month), fmt_f(row.lambda), fmt_f(row.log_lik)];
                rec.extend(row.mean.iter().map(|v| fmt_f(*v)));
                rec.extend(row.cov_diag.iter().map(|v| fmt_f(*v)));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
    }

    fs::write(dir.join("config.txt"), cfg.to_kv())?;
    let json = serde_json::to_string_pretty(&result.doc(cfg))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    Ok(())
}

/// Column layout of a comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Layout {
    /// Turnover, Mean, Vol, Max.DD, SR, fee.
    #[default]
    Standard,
    /// Accumulated return in place of the drawdown column.
    Crash,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Layout::Standard),
            "crash" => Ok(Layout::Crash),
            other => Err(Error::config(format!("unknown layout `{other}` (standard|crash)"))),
        }
    }
}

/// The strategy rows of the main comparison: DMA, DMS and every single
/// look-back under CP and TVP, then every naive look-back.
pub fn default_matrix(lookbacks: &LookbackSet) -> Vec<Strategy> {
    let mut rows = Vec::new();
    for mode in [LambdaMode::Cp, LambdaMode::Tvp] {
        rows.push(Strategy::new(Combine::Dma, mode));
        rows.push(Strategy::new(Combine::Dms, mode));
        for &l in lookbacks.as_slice() {
            rows.push(Strategy::new(Combine::Single(l), mode));
        }
    }
    rows.extend(lookbacks.as_slice().iter().map(|&l| Strategy::naive(l)));
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub strategy: String,
    pub row: String,
    pub group: String,
    pub report: PerfReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub layout: Layout,
    pub fee_benchmark: String,
    pub rows: Vec<MatrixRow>,
}

impl MatrixResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let dd = match self.layout {
            Layout::Standard => "max_dd",
            Layout::Crash => "accumulated",
        };
        w.write_record([
            "strategy", "row", "group", "turnover", "mean", "vol", dd, "sharpe", "phi", "accuracy",
            "mae", "relative_mae",
        ])?;
        for r in &self.rows {
            let p = &r.report;
            let dd_value = match self.layout {
                Layout::Standard => p.max_dd,
                Layout::Crash => p.accumulated,
            };
            w.write_record([
                r.strategy.clone(),
                r.row.clone(),
                r.group.clone(),
                fmt_opt(p.turnover),
                fmt_f(p.mean),
                fmt_opt(p.vol),
                fmt_f(dd_value),
                fmt_opt(p.sharpe),
                fmt_opt(p.phi),
                fmt_opt(p.accuracy),
                fmt_opt(p.mae),
                fmt_opt(p.relative_mae),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Runs every strategy in `rows` on a shared panel and window. Fees are
/// measured against the naive benchmark look-back.
pub fn run_matrix(panel: &PanelDataset, cfg: &RunConfig, rows: &[Strategy], layout: Layout) -> Result<MatrixResult> {
    if rows.is_empty() {
        return Err(Error::config("matrix has no rows"));
    }
    let b = cfg.benchmark_lookback();
    let fee_bench = Strategy::naive(b);
    let mae_bench = Strategy::new(Combine::Single(b), LambdaMode::Cp);
    let mut all = rows.to_vec();
    all.extend([fee_bench, mae_bench]);
    let computed = compute(panel, cfg, &all)?;
    let window = window_indices(panel, cfg.window)?;
    let bench = evaluate(&computed.runs[&fee_bench], window, cfg)?;
    let mae_ledger = computed.runs[&mae_bench].ledger(window.0, window.1)?;
    let mut out = Vec::with_capacity(rows.len());
    for s in rows {
        let eval = evaluate(&computed.runs[s], window, cfg)?;
        let (report, _) = report_for(panel, &eval, &bench, &mae_ledger, cfg)?;
        out.push(MatrixRow {
            strategy: s.to_string(),
            row: s.row_label(),
            group: s.group_label().into(),
            report,
        });
    }
    Ok(MatrixResult {
        layout,
        fee_benchmark: fee_bench.to_string(),
        rows: out,
    })
}

/// Per-asset summary statistics (annualized, percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSummary {
    pub asset_id: String,
    pub asset_class: AssetClass,
    pub start: String,
    pub end: String,
    pub months: usize,
    pub mean: f64,
    pub vol: Option<f64>,
    pub sharpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub assets: Vec<AssetSummary>,
    pub findings: Vec<crate::data::Finding>,
}

/// Loads raw rows and reports every problem instead of stopping at the first.
pub fn validate_data(path: &Path, schema: &crate::data::ColumnMap) -> Result<Diagnostics> {
    let rows = crate::data::read_rows(path, schema)?;
    let (mut assets, findings) = crate::data::assemble(rows);
    assets.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    let summaries = assets
        .iter()
        .map(|a| AssetSummary {
            asset_id: a.asset_id.clone(),
            asset_class: a.asset_class,
            start: a.start_month.to_string(),
            end: a.end_month().to_string(),
            months: a.len(),
            mean: crate::metrics::annualized_mean(&a.returns).unwrap_or(f64::NAN) * 100.0,
            vol: crate::metrics::annualized_vol(&a.returns).ok().map(|v| v * 100.0),
            sharpe: crate::metrics::sharpe(&a.returns).ok(),
        })
        .collect();
    Ok(Diagnostics {
        assets: summaries,
        findings,
    })
}

fn read_csv(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.records().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, path: &Path, row: usize) -> Result<T> {
    rec.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            row,
            msg: format!("bad or missing column {i}"),
        })
}

fn month_key(m: YearMonth) -> usize {
    m.months_since(YearMonth { year: 0, month: 1 }) as usize
}

/// Recomputes a report from a backtest bundle over `window`. The net series
/// is restricted to the window and rescaled there before any metric.
pub fn report_from_bundle(
    dir: &Path,
    window: Option<(YearMonth, YearMonth)>,
    gamma: f64,
    target: f64,
) -> Result<PerfReport> {
    let inside = |m: YearMonth| window.is_none_or(|(a, b)| m >= a && m <= b);

    let load_series = |name: &str, col: usize| -> Result<(Vec<usize>, Vec<f64>, Vec<YearMonth>)> {
        let path = dir.join(name);
        let mut months = Vec::new();
        let mut values = Vec::new();
        let mut yms = Vec::new();
        for (i, rec) in read_csv(&path)?.iter().enumerate() {
            let m: YearMonth = field(rec, 0, &path, i + 2)?;
            if inside(m) {
                months.push(month_key(m));
                values.push(field(rec, col, &path, i + 2)?);
                yms.push(m);
            }
        }
        Ok((months, values, yms))
    };
    let (months, net, yms) = load_series("returns.csv", 2)?;
    if net.is_empty() {
        return Err(Error::Insufficient("window holds no strategy returns".into()));
    }
    let (bmonths, bnet, _) = load_series("benchmark.csv", 1)?;
    let (scaled, _) = crate::portfolio::expost_scale(&net, target)?;
    let (bscaled, _) = crate::portfolio::expost_scale(&bnet, target)?;

    let path = dir.join("positions.csv");
    let mut by_month: BTreeMap<usize, Vec<PositionRow>> = BTreeMap::new();
    for (i, rec) in read_csv(&path)?.iter().enumerate() {
        let m: YearMonth = field(rec, 0, &path, i + 2)?;
        if !inside(m) {
            continue;
        }
        let sign: i8 = field(rec, 2, &path, i + 2)?;
        by_month.entry(month_key(m)).or_default().push(PositionRow {
            asset_id: field(rec, 1, &path, i + 2)?,
            // the class does not enter turnover
            asset_class: AssetClass::Equity,
            sign: if sign > 0 { Sign::Long } else { Sign::Short },
            weight: field(rec, 3, &path, i + 2)?,
            ret: 0.0,
        });
    }
    let books: Vec<MonthBook> = by_month
        .into_iter()
        .map(|(m, rows)| MonthBook::new(m, rows))
        .collect();

    let read_ledger = |name: &str, shat_col: usize, s_col: usize, cutoff_col: Option<usize>| -> Result<ForecastLedger> {
        let path = dir.join(name);
        let mut records = Vec::new();
        for (i, rec) in read_csv(&path)?.iter().enumerate() {
            let m: YearMonth = field(rec, 0, &path, i + 2)?;
            if !inside(m) {
                continue;
            }
            let shat: Option<f64> = rec.get(shat_col).and_then(|v| v.parse().ok());
            let cutoff: Option<f64> = cutoff_col.and_then(|c| rec.get(c)).and_then(|v| v.parse().ok());
            records.push((month_key(m), field::<String>(rec, 1, &path, i + 2)?, shat, cutoff, field::<u8>(rec, s_col, &path, i + 2)?));
        }
        ForecastLedger::new(
            records
                .into_iter()
                .map(|(month, asset_id, shat, cutoff, s)| ForecastRecord {
                    asset_id,
                    month,
                    shat,
                    s,
                    sign_pred: match (shat, cutoff) {
                        (Some(p), Some(c)) => apply_cutoff(p, c),
                        (Some(p), None) => apply_cutoff(p, 0.5),
                        _ => Sign::Long,
                    },
                })
                .collect(),
        )
    };
    let mut ledger = read_ledger("forecasts.csv", 2, 4, Some(3))?;
    // naive rows carry no forecast: take their signs from the positions
    let signs: BTreeMap<(usize, String), Sign> = books
        .iter()
        .flat_map(|b| b.rows.iter().map(move |r| ((b.month, r.asset_id.clone()), r.sign)))
        .collect();
    ledger = ForecastLedger::new(
        ledger
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                if let Some(s) = signs.get(&(r.month, r.asset_id.clone())) {
                    r.sign_pred = *s;
                }
                r
            })
            .collect(),
    )?;
    let mae_bench = read_ledger("mae_benchmark.csv", 2, 3, None)?;

    let mut report = subperiod_report(&ReportInputs {
        window: (yms[0].to_string(), yms.last().unwrap().to_string()),
        series: &scaled,
        benchmark: None,
        gamma,
        turnover: crate::portfolio::turnover(&books),
        ledger: Some(&ledger),
        mae_benchmark: Some(&mae_bench),
    })?;
    let (_, a, b) = align((&months, &scaled), (&bmonths, &bscaled));
    if !a.is_empty() {
        report.phi = Some(management_fee(&gross_returns(&a), &gross_returns(&b), gamma)?.bps_per_year);
    }
    Ok(report)
}
