//! Dynamic model averaging and selection over every non-empty subset of
//! momentum look-backs.
//!
//! Model `i` is identified by a bitmask over the look-back set (bit `k` set
//! when look-back `k` is a regressor). Models are kept in bitmask order,
//! which also fixes the summation order of every probability reduction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LookbackSet;
use crate::filter::{
    predict_prob, step_with_lambda_selection, FilterPrior, FilterState, LambdaGrid, LaplaceMode,
};

pub const MAX_LOOKBACKS: usize = 16;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: u32,
    /// Indices into the look-back set, ascending.
    pub columns: Vec<usize>,
}

impl ModelSpec {
    pub fn from_mask(model_id: u32, k: usize) -> Self {
        let columns = (0..k).filter(|b| model_id & (1 << b) != 0).collect();
        Self { model_id, columns }
    }

    pub fn n_predictors(&self) -> usize {
        self.columns.len()
    }

    pub fn contains(&self, column: usize) -> bool {
        self.model_id & (1 << column) != 0
    }

    /// Regressors for this model picked from the full vector `[1, Mom...]`.
    pub fn select(&self, x_full: &[f64]) -> DVector<f64> {
        let mut x = Vec::with_capacity(self.columns.len() + 1);
        x.push(x_full[0]);
        x.extend(self.columns.iter().map(|&c| x_full[c + 1]));
        DVector::from_vec(x)
    }
}

/// Candidate forgetting factors for model probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid(Vec<f64>);

impl Default for AlphaGrid {
    fn default() -> Self {
        Self(vec![0.99, 1.0])
    }
}

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("alpha grid is empty"));
        }
        if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::config(format!("alpha {v} not in (0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Which predicted probabilities enter the Bayes update at `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlphaTiming {
    /// The forgetting factor selected at `t` from the realized outcome
    /// discounts the update at `t` and the forecast at `t + 1`.
    #[default]
    SelectedAtUpdate,
    /// The update at `t` uses the same predicted probabilities that produced
    /// the forecast at `t`; the factor selected at `t` first acts at `t + 1`.
    ForecastAlpha,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn normalize_logs(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    logs.iter().map(|&l| (l - lse).exp()).collect()
}

/// `pi_i^alpha / sum_l pi_l^alpha`.
pub fn forecast_model_probs(pi_post: &[f64], alpha: f64) -> Vec<f64> {
    let logs: Vec<f64> = pi_post.iter().map(|&p| alpha * p.ln()).collect();
    normalize_logs(&logs)
}

/// Bayes rule with per-model log predictive likelihoods, followed by the
/// probability floor and renormalization.
pub fn update_model_probs(pi_pred: &[f64], log_liks: &[f64]) -> Result<Vec<f64>> {
    if pi_pred.len() != log_liks.len() {
        return Err(Error::config("probability and likelihood vectors differ in length"));
    }
    let logs: Vec<f64> = pi_pred
        .iter()
        .zip(log_liks)
        .map(|(&p, &l)| p.ln() + l)
        .collect();
    if !logs.iter().any(|l| l.is_finite()) {
        return Err(Error::numeric("no model has positive posterior mass"));
    }
    let mut post = normalize_logs(&logs);
    post.iter_mut().for_each(|p| *p = p.max(PROB_FLOOR));
    let total: f64 = post.iter().sum();
    post.iter_mut().for_each(|p| *p /= total);
    Ok(post)
}

/// Probability-weighted forecast.
pub fn dma_forecast(pi_pred: &[f64], forecasts: &[f64]) -> f64 {
    let v: f64 = pi_pred.iter().zip(forecasts).map(|(p, f)| p * f).sum();
    let lo = forecasts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = forecasts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.clamp(lo, hi)
}

/// Forecast of the most probable model. Ties go to the model with fewest
/// predictors, then the lowest id. Returns `(forecast, index)`.
pub fn dms_forecast(pi_pred: &[f64], forecasts: &[f64], specs: &[ModelSpec]) -> (f64, usize) {
    let mut best = 0;
    for i in 1..pi_pred.len() {
        let key = |j: usize| (specs[j].n_predictors(), specs[j].model_id);
        if pi_pred[i] > pi_pred[best] || (pi_pred[i] == pi_pred[best] && key(i) < key(best)) {
            best = i;
        }
    }
    (forecasts[best], best)
}

/// Total probability of the models containing look-back column `column`.
pub fn inclusion_probability(pi: &[f64], specs: &[ModelSpec], column: usize) -> f64 {
    pi.iter()
        .zip(specs)
        .filter(|(_, s)| s.contains(column))
        .map(|(p, _)| p)
        .sum()
}

/// Forecasts made before the outcome at `t` is seen.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolForecast {
    pub pi_pred: Vec<f64>,
    pub model_forecasts: Vec<f64>,
    pub dma: f64,
    pub dms: f64,
    pub dms_model_id: u32,
}

/// Everything recorded for one pool step.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolForecastRecord {
    pub forecast: PoolForecast,
    pub alpha: f64,
    pub lambdas: Vec<f64>,
    pub log_liks: Vec<f64>,
    /// Inclusion probability per look-back after the update.
    pub inclusion: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PoolState {
    pub lookbacks: LookbackSet,
    pub specs: Vec<ModelSpec>,
    pub filters: Vec<FilterState>,
    pub pi_post: Vec<f64>,
    pub pi_pred: Vec<f64>,
    pub last_alpha: f64,
}

impl PoolState {
    pub fn new(lookbacks: &LookbackSet, prior: &FilterPrior) -> Result<Self> {
        let k = lookbacks.len();
        if k == 0 || k > MAX_LOOKBACKS {
            return Err(Error::config(format!(
                "{k} look-backs: the model pool supports 1..={MAX_LOOKBACKS}"
            )));
        }
        let m = (1u32 << k) - 1;
        let specs: Vec<ModelSpec> = (1..=m).map(|id| ModelSpec::from_mask(id, k)).collect();
        let filters = specs
            .iter()
            .map(|s| prior.initial_state(s.n_predictors() + 1))
            .collect();
        let uniform = vec![1.0 / m as f64; m as usize];
        Ok(Self {
            lookbacks: lookbacks.clone(),
            specs,
            filters,
            pi_post: uniform.clone(),
            pi_pred: uniform,
            last_alpha: 1.0,
        })
    }

    pub fn n_models(&self) -> usize {
        self.specs.len()
    }

    pub fn index_of(&self, model_id: u32) -> Option<usize> {
        (model_id >= 1 && (model_id as usize) <= self.specs.len()).then(|| model_id as usize - 1)
    }

    /// Per-model and combined forecasts at `t` from information through `t-1`.
    pub fn forecast(&self, x_full: &[f64]) -> Result<PoolForecast> {
        if x_full.len() != self.lookbacks.len() + 1 {
            return Err(Error::config(format!(
                "expected {} regressors, got {}",
                self.lookbacks.len() + 1,
                x_full.len()
            )));
        }
        let pi_pred = forecast_model_probs(&self.pi_post, self.last_alpha);
        let model_forecasts: Vec<f64> = self
            .specs
            .iter()
            .zip(&self.filters)
            .map(|(spec, f)| predict_prob(&f.mean, &spec.select(x_full)))
            .collect();
        let dma = dma_forecast(&pi_pred, &model_forecasts);
        let (dms, i) = dms_forecast(&pi_pred, &model_forecasts, &self.specs);
        Ok(PoolForecast {
            dms_model_id: self.specs[i].model_id,
            pi_pred,
            model_forecasts,
            dma,
            dms,
        })
    }

    /// Forecast, then update every model and the model probabilities with
    /// the realized label `s`.
    pub fn step(
        &mut self,
        x_full: &[f64],
        s: u8,
        lambda_grid: &LambdaGrid,
        alpha_grid: &AlphaGrid,
        laplace: LaplaceMode,
        timing: AlphaTiming,
    ) -> Result<PoolForecastRecord> {
        let forecast = self.forecast(x_full)?;

        let mut lambdas = Vec::with_capacity(self.n_models());
        let mut log_liks = Vec::with_capacity(self.n_models());
        for (spec, filter) in self.specs.iter().zip(self.filters.iter_mut()) {
            let step =
                step_with_lambda_selection(filter, &spec.select(x_full), s, lambda_grid, laplace)?;
            lambdas.push(step.lambda);
            log_liks.push(step.log_lik());
            *filter = step.state;
        }

        // alpha maximizing the average predictive likelihood, ties to larger alpha
        let mut chosen: Option<(f64, f64, Vec<f64>)> = None;
        for &alpha in alpha_grid.values() {
            let pi = forecast_model_probs(&self.pi_post, alpha);
            let logs: Vec<f64> = pi.iter().zip(&log_liks).map(|(p, l)| p.ln() + l).collect();
            let score = log_sum_exp(&logs);
            let better = match &chosen {
                None => true,
                Some((a, sc, _)) => score > *sc || (score == *sc && alpha > *a),
            };
            if better {
                chosen = Some((alpha, score, pi));
            }
        }
        let (alpha, _, pi_selected) = chosen.expect("alpha grid is non-empty");

        let pi_for_update = match timing {
            AlphaTiming::SelectedAtUpdate => pi_selected,
            AlphaTiming::ForecastAlpha => forecast.pi_pred.clone(),
        };
        self.pi_pred = pi_for_update;
        self.pi_post = update_model_probs(&self.pi_pred, &log_liks)?;
        self.last_alpha = alpha;

        let inclusion = (0..self.lookbacks.len())
            .map(|c| inclusion_probability(&self.pi_post, &self.specs, c))
            .collect();
        Ok(PoolForecastRecord {
            forecast,
            alpha,
            lambdas,
            log_liks,
            inclusion,
        })
    }

    /// Inclusion probability of look-back `lookback` under the current posterior.
    pub fn inclusion_probability(&self, lookback: usize) -> Result<f64> {
        let c = self
            .lookbacks
            .position(lookback)
            .ok_or_else(|| Error::config(format!("look-back {lookback} is not in the pool")))?;
        Ok(inclusion_probability(&self.pi_post, &self.specs, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{DynamicLogit, FilterPrior};
    use approx::assert_relative_eq;

    fn lb(v: &[usize]) -> LookbackSet {
        LookbackSet::new(v.to_vec()).unwrap()
    }

    #[test]
    fn pool_sizes() {
        let prior = FilterPrior::default();
        let p = PoolState::new(&LookbackSet::default(), &prior).unwrap();
        assert_eq!(p.n_models(), 127);
        let p = PoolState::new(&lb(&[3]), &prior).unwrap();
        assert_eq!(p.n_models(), 1);
        assert_eq!(p.pi_post, vec![1.0]);
        let p = PoolState::new(&lb(&[1, 2]), &prior).unwrap();
        let cols: Vec<_> = p.specs.iter().map(|s| s.columns.clone()).collect();
        assert_eq!(cols, vec![vec![0], vec![1], vec![0, 1]]);
        let big = LookbackSet::new((1..=17).collect()).unwrap();
        assert!(PoolState::new(&big, &prior).is_err());
    }

    #[test]
    fn forgetting_probabilities() {
        assert_eq!(forecast_model_probs(&[0.8, 0.2], 1.0), vec![0.8, 0.2]);
        let p = forecast_model_probs(&[0.8, 0.2], 0.99);
        let a = 0.8f64.powf(0.99);
        let b = 0.2f64.powf(0.99);
        assert_relative_eq!(p[0], a / (a + b), epsilon = 1e-14);
        assert_relative_eq!(p[0], 0.7978, epsilon = 1e-4);
        assert_relative_eq!(p[1], 0.2022, epsilon = 1e-4);
        let u = forecast_model_probs(&[0.25; 4], 0.9);
        u.iter().for_each(|&x| assert_relative_eq!(x, 0.25, epsilon = 1e-15));
    }

    #[test]
    fn bayes_rule() {
        let post = update_model_probs(&[0.5, 0.5], &[0.2f64.ln(), 0.1f64.ln()]).unwrap();
        assert_relative_eq!(post[0], 2.0 / 3.0, epsilon = 1e-14);
        let post = update_model_probs(&[0.3, 0.7], &[-1.0, -1.0]).unwrap();
        assert_relative_eq!(post[0], 0.3, epsilon = 1e-14);
        let post = update_model_probs(&[0.25; 4], &[10f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(post[0], 10.0 / 13.0, epsilon = 1e-14);
    }

    #[test]
    fn floor_keeps_models_alive() {
        let post = update_model_probs(&[0.5, 0.5], &[0.0, -1e4]).unwrap();
        assert!(post[1] > 0.0);
        assert_relative_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn combinations() {
        assert_relative_eq!(dma_forecast(&[0.25, 0.75], &[0.4, 0.6]), 0.55, epsilon = 1e-15);
        assert_eq!(dma_forecast(&[0.1, 0.2, 0.7], &[0.3, 0.3, 0.3]), 0.3);
        assert_eq!(dma_forecast(&[1.0], &[0.42]), 0.42);

        let specs: Vec<_> = (1..=3).map(|i| ModelSpec::from_mask(i, 2)).collect();
        assert_eq!(dms_forecast(&[0.2, 0.5, 0.3], &[0.1, 0.2, 0.3], &specs), (0.2, 1));
        // uniform: fewest predictors, then lowest id
        let third = 1.0 / 3.0;
        assert_eq!(dms_forecast(&[third; 3], &[0.1, 0.2, 0.3], &specs), (0.1, 0));
        let (dms, _) = dms_forecast(&[0.0, 1.0, 0.0], &[0.1, 0.2, 0.3], &specs);
        assert_eq!(dms, dma_forecast(&[0.0, 1.0, 0.0], &[0.1, 0.2, 0.3]));
    }

    #[test]
    fn inclusion_probabilities() {
        let prior = FilterPrior::default();
        let p = PoolState::new(&LookbackSet::default(), &prior).unwrap();
        for &l in LookbackSet::default().as_slice() {
            assert_relative_eq!(p.inclusion_probability(l).unwrap(), 64.0 / 127.0, epsilon = 1e-12);
        }
        assert!(p.inclusion_probability(3).is_err());

        let mut pi = vec![0.0; 127];
        pi[0] = 1.0; // {1m}
        assert_eq!(inclusion_probability(&pi, &p.specs, 0), 1.0);
        assert_eq!(inclusion_probability(&pi, &p.specs, 1), 0.0);

        let pi: Vec<f64> = (1..=127).map(|i| i as f64 / (127.0 * 64.0)).collect();
        let lhs: f64 = (0..7).map(|c| inclusion_probability(&pi, &p.specs, c)).sum();
        let rhs: f64 = pi.iter().zip(&p.specs).map(|(q, s)| q * s.n_predictors() as f64).sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn single_model_pool_is_a_filter() {
        let lbs = lb(&[1]);
        let prior = FilterPrior::default();
        let mut pool = PoolState::new(&lbs, &prior).unwrap();
        let mut single = DynamicLogit::new(2, &prior, LambdaGrid::time_varying(), LaplaceMode::UpdatedMean);
        let alpha = AlphaGrid::new(vec![1.0]).unwrap();
        let data = [(0.03, 1u8), (-0.02, 0), (0.01, 0), (0.05, 1), (-0.04, 1)];
        for (m, s) in data {
            let x = [1.0, m];
            let rec = pool
                .step(&x, s, &LambdaGrid::time_varying(), &alpha, LaplaceMode::UpdatedMean, AlphaTiming::default())
                .unwrap();
            let xv = DVector::from_vec(x.to_vec());
            assert_eq!(rec.forecast.dma, single.forecast(&xv));
            assert_eq!(rec.forecast.dms, single.forecast(&xv));
            single.observe(&xv, s).unwrap();
            assert_eq!(pool.filters[0], single.state);
        }
    }

    #[test]
    fn alpha_tie_picks_larger() {
        // single model: every alpha yields the same score
        let mut pool = PoolState::new(&lb(&[1]), &FilterPrior::default()).unwrap();
        let rec = pool
            .step(&[1.0, 0.1], 1, &LambdaGrid::constant(), &AlphaGrid::default(), LaplaceMode::UpdatedMean, AlphaTiming::default())
            .unwrap();
        assert_eq!(rec.alpha, 1.0);
    }

    #[test]
    fn probabilities_stay_normalized() {
        let mut pool = PoolState::new(&lb(&[1, 2, 4]), &FilterPrior::default()).unwrap();
        let mut r = 0.01;
        for t in 0..200 {
            r = -0.6 * r + 0.03 * ((t * 7919 % 13) as f64 - 6.0) / 6.0;
            let x = [1.0, r, 0.5 * r, -r];
            let s = u8::from((t * 31) % 5 < 3);
            pool.step(&x, s, &LambdaGrid::time_varying(), &AlphaGrid::default(), LaplaceMode::UpdatedMean, AlphaTiming::default())
                .unwrap();
            assert!((pool.pi_post.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!((pool.pi_pred.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(pool.pi_post.iter().all(|&p| p >= 0.0));
        }
    }
}
