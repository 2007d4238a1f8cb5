//! Momentum regressors, binary trend labels and ex-ante EWMA volatility.

use serde::{Deserialize, Serialize};

use crate::data::AssetSeries;
use crate::error::{Error, Result};

/// Ordered look-back periods in months.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookbackSet(Vec<usize>);

impl Default for LookbackSet {
    fn default() -> Self {
        Self(vec![1, 2, 4, 6, 8, 10, 12])
    }
}

impl LookbackSet {
    pub fn new(lookbacks: Vec<usize>) -> Result<Self> {
        if lookbacks.is_empty() {
            return Err(Error::config("lookback set is empty"));
        }
        if lookbacks[0] == 0 {
            return Err(Error::config("lookbacks must be positive"));
        }
        if lookbacks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lookbacks must be strictly increasing"));
        }
        Ok(Self(lookbacks))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn position(&self, lookback: usize) -> Option<usize> {
        self.0.iter().position(|&l| l == lookback)
    }
}

/// Cumulative log-return over the `lookback` months strictly before `t`.
///
/// Returns `None` when fewer than `lookback` lagged returns exist.
pub fn momentum(returns: &[f64], t: usize, lookback: usize) -> Option<f64> {
    if lookback == 0 || t < lookback || t > returns.len() {
        return None;
    }
    Some(returns[t - lookback..t].iter().sum())
}

/// Trend label: 1 when the realized return is non-negative.
pub fn label(r: f64) -> u8 {
    u8::from(r >= 0.0)
}

/// Reference level for squared deviations in the EWMA recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanConvention {
    /// Expanding sample mean of the history seen so far.
    Running,
    /// Deviations taken from zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaConfig {
    pub decay: f64,
    pub periods_per_year: f64,
    /// Annualized volatility floor.
    pub floor: f64,
    pub mean: MeanConvention,
}

impl Default for EwmaConfig {
    fn default() -> Self {
        Self {
            decay: 0.97,
            periods_per_year: 12.0,
            floor: 0.005,
            mean: MeanConvention::Running,
        }
    }
}

impl EwmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config(format!("ewma decay {} not in (0,1)", self.decay)));
        }
        if !(self.periods_per_year > 0.0) || !(self.floor > 0.0) {
            return Err(Error::config("ewma periods_per_year and floor must be positive"));
        }
        Ok(())
    }
}

/// Streaming EWMA variance.
///
/// With a running mean the first observation has zero deviation by
/// construction, so the recursion is seeded with the squared deviation of
/// the second observation and updated from the third onwards.
#[derive(Debug, Clone)]
pub struct EwmaTracker {
    cfg: EwmaConfig,
    n: usize,
    sum: f64,
    var: f64,
}

impl EwmaTracker {
    pub fn new(cfg: EwmaConfig) -> Self {
        Self {
            cfg,
            n: 0,
            sum: 0.0,
            var: 0.0,
        }
    }

    pub fn push(&mut self, r: f64) {
        self.n += 1;
        self.sum += r;
        let center = match self.cfg.mean {
            MeanConvention::Running => self.sum / self.n as f64,
            MeanConvention::Zero => 0.0,
        };
        let dev2 = (r - center) * (r - center);
        match self.n {
            1 => {}
            2 => self.var = dev2,
            _ => self.var = self.cfg.decay * self.var + (1.0 - self.cfg.decay) * dev2,
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Annualized volatility of the history pushed so far, floored.
    pub fn volatility(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        let sigma = (self.cfg.periods_per_year * self.var).sqrt();
        Some(sigma.max(self.cfg.floor))
    }
}

/// Annualized ex-ante volatility from `history` (returns through t-1).
pub fn ewma_vol(history: &[f64], cfg: &EwmaConfig) -> Option<f64> {
    let mut tracker = EwmaTracker::new(*cfg);
    history.iter().for_each(|&r| tracker.push(r));
    tracker.volatility()
}

/// Inputs for one asset-month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub asset_id: String,
    /// Index into the asset's own return series.
    pub t: usize,
    /// Intercept followed by one momentum value per look-back.
    pub x: Vec<f64>,
    pub s: u8,
    pub sigma_ante: f64,
    pub r: f64,
}

/// Per-month momentum, labels and volatility for one asset. Momentum for a
/// look-back is `None` until enough history exists.
#[derive(Debug, Clone)]
pub struct AssetFeatures {
    pub lookbacks: LookbackSet,
    /// `momentum[t][k]` for look-back `k`.
    pub momentum: Vec<Vec<Option<f64>>>,
    pub labels: Vec<u8>,
    pub sigma: Vec<Option<f64>>,
}

impl AssetFeatures {
    pub fn compute(returns: &[f64], lookbacks: &LookbackSet, ewma: &EwmaConfig) -> Self {
        let n = returns.len();
        let mut tracker = EwmaTracker::new(*ewma);
        let mut sigma = Vec::with_capacity(n);
        for &r in returns {
            sigma.push(tracker.volatility());
            tracker.push(r);
        }
        let momentum = (0..n)
            .map(|t| {
                lookbacks
                    .as_slice()
                    .iter()
                    .map(|&l| momentum(returns, t, l))
                    .collect()
            })
            .collect();
        Self {
            lookbacks: lookbacks.clone(),
            momentum,
            labels: returns.iter().map(|&r| label(r)).collect(),
            sigma,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Regressor vector `[1, Mom^L for L in columns]` at `t`, if all available.
    pub fn regressors(&self, t: usize, columns: &[usize]) -> Option<Vec<f64>> {
        let row = &self.momentum[t];
        let mut x = Vec::with_capacity(columns.len() + 1);
        x.push(1.0);
        for &k in columns {
            x.push(row[k]?);
        }
        Some(x)
    }

    /// Full feature row at `t` over every look-back, when all inputs exist.
    pub fn row(&self, asset: &AssetSeries, t: usize) -> Option<FeatureRow> {
        let all: Vec<usize> = (0..self.lookbacks.len()).collect();
        Some(FeatureRow {
            asset_id: asset.asset_id.clone(),
            t,
            x: self.regressors(t, &all)?,
            s: self.labels[t],
            sigma_ante: self.sigma[t]?,
            r: asset.returns[t],
        })
    }
}

/// Audit dump: `month, s, sigma_ante, mom_<L>...`; unavailable cells are empty.
pub fn write_feature_csv(
    asset: &AssetSeries,
    features: &AssetFeatures,
    out: &std::path::Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["month".to_string(), "s".into(), "sigma_ante".into()];
    header.extend(features.lookbacks.as_slice().iter().map(|l| format!("mom_{l}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    for t in 0..features.len() {
        let mut rec = vec![
            asset.start_month.offset(t as i64).to_string(),
            features.labels[t].to_string(),
            opt(features.sigma[t]),
        ];
        rec.extend(features.momentum[t].iter().map(|&m| opt(m)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn momentum_sums_lags() {
        let r = [0.5, 0.02, 0.01, 0.7];
        assert_relative_eq!(momentum(&r, 3, 2).unwrap(), 0.03, epsilon = 1e-15);
        assert_eq!(momentum(&[0.0; 10], 10, 4), Some(0.0));
        assert_eq!(momentum(&r, 1, 2), None);
    }

    #[test]
    fn momentum_matches_brute_force_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r: Vec<f64> = (0..24).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut expected = 0.0;
        for v in &r[12..24] {
            expected += v;
        }
        assert_relative_eq!(momentum(&r, 24, 12).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn momentum_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..30).map(|_| rng.random_range(-0.1..0.1)).collect();
        let t = 25;
        let gap: f64 = r[t - 12..t - 4].iter().sum();
        assert_relative_eq!(
            momentum(&r, t, 4).unwrap() + gap,
            momentum(&r, t, 12).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn labels() {
        assert_eq!(label(0.0), 1);
        assert_eq!(label(-0.001), 0);
        assert_eq!(label(0.05), 1);
    }

    #[test]
    fn lookback_validation() {
        assert!(LookbackSet::new(vec![]).is_err());
        assert!(LookbackSet::new(vec![0, 1]).is_err());
        assert!(LookbackSet::new(vec![2, 2]).is_err());
        assert_eq!(LookbackSet::default().len(), 7);
    }

    #[test]
    fn ewma_constant_series_is_floored() {
        let cfg = EwmaConfig::default();
        assert_eq!(ewma_vol(&[0.01; 50], &cfg), Some(cfg.floor));
        assert_eq!(ewma_vol(&[0.01], &cfg), None);
    }

    #[test]
    fn ewma_two_observations() {
        // running mean 0.05, seed deviation (0.1 - 0.05)^2
        let v: f64 = 0.05 * 0.05;
        let expected = (12.0 * v).sqrt();
        let got = ewma_vol(&[0.0, 0.1], &EwmaConfig::default()).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-15);

        // third observation goes through the decay update
        let mean3 = (0.0 + 0.1 + 0.04) / 3.0;
        let v3 = 0.97 * v + 0.03 * (0.04f64 - mean3).powi(2);
        let got = ewma_vol(&[0.0, 0.1, 0.04], &EwmaConfig::default()).unwrap();
        assert_relative_eq!(got, (12.0 * v3).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn ewma_recovers_annualized_vol() {
        let sd = 0.04 / 12f64.sqrt();
        let normal = Normal::new(0.0, sd).unwrap();
        let mut rel_errs = Vec::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..600).map(|_| normal.sample(&mut rng)).collect();
            let s = ewma_vol(&r, &EwmaConfig::default()).unwrap();
            rel_errs.push((s - 0.04).abs() / 0.04);
        }
        let avg = rel_errs.iter().sum::<f64>() / rel_errs.len() as f64;
        assert!(avg < 0.15, "average relative error {avg}");
    }

    #[test]
    fn features_are_ex_ante() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r: Vec<f64> = (0..40).map(|_| rng.random_range(-0.1..0.1)).collect();
        let lb = LookbackSet::default();
        let cfg = EwmaConfig::default();
        let before = AssetFeatures::compute(&r, &lb, &cfg);
        let t = 20;
        r[t] += 0.5;
        let after = AssetFeatures::compute(&r, &lb, &cfg);
        for j in 0..=t {
            assert_eq!(before.momentum[j], after.momentum[j]);
            assert_eq!(before.sigma[j], after.sigma[j]);
        }
        assert_ne!(before.momentum[t + 1], after.momentum[t + 1]);
    }

    #[test]
    fn regressors_start_with_intercept() {
        let r = vec![0.01; 20];
        let f = AssetFeatures::compute(&r, &LookbackSet::default(), &EwmaConfig::default());
        assert_eq!(f.regressors(11, &[6]), None);
        let x = f.regressors(12, &[0, 6]).unwrap();
        assert_eq!(x[0], 1.0);
        assert_relative_eq!(x[2], 0.12, epsilon = 1e-15);
    }
}
