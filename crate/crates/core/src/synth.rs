//! Deterministic synthetic panels with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{AssetClass, AssetSeries, PanelDataset, YearMonth};
use crate::error::{Error, Result};
use crate::features::momentum;
use crate::filter::logistic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    IidGaussian {
        mean: f64,
        sd: f64,
    },
    Ar1 {
        phi: f64,
        sd: f64,
    },
    /// Trend labels drawn from a logistic model on momentum features;
    /// returns carry the drawn sign with half-normal magnitude.
    RegimeSwitchingLogit {
        lookbacks: Vec<usize>,
        /// Intercept followed by one coefficient per look-back.
        before: Vec<f64>,
        after: Vec<f64>,
        /// Index into each asset's series where `after` takes over.
        flip_month: Option<usize>,
        abs_sd: f64,
    },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::IidGaussian { .. } => "iid-gaussian",
            Generator::Ar1 { .. } => "ar1",
            Generator::RegimeSwitchingLogit { .. } => "regime-switching-logit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub generator: Generator,
    pub n_assets: usize,
    pub n_months: usize,
    pub start: YearMonth,
    /// Assets start at a uniformly drawn offset in `0..=max_start_offset`
    /// months and all end on the last calendar month.
    pub max_start_offset: usize,
}

impl SynthSpec {
    pub fn new(generator: Generator, n_assets: usize, n_months: usize) -> Self {
        Self {
            generator,
            n_assets,
            n_months,
            start: YearMonth { year: 1980, month: 1 },
            max_start_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_assets == 0 || self.n_months == 0 {
            return Err(Error::config("synthetic panel needs assets and months"));
        }
        if self.max_start_offset >= self.n_months {
            return Err(Error::config("start offset must leave at least one month"));
        }
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must be positive, got {v}")))
            }
        };
        match &self.generator {
            Generator::IidGaussian { mean, sd } => {
                positive(*sd, "sd")?;
                if !mean.is_finite() {
                    return Err(Error::config("mean must be finite"));
                }
            }
            Generator::Ar1 { phi, sd } => {
                positive(*sd, "sd")?;
                if !(phi.abs() < 1.0) {
                    return Err(Error::config(format!("ar1 persistence {phi} must be in (-1, 1)")));
                }
            }
            Generator::RegimeSwitchingLogit {
                lookbacks,
                before,
                after,
                flip_month,
                abs_sd,
            } => {
                positive(*abs_sd, "abs_sd")?;
                if lookbacks.is_empty() || lookbacks.contains(&0) {
                    return Err(Error::config("planted look-backs must be non-empty and positive"));
                }
                let d = lookbacks.len() + 1;
                if before.len() != d || after.len() != d {
                    return Err(Error::config(format!(
                        "planted coefficients need {d} entries (intercept + one per look-back)"
                    )));
                }
                if flip_month.is_some_and(|f| f >= self.n_months) {
                    return Err(Error::config("flip month lies beyond the sample"));
                }
            }
        }
        Ok(())
    }
}

/// Planted parameters behind a synthetic panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec: SynthSpec,
    pub flip_month: Option<usize>,
    pub planted_lookbacks: Vec<usize>,
    /// Per asset: the planted probability of a non-negative return at each month.
    pub planted_probs: Vec<Vec<f64>>,
}

fn simulate_asset(generator: &Generator, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    match generator {
        Generator::IidGaussian { mean, sd } => {
            let normal = Normal::new(*mean, *sd).unwrap();
            ((0..n).map(|_| normal.sample(rng)).collect(), Vec::new())
        }
        Generator::Ar1 { phi, sd } => {
            let normal = Normal::new(0.0, *sd).unwrap();
            let mut prev = normal.sample(rng) / (1.0 - phi * phi).sqrt();
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(prev);
                prev = phi * prev + normal.sample(rng);
            }
            (out, Vec::new())
        }
        Generator::RegimeSwitchingLogit {
            lookbacks,
            before,
            after,
            flip_month,
            abs_sd,
        } => {
            let magnitude = Normal::new(0.0, *abs_sd).unwrap();
            let warmup = *lookbacks.iter().max().unwrap();
            let mut r = Vec::with_capacity(n);
            let mut probs = Vec::with_capacity(n);
            for t in 0..n {
                let p = if t < warmup {
                    0.5
                } else {
                    let beta = match flip_month {
                        Some(f) if t >= *f => after,
                        _ => before,
                    };
                    let z = beta[0]
                        + lookbacks
                            .iter()
                            .zip(&beta[1..])
                            .map(|(&l, b)| b * momentum(&r, t, l).unwrap())
                            .sum::<f64>();
                    logistic(z)
                };
                let up = rng.random::<f64>() < p;
                let size = magnitude.sample(rng).abs();
                r.push(if up { size } else { -size });
                probs.push(p);
            }
            (r, probs)
        }
    }
}

/// Generates a panel; a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<(PanelDataset, GroundTruth)> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut assets = Vec::with_capacity(spec.n_assets);
    let mut planted_probs = Vec::with_capacity(spec.n_assets);
    for i in 0..spec.n_assets {
        let offset = if spec.max_start_offset > 0 {
            master.random_range(0..=spec.max_start_offset)
        } else {
            0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let (returns, probs) = simulate_asset(&spec.generator, spec.n_months - offset, &mut rng);
        assets.push(AssetSeries::new(
            format!("SYN{i:03}"),
            AssetClass::ALL[i % AssetClass::ALL.len()],
            spec.start.offset(offset as i64),
            returns,
        )?);
        planted_probs.push(probs);
    }
    let (flip_month, planted_lookbacks) = match &spec.generator {
        Generator::RegimeSwitchingLogit {
            flip_month,
            lookbacks,
            ..
        } => (*flip_month, lookbacks.clone()),
        _ => (None, Vec::new()),
    };
    let truth = GroundTruth {
        seed,
        spec: spec.clone(),
        flip_month,
        planted_lookbacks,
        planted_probs,
    };
    Ok((PanelDataset::new(assets)?, truth))
}
