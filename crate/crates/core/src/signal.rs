//! Mapping forecast probabilities to long/short signs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Long,
    Short,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Long => 1.0,
            Sign::Short => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Long => 1,
            Sign::Short => -1,
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::Long => Sign::Short,
            Sign::Short => Sign::Long,
        }
    }

    /// Realized direction of a label.
    pub fn of_label(s: u8) -> Sign {
        if s == 1 {
            Sign::Long
        } else {
            Sign::Short
        }
    }
}

/// Long when `shat >= c`.
pub fn apply_cutoff(shat: f64, c: f64) -> Sign {
    if shat >= c {
        Sign::Long
    } else {
        Sign::Short
    }
}

/// `{0.49, 0.491, ..., 0.51}`.
pub fn cv1_grid() -> Vec<f64> {
    (490..=510).map(|i| i as f64 / 1000.0).collect()
}

/// `{0.45, 0.46, ..., 0.55}`.
pub fn cv2_grid() -> Vec<f64> {
    (45..=55).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecondMoment {
    /// Mean of squared returns of the given sign.
    MeanSquare,
    /// Sample variance of returns of the given sign.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CutoffPolicy {
    Fixed(f64),
    /// Trailing-accuracy cross-validation over `grid`, using at most `window`
    /// of the most recent out-of-sample outcomes.
    Cv { grid: Vec<f64>, window: usize },
    /// Expected quadratic utility over historical conditional returns.
    Bayes { gamma: f64, moment: SecondMoment },
}

impl Default for CutoffPolicy {
    fn default() -> Self {
        CutoffPolicy::Fixed(0.5)
    }
}

impl CutoffPolicy {
    pub fn cv1() -> Self {
        CutoffPolicy::Cv {
            grid: cv1_grid(),
            window: 36,
        }
    }

    pub fn cv2() -> Self {
        CutoffPolicy::Cv {
            grid: cv2_grid(),
            window: 36,
        }
    }

    pub fn bayes() -> Self {
        CutoffPolicy::Bayes {
            gamma: 10.0,
            moment: SecondMoment::MeanSquare,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |c: f64| c > 0.0 && c < 1.0;
        match self {
            CutoffPolicy::Fixed(c) if !in_unit(*c) => {
                Err(Error::config(format!("cutoff {c} not in (0,1)")))
            }
            CutoffPolicy::Cv { grid, window } => {
                if grid.is_empty() || grid.iter().any(|&c| !in_unit(c)) {
                    return Err(Error::config("cv grid must be non-empty and inside (0,1)"));
                }
                if *window == 0 {
                    return Err(Error::config("cv window must be positive"));
                }
                Ok(())
            }
            CutoffPolicy::Bayes { gamma, .. } if !(*gamma >= 0.0) => {
                Err(Error::config(format!("risk aversion {gamma} must be non-negative")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CutoffPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CutoffPolicy::Fixed(c) => write!(f, "fixed:{c}"),
            CutoffPolicy::Cv { grid, .. } if *grid == cv1_grid() => f.write_str("cv1"),
            CutoffPolicy::Cv { grid, .. } if *grid == cv2_grid() => f.write_str("cv2"),
            CutoffPolicy::Cv { .. } => f.write_str("cv"),
            CutoffPolicy::Bayes { .. } => f.write_str("bayes"),
        }
    }
}

impl FromStr for CutoffPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let policy = match s.trim() {
            "cv1" => CutoffPolicy::cv1(),
            "cv2" => CutoffPolicy::cv2(),
            "bayes" => CutoffPolicy::bayes(),
            other => {
                let c = other
                    .strip_prefix("fixed:")
                    .or(Some(other).filter(|o| *o == "fixed").map(|_| "0.5"))
                    .ok_or_else(|| Error::config(format!("unknown cutoff policy `{other}`")))?;
                CutoffPolicy::Fixed(
                    c.parse()
                        .map_err(|_| Error::config(format!("bad cutoff value `{c}`")))?,
                )
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Grid cutoff with the best accuracy on `history` of `(shat, s)` pairs.
/// Ties go to the value nearest 0.5, then the lower value; an empty history
/// yields 0.5.
pub fn cv_select_cutoff(history: &[(f64, u8)], grid: &[f64]) -> f64 {
    if history.is_empty() || grid.is_empty() {
        return 0.5;
    }
    let mut best: Option<(usize, f64)> = None;
    for &c in grid {
        let hits = history
            .iter()
            .filter(|&&(shat, s)| apply_cutoff(shat, c) == Sign::of_label(s))
            .count();
        let better = match best {
            None => true,
            Some((h, b)) => {
                hits > h
                    || (hits == h
                        && ((c - 0.5).abs() < (b - 0.5).abs()
                            || ((c - 0.5).abs() == (b - 0.5).abs() && c < b)))
            }
        };
        if better {
            best = Some((hits, c));
        }
    }
    best.unwrap().1
}

/// Outcome utilities for a mean-variance investor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityTable {
    pub long_pos: f64,
    pub long_neg: f64,
    pub short_pos: f64,
    pub short_neg: f64,
    pub gamma: f64,
}

impl UtilityTable {
    /// Builds utilities from conditional return estimates.
    pub fn from_estimates(
        mean_pos: f64,
        mean_neg: f64,
        moment_pos: f64,
        moment_neg: f64,
        gamma: f64,
    ) -> Self {
        let k = gamma / (2.0 * (1.0 + gamma));
        Self {
            long_pos: mean_pos - k * moment_pos,
            long_neg: mean_neg - k * moment_neg,
            short_pos: -mean_pos - k * moment_pos,
            short_neg: -mean_neg - k * moment_neg,
            gamma,
        }
    }

    /// Estimates from returns observed strictly before the decision month.
    /// Returns `None` unless both signs have been observed.
    pub fn from_history(history: &[f64], gamma: f64, moment: SecondMoment) -> Option<Self> {
        let stats = |it: &mut dyn Iterator<Item = f64>| -> Option<(f64, f64)> {
            let v: Vec<f64> = it.collect();
            if v.is_empty() {
                return None;
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let m2 = match moment {
                SecondMoment::MeanSquare => v.iter().map(|r| r * r).sum::<f64>() / n,
                SecondMoment::Variance if v.len() > 1 => {
                    v.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
                }
                SecondMoment::Variance => 0.0,
            };
            Some((mean, m2))
        };
        let (mp, sp) = stats(&mut history.iter().copied().filter(|&r| r >= 0.0))?;
        let (mn, sn) = stats(&mut history.iter().copied().filter(|&r| r < 0.0))?;
        Some(Self::from_estimates(mp, mn, sp, sn, gamma))
    }

    pub fn expected_long(&self, shat: f64) -> f64 {
        shat * self.long_pos + (1.0 - shat) * self.long_neg
    }

    pub fn expected_short(&self, shat: f64) -> f64 {
        shat * self.short_pos + (1.0 - shat) * self.short_neg
    }

    /// Probability at which both positions have equal expected utility,
    /// when it lies inside (0,1).
    pub fn implicit_cutoff(&self) -> Option<f64> {
        let a = self.long_pos - self.short_pos;
        let b = self.long_neg - self.short_neg;
        let c = b / (b - a);
        (c.is_finite() && c > 0.0 && c < 1.0).then_some(c)
    }
}

/// Long when expected utility of a long position is at least that of a
/// short; falls back to the 0.5 cutoff without a utility table.
pub fn bayes_decide(shat: f64, table: Option<&UtilityTable>) -> Sign {
    match table {
        Some(t) if t.expected_long(shat) >= t.expected_short(shat) => Sign::Long,
        Some(_) => Sign::Short,
        None => apply_cutoff(shat, 0.5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cutoffs() {
        assert_eq!(apply_cutoff(0.5, 0.5), Sign::Long);
        assert_eq!(apply_cutoff(0.49, 0.5), Sign::Short);
        assert_eq!(apply_cutoff(0.507, 0.505), Sign::Long);
    }

    #[test]
    fn grids() {
        let g1 = cv1_grid();
        assert_eq!(g1.len(), 21);
        assert_eq!(g1[0], 0.49);
        assert_eq!(g1[20], 0.51);
        assert_eq!(g1[10], 0.5);
        let g2 = cv2_grid();
        assert_eq!(g2.len(), 11);
        assert_eq!((g2[0], g2[5], g2[10]), (0.45, 0.5, 0.55));
    }

    #[test]
    fn cv_cold_start() {
        assert_eq!(cv_select_cutoff(&[], &cv2_grid()), 0.5);
    }

    #[test]
    fn cv_all_positive_history() {
        let history = [(0.47, 1u8), (0.52, 1), (0.455, 1), (0.5, 1)];
        let grid = cv2_grid();
        // exhaustive: accuracy of every grid value
        let acc: Vec<usize> = grid
            .iter()
            .map(|&c| history.iter().filter(|(p, _)| *p >= c).count())
            .collect();
        let max = *acc.iter().max().unwrap();
        assert_eq!(acc[0], max);
        assert_eq!(cv_select_cutoff(&history, &grid), 0.45);
    }

    #[test]
    fn cv_perfect_forecaster_ties_to_half() {
        let history = [(0.9, 1u8), (0.1, 0), (0.8, 1), (0.2, 0)];
        assert_eq!(cv_select_cutoff(&history, &cv1_grid()), 0.5);
        assert_eq!(cv_select_cutoff(&history, &[0.46, 0.54]), 0.46);
    }

    #[test]
    fn bayes_symmetric_reduces_to_half() {
        let t = UtilityTable::from_estimates(0.03, -0.03, 0.002, 0.001, 10.0);
        for i in 0..=100 {
            let shat = i as f64 / 100.0;
            assert_eq!(bayes_decide(shat, Some(&t)), apply_cutoff(shat, 0.5), "shat {shat}");
        }
    }

    #[test]
    fn bayes_certainty() {
        let t = UtilityTable::from_estimates(0.01, -0.2, 0.0004, 0.05, 10.0);
        assert_eq!(bayes_decide(1.0, Some(&t)), Sign::Long);
    }

    #[test]
    fn bayes_asymmetric_cutoff() {
        let t = UtilityTable::from_estimates(0.02, -0.05, 0.0004, 0.0025, 10.0);
        let c = 0.05 / (0.02 + 0.05);
        assert_relative_eq!(c, 5.0 / 7.0, epsilon = 1e-15);
        // plug back: utilities are equal at the implicit cutoff
        assert_relative_eq!(t.expected_long(c), t.expected_short(c), epsilon = 1e-15);
        assert_eq!(bayes_decide(c + 1e-9, Some(&t)), Sign::Long);
        assert_eq!(bayes_decide(c - 1e-9, Some(&t)), Sign::Short);
    }

    #[test]
    fn utility_table_history() {
        assert!(UtilityTable::from_history(&[0.01, 0.02], 10.0, SecondMoment::MeanSquare).is_none());
        let t = UtilityTable::from_history(&[0.02, -0.04, 0.04], 10.0, SecondMoment::MeanSquare).unwrap();
        let k = 10.0 / 22.0;
        assert_relative_eq!(t.long_pos, 0.03 - k * 0.001, epsilon = 1e-15);
        assert_relative_eq!(t.short_neg, 0.04 - k * 0.0016, epsilon = 1e-15);
        assert_eq!(bayes_decide(0.3, None), Sign::Short);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("fixed:0.5".parse::<CutoffPolicy>().unwrap(), CutoffPolicy::Fixed(0.5));
        assert_eq!("cv1".parse::<CutoffPolicy>().unwrap(), CutoffPolicy::cv1());
        assert_eq!("bayes".parse::<CutoffPolicy>().unwrap().to_string(), "bayes");
        assert!("fixed:1.5".parse::<CutoffPolicy>().is_err());
        assert!("median".parse::<CutoffPolicy>().is_err());
        assert_eq!(CutoffPolicy::cv2().to_string(), "cv2");
    }
}
