//! Dynamic logistic regression in state-space form.
//!
//! Coefficients follow a random walk whose innovation is induced by a
//! discount factor `lambda`: the predicted covariance is `C / lambda`. The
//! posterior after observing a binary outcome is approximated by a Gaussian
//! centred on a single Newton step from the predicted mean, and the one-step
//! predictive likelihood by a Laplace approximation.
//!
//! The Hessian of the log posterior is `-(R^-1 + w x x')` with
//! `w = p (1 - p)`, a rank-one update of the prior precision. Its inverse,
//! log-determinant and the Newton step therefore reduce to scalar
//! Sherman-Morrison expressions in `q = x' R x`, so a step is `O(d^2)` and
//! never forms an explicit inverse.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logits beyond this magnitude are clamped so probabilities stay in (0, 1).
const MAX_LOGIT: f64 = 35.0;
const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPrior {
    /// Prior variance of every coefficient; the prior mean is zero.
    pub c0_scale: f64,
}

impl Default for FilterPrior {
    fn default() -> Self {
        Self { c0_scale: 100.0 }
    }
}

impl FilterPrior {
    pub fn new(c0_scale: f64) -> Result<Self> {
        if !(c0_scale > 0.0 && c0_scale.is_finite()) {
            return Err(Error::config(format!("prior variance {c0_scale} must be positive")));
        }
        Ok(Self { c0_scale })
    }

    pub fn initial_state(&self, dim: usize) -> FilterState {
        FilterState {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * self.c0_scale,
            last_lambda: 1.0,
        }
    }
}

/// Gaussian posterior of the coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub last_lambda: f64,
}

impl FilterState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::config(format!(
                "covariance is {}x{}, expected {d}x{d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(cov);
        if cov.clone().cholesky().is_none() {
            return Err(Error::numeric("covariance is not positive definite"));
        }
        Ok(Self {
            mean,
            cov,
            last_lambda: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Candidate discount factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("lambda grid is empty"));
        }
        if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::config(format!("lambda {v} not in (0, 1]")));
        }
        Ok(Self(values))
    }

    /// Constant parameters: no discounting.
    pub fn constant() -> Self {
        Self(vec![1.0])
    }

    /// Time-varying parameters.
    pub fn time_varying() -> Self {
        Self(vec![0.98, 0.99, 1.0])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Where the Laplace approximation of the predictive likelihood is centred.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaplaceMode {
    /// At the updated (one Newton step) posterior mean.
    #[default]
    UpdatedMean,
    /// At the predicted mean.
    PriorMean,
}

pub fn logistic(z: f64) -> f64 {
    let z = z.clamp(-MAX_LOGIT, MAX_LOGIT);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log p(s | logit z)` for a Bernoulli outcome, evaluated stably.
pub fn log_bernoulli(s: u8, z: f64) -> f64 {
    // log sigmoid(y) = -softplus(-y)
    let y = if s == 1 { z } else { -z };
    let softplus = |v: f64| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() };
    -softplus(-y)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn check_dims(a: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
    if a.len() != x.len() {
        return Err(Error::config(format!(
            "regressor length {} does not match state dimension {}",
            x.len(),
            a.len()
        )));
    }
    Ok(())
}

/// Predicted state mean and covariance under discount `lambda`.
pub fn predict_state(state: &FilterState, lambda: f64) -> (DVector<f64>, DMatrix<f64>) {
    (state.mean.clone(), &state.cov / lambda)
}

/// Forecast probability of a non-negative return.
pub fn predict_prob(a: &DVector<f64>, x: &DVector<f64>) -> f64 {
    logistic(x.dot(a))
}

/// Posterior and predictive likelihood for one candidate discount factor.
#[derive(Debug, Clone)]
pub struct Branch {
    pub state: FilterState,
    /// Log of the Laplace predictive likelihood of the observed outcome.
    pub log_lik: f64,
}

/// Newton-step posterior and Laplace predictive likelihood given the
/// predicted moments `(a, r)`.
pub fn posterior(
    a: &DVector<f64>,
    r: &DMatrix<f64>,
    x: &DVector<f64>,
    s: u8,
    mode: LaplaceMode,
) -> Result<Branch> {
    check_dims(a, x)?;
    if s > 1 {
        return Err(Error::config(format!("label {s} is not binary")));
    }
    let rx = r * x;
    let q = x.dot(&rx);
    let z_a = x.dot(a);
    let p_a = logistic(z_a);
    let w_a = p_a * (1.0 - p_a);
    // Newton step: m = a + (R^-1 + w x x')^-1 x (s - p)
    let k = (f64::from(s) - p_a) / (1.0 + w_a * q);
    let mean = a + &rx * k;

    // covariance re-evaluated at the new mean
    let z_m = x.dot(&mean);
    let p_m = logistic(z_m);
    let w_m = p_m * (1.0 - p_m);
    let shrink = w_m / (1.0 + w_m * q);
    let mut cov = symmetrize(r - (&rx * rx.transpose()) * shrink);
    if cov.clone().cholesky().is_none() {
        cov += DMatrix::identity(cov.nrows(), cov.ncols()) * JITTER;
        if cov.clone().cholesky().is_none() {
            return Err(Error::numeric("posterior covariance lost positive definiteness"));
        }
    }

    let log_lik = match mode {
        LaplaceMode::UpdatedMean => {
            log_bernoulli(s, z_m) - 0.5 * (w_m * q).ln_1p() - 0.5 * k * k * q
        }
        LaplaceMode::PriorMean => log_bernoulli(s, z_a) - 0.5 * (w_a * q).ln_1p(),
    };
    if !log_lik.is_finite() {
        return Err(Error::numeric("non-finite predictive likelihood"));
    }
    Ok(Branch {
        state: FilterState {
            mean,
            cov,
            last_lambda: 1.0,
        },
        log_lik,
    })
}

/// One filter update with a fixed discount factor.
pub fn update(state: &FilterState, x: &DVector<f64>, s: u8, lambda: f64) -> Result<FilterState> {
    let (a, r) = predict_state(state, lambda);
    let mut next = posterior(&a, &r, x, s, LaplaceMode::UpdatedMean)?.state;
    next.last_lambda = lambda;
    Ok(next)
}

/// Log of the Laplace-approximated predictive likelihood of `s`.
pub fn laplace_predictive(
    a: &DVector<f64>,
    r: &DMatrix<f64>,
    x: &DVector<f64>,
    s: u8,
) -> Result<f64> {
    Ok(posterior(a, r, x, s, LaplaceMode::UpdatedMean)?.log_lik)
}

#[derive(Debug, Clone)]
pub struct LambdaStep {
    pub state: FilterState,
    pub lambda: f64,
    /// Log predictive likelihood per grid value, in grid order.
    pub log_liks: Vec<f64>,
}

impl LambdaStep {
    /// Log predictive likelihood of the adopted branch.
    pub fn log_lik(&self) -> f64 {
        self.log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs every discount factor from the same incoming state and keeps the
/// branch with the highest predictive likelihood; ties go to the larger
/// discount factor.
pub fn step_with_lambda_selection(
    state: &FilterState,
    x: &DVector<f64>,
    s: u8,
    grid: &LambdaGrid,
    mode: LaplaceMode,
) -> Result<LambdaStep> {
    let mut best: Option<(Branch, f64)> = None;
    let mut log_liks = Vec::with_capacity(grid.values().len());
    for &lambda in grid.values() {
        let (a, r) = predict_state(state, lambda);
        let branch = posterior(&a, &r, x, s, mode)?;
        log_liks.push(branch.log_lik);
        let better = match &best {
            None => true,
            Some((b, l)) => {
                branch.log_lik > b.log_lik || (branch.log_lik == b.log_lik && lambda > *l)
            }
        };
        if better {
            best = Some((branch, lambda));
        }
    }
    let (branch, lambda) = best.expect("grid is non-empty");
    let mut state = branch.state;
    state.last_lambda = lambda;
    Ok(LambdaStep {
        state,
        lambda,
        log_liks,
    })
}

/// A single dynamic logistic regression carried through time.
#[derive(Debug, Clone)]
pub struct DynamicLogit {
    pub state: FilterState,
    pub grid: LambdaGrid,
    pub mode: LaplaceMode,
}

impl DynamicLogit {
    pub fn new(dim: usize, prior: &FilterPrior, grid: LambdaGrid, mode: LaplaceMode) -> Self {
        Self {
            state: prior.initial_state(dim),
            grid,
            mode,
        }
    }

    pub fn forecast(&self, x: &DVector<f64>) -> f64 {
        predict_prob(&self.state.mean, x)
    }

    pub fn observe(&mut self, x: &DVector<f64>, s: u8) -> Result<LambdaStep> {
        let step = step_with_lambda_selection(&self.state, x, s, &self.grid, self.mode)?;
        self.state = step.state.clone();
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    /// Dense route: explicit Hessian inversion and determinant.
    fn dense_posterior(a: &DVector<f64>, r: &DMatrix<f64>, x: &DVector<f64>, s: u8) -> (DVector<f64>, DMatrix<f64>, f64) {
        let d = a.len();
        let rinv = r.clone().try_inverse().unwrap();
        let p = 1.0 / (1.0 + (-x.dot(a)).exp());
        let grad = x * (f64::from(s) - p);
        let hess = -(x * x.transpose()) * (p * (1.0 - p)) - &rinv;
        let m = a - hess.clone().try_inverse().unwrap() * grad;
        let pm = 1.0 / (1.0 + (-x.dot(&m)).exp());
        let hess_m = -(x * x.transpose()) * (pm * (1.0 - pm)) - &rinv;
        let c = -hess_m.clone().try_inverse().unwrap();
        let lik_s = if s == 1 { pm } else { 1.0 - pm };
        let diff = &m - a;
        let quad = diff.dot(&(&rinv * &diff));
        let normal = (-0.5 * quad).exp()
            / ((2.0 * std::f64::consts::PI).powi(d as i32) * r.determinant()).sqrt();
        let lik = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0) * c.determinant().sqrt() * lik_s * normal;
        (m, c, lik)
    }

    #[test]
    fn predict_state_discounts() {
        let st = FilterState::new(v(&[0.3, -0.2]), DMatrix::identity(2, 2)).unwrap();
        let (a, r) = predict_state(&st, 1.0);
        assert_eq!(a, st.mean);
        assert_eq!(r, DMatrix::identity(2, 2));
        let (_, r) = predict_state(&st, 0.98);
        assert_relative_eq!(r[(0, 0)], 1.0 / 0.98, epsilon = 1e-15);
        assert_relative_eq!(r[(0, 0)], 1.0204081632653061, epsilon = 1e-15);
        let inflation = &r - &st.cov;
        assert!(inflation.symmetric_eigenvalues().iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn logistic_values() {
        assert_eq!(predict_prob(&v(&[0.0]), &v(&[1.0])), 0.5);
        assert_relative_eq!(predict_prob(&v(&[3f64.ln()]), &v(&[1.0])), 0.75, epsilon = 1e-15);
        assert_eq!(predict_prob(&v(&[0.2, -0.1]), &v(&[1.0, 2.0])), 0.5);
        let hi = logistic(1e6);
        let lo = logistic(-1e6);
        assert!(hi < 1.0 && lo > 0.0);
    }

    #[test]
    fn log_bernoulli_is_stable() {
        assert_relative_eq!(log_bernoulli(1, 0.0), 0.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(log_bernoulli(0, 800.0), -800.0, epsilon = 1e-12);
        assert!(log_bernoulli(1, 800.0) <= 0.0);
    }

    #[test]
    fn unit_update_hand_value() {
        // m = 0 - (-(0.25 + 1))^-1 * 0.5 = 0.4
        let st = FilterState::new(v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        let next = update(&st, &v(&[1.0]), 1, 1.0).unwrap();
        assert_relative_eq!(next.mean[0], 0.4, epsilon = 1e-15);
        let p = logistic(0.4);
        assert_relative_eq!(next.cov[(0, 0)], 1.0 / (1.0 + p * (1.0 - p)), epsilon = 1e-15);
    }

    #[test]
    fn unit_update_is_a_newton_step_toward_the_optimum() {
        // l(theta) = log sigmoid(theta) - theta^2/2; its maximizer lies past
        // the single Newton step from 0 in the same direction.
        let mut lo = 0.0;
        let mut hi = 2.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let grad = 1.0 - logistic(mid) - mid;
            if grad > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let st = FilterState::new(v(&[0.0]), DMatrix::identity(1, 1)).unwrap();
        let m = update(&st, &v(&[1.0]), 1, 1.0).unwrap().mean[0];
        assert!(m > 0.0 && (m - lo).abs() < 0.01, "step {m} optimum {lo}");
    }

    #[test]
    fn tight_prior_keeps_mean() {
        let st = FilterState::new(v(&[0.3, 0.1]), DMatrix::identity(2, 2) * 1e-12).unwrap();
        let next = update(&st, &v(&[1.0, 0.5]), 0, 1.0).unwrap();
        assert_relative_eq!(next.mean[0], 0.3, epsilon = 1e-10);
        assert_relative_eq!(next.mean[1], 0.1, epsilon = 1e-10);
    }

    #[test]
    fn matches_dense_route() {
        let a = v(&[0.2, -0.5, 0.1]);
        let r = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let x = v(&[1.0, 0.7, -1.3]);
        for s in [0, 1] {
            let b = posterior(&a, &r, &x, s, LaplaceMode::UpdatedMean).unwrap();
            let (m, c, lik) = dense_posterior(&a, &r, &x, s);
            for i in 0..3 {
                assert_relative_eq!(b.state.mean[i], m[i], epsilon = 1e-12);
                for j in 0..3 {
                    assert_relative_eq!(b.state.cov[(i, j)], c[(i, j)], epsilon = 1e-12);
                }
            }
            assert_relative_eq!(b.log_lik, lik.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_regressor_gives_half() {
        let a = v(&[0.0, 0.0]);
        let r = DMatrix::identity(2, 2);
        let lp = laplace_predictive(&a, &r, &v(&[0.0, 0.0]), 1).unwrap();
        assert_relative_eq!(lp.exp(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn mean_moves_with_gradient_sign() {
        let st = FilterState::new(v(&[0.1, 0.4]), DMatrix::identity(2, 2)).unwrap();
        let x = v(&[1.0, -0.8]);
        let z0 = x.dot(&st.mean);
        let up = update(&st, &x, 1, 0.99).unwrap();
        assert!(x.dot(&up.mean) > z0);
        let down = update(&st, &x, 0, 0.99).unwrap();
        assert!(x.dot(&down.mean) < z0);
    }

    #[test]
    fn singleton_grid_equals_plain_update() {
        let st = FilterPrior::default().initial_state(2);
        let x = v(&[1.0, 0.05]);
        let step = step_with_lambda_selection(&st, &x, 1, &LambdaGrid::constant(), LaplaceMode::UpdatedMean).unwrap();
        let plain = update(&st, &x, 1, 1.0).unwrap();
        assert_eq!(step.state, plain);
        assert_eq!(step.lambda, 1.0);
    }

    #[test]
    fn lambda_ties_prefer_largest() {
        // zero regressor: every branch has identical likelihood
        let st = FilterPrior::default().initial_state(1);
        let step = step_with_lambda_selection(&st, &v(&[0.0]), 1, &LambdaGrid::time_varying(), LaplaceMode::UpdatedMean).unwrap();
        assert_eq!(step.lambda, 1.0);
    }

    #[test]
    fn grid_validation() {
        assert!(LambdaGrid::new(vec![]).is_err());
        assert!(LambdaGrid::new(vec![0.0]).is_err());
        assert!(LambdaGrid::new(vec![1.01]).is_err());
        assert!(FilterPrior::new(0.0).is_err());
        assert!(posterior(&v(&[0.0]), &DMatrix::identity(1, 1), &v(&[1.0, 2.0]), 1, LaplaceMode::UpdatedMean).is_err());
    }

    #[test]
    fn prior_mean_mode() {
        let a = v(&[0.0]);
        let r = DMatrix::identity(1, 1);
        let b = posterior(&a, &r, &v(&[1.0]), 1, LaplaceMode::PriorMean).unwrap();
        assert_relative_eq!(b.log_lik, 0.5f64.ln() - 0.5 * 1.25f64.ln(), epsilon = 1e-15);
    }
}
