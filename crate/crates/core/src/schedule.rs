//! Linear-β noise schedule and the per-step KL weights.
//!
//! Timesteps are 1-based throughout the public API (`1..=horizon`); arrays
//! are stored 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::scalar::Scalar;

/// Reverse-step variance convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `σ_t² = β_t`.
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`, with `σ_1² = β_1`.
    Posterior,
}

/// Per-step loss weight convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    /// `λ_t = β_t² / (2 σ_t² α_t (1 − ᾱ_t))`, the exact KL-to-MSE factor.
    Analytic,
    /// `λ_t = 1`, the training convention.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    sigma2: Vec<T>,
    lam: Vec<T>,
    sigma_mode: SigmaMode,
    lambda_mode: LambdaMode,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear interpolation of β from `beta_start` to `beta_end` inclusive.
    pub fn linear(
        horizon: usize,
        beta_start: f64,
        beta_end: f64,
        sigma_mode: SigmaMode,
        lambda_mode: LambdaMode,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(DroError::InvalidArgument("schedule horizon must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DroError::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<T> = (0..horizon)
            .map(|i| {
                if horizon == 1 {
                    T::of(beta_start)
                } else {
                    let u = i as f64 / (horizon - 1) as f64;
                    T::of(beta_start + (beta_end - beta_start) * u)
                }
            })
            .collect();
        Self::from_betas(beta, sigma_mode, lambda_mode)
    }

    pub fn from_betas(beta: Vec<T>, sigma_mode: SigmaMode, lambda_mode: LambdaMode) -> Result<Self> {
        if beta.is_empty() {
            return Err(DroError::InvalidArgument("schedule horizon must be >= 1".into()));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > T::zero() && b < T::one())) {
            return Err(DroError::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<T> = beta.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = T::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma2: Vec<T> =
            match sigma_mode {
                SigmaMode::Beta => beta.clone(),
                SigmaMode::Posterior => (0..beta.len())
                    .map(|i| {
                        if i == 0 {
                            beta[0]
                        } else {
                            beta[i] * (T::one() - alpha_bar[i - 1]) / (T::one() - alpha_bar[i])
                        }
                    })
                    .collect(),
            };
        let lam = (0..beta.len())
            .map(|i| match lambda_mode {
                LambdaMode::Unit => T::one(),
                LambdaMode::Analytic => analytic_lambda(beta[i], sigma2[i], alpha[i], alpha_bar[i]),
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, sigma2, lam, sigma_mode, lambda_mode })
    }

    /// Same schedule with a different λ convention.
    pub fn with_lambda_mode(&self, mode: LambdaMode) -> Self {
        Self::from_betas(self.beta.clone(), self.sigma_mode, mode).expect("betas already validated")
    }

    /// Overrides the stored weights by a constant factor. Only the derivation
    /// oracle's negative control uses this.
    pub fn with_scaled_lambda(&self, factor: T) -> Self {
        let mut s = self.clone();
        for l in &mut s.lam {
            *l *= factor;
        }
        s
    }

    pub fn horizon(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn lambda_mode(&self) -> LambdaMode {
        self.lambda_mode
    }

    pub fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.horizon() {
            Err(DroError::TimestepOutOfRange { t, horizon: self.horizon() })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t}` extended with `ᾱ_0 = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma2(&self, t: usize) -> T {
        self.sigma2[t - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn alphas(&self) -> &[T] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    pub fn sigma2s(&self) -> &[T] {
        &self.sigma2
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lam
    }

    pub fn lambda_weight(&self, t: usize) -> Result<T> {
        let i = self.check_t(t)?;
        Ok(self.lam[i])
    }
}

/// `β² / (2 σ² α (1 − ᾱ))`.
pub fn analytic_lambda<T: Scalar>(beta: T, sigma2: T, alpha: T, alpha_bar: T) -> T {
    beta * beta / (T::of(2.0) * sigma2 * alpha * (T::one() - alpha_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn four() -> NoiseSchedule<f64> {
        NoiseSchedule::linear(4, 0.1, 0.4, SigmaMode::Beta, LambdaMode::Analytic).unwrap()
    }

    #[test]
    fn four_step_cumulative_product() {
        let s = four();
        let expected = [0.9, 0.72, 0.504, 0.3024];
        for (a, e) in s.alpha_bars().iter().zip(expected) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
        }
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert_abs_diff_eq!(*b, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::<f64>::linear(1, 0.3, 0.3, SigmaMode::Beta, LambdaMode::Unit).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(1), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn analytic_weights() {
        let s = four();
        assert_abs_diff_eq!(s.lambda_weight(1).unwrap(), 0.01 / (2.0 * 0.1 * 0.9 * 0.1), epsilon = 1e-12);
        assert_abs_diff_eq!(s.lambda_weight(1).unwrap(), 0.5556, epsilon = 1e-4);
        assert_abs_diff_eq!(s.lambda_weight(2).unwrap(), 0.04 / (2.0 * 0.2 * 0.8 * 0.28), epsilon = 1e-12);
        assert_abs_diff_eq!(s.lambda_weight(2).unwrap(), 0.4464, epsilon = 1e-4);
    }

    #[test]
    fn unit_weights() {
        let s = four().with_lambda_mode(LambdaMode::Unit);
        for t in 1..=4 {
            assert_eq!(s.lambda_weight(t).unwrap(), 1.0);
        }
    }

    #[test]
    fn posterior_variance() {
        let s = NoiseSchedule::<f64>::linear(4, 0.1, 0.4, SigmaMode::Posterior, LambdaMode::Analytic).unwrap();
        assert_eq!(s.sigma2(1), s.beta(1));
        assert_abs_diff_eq!(s.sigma2(2), 0.2 * 0.1 / 0.28, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(NoiseSchedule::<f64>::linear(0, 0.1, 0.2, SigmaMode::Beta, LambdaMode::Unit).is_err());
        assert!(NoiseSchedule::<f64>::linear(4, 0.0, 0.2, SigmaMode::Beta, LambdaMode::Unit).is_err());
        assert!(NoiseSchedule::<f64>::linear(4, 0.1, 1.0, SigmaMode::Beta, LambdaMode::Unit).is_err());
        assert!(NoiseSchedule::<f64>::linear(4, 0.3, 0.2, SigmaMode::Beta, LambdaMode::Unit).is_err());
        let s = four();
        assert!(s.lambda_weight(0).is_err());
        assert!(s.lambda_weight(5).is_err());
    }

    proptest! {
        #[test]
        fn invariants_hold(
            horizon in 1usize..200,
            start in 1e-5f64..0.2,
            span in 0.0f64..0.5,
            posterior in any::<bool>(),
        ) {
            let end = (start + span).min(0.9);
            let mode = if posterior { SigmaMode::Posterior } else { SigmaMode::Beta };
            let s = NoiseSchedule::<f64>::linear(horizon, start, end, mode, LambdaMode::Analytic).unwrap();
            let mut running = 1.0f64;
            for t in 1..=horizon {
                prop_assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                running *= 1.0 - s.beta(t);
                prop_assert!((running - s.alpha_bar(t)).abs() < 1e-12);
                prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
                if t > 1 {
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
                let l = s.lambda_weight(t).unwrap();
                prop_assert!(l.is_finite() && l > 0.0);
            }
        }
    }
}
