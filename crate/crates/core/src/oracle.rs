//! Numerical check that the trajectory KL objective and the λ-weighted
//! noise-regression objective are the same quantity.
//!
//! Expert side, per draw `(x̄_0, t, ε̄)` with `x̄_t` the forward-noised point:
//!
//! ```text
//! kl  = β T [ −KL(q(x̄_{t−1}|x̄_t, x̄_0) ‖ p_φ) + KL(q ‖ p_ref) ]
//! eps = β T λ_t [ ‖ε̄ − ε_ref(x̄_t)‖² − ‖ε̄ − ε_φ(x̄_t)‖² ]
//! ```
//!
//! Policy side, per draw `(x_t, t)` with `x_t` from the policy's ancestral
//! chain, the same with `q` replaced by `p_θ(x_{t−1}|x_t)` and `ε̄` by
//! `ε_θ(x_t)`. The `T` factor turns the uniform draw of `t` into the sum
//! over timesteps. Every reverse kernel has variance `σ_t²`, so the KLs
//! reduce to their mean terms; at `t = 1` the target mean is `x̄_0`. Both
//! forms are evaluated on the same draws, which makes their agreement an
//! exact per-draw identity rather than a statistical one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, EpsModel};
use crate::diffusion::{
    ancestral_trajectory, forward_diffuse, gaussian_kl, gaussian_kl_isotropic, posterior_params, reverse_mean_from_eps,
};
use crate::error::{DroError, Result};
use crate::numerics::rng::{normal_vec, uniform_int};
use crate::numerics::{Seed, Tensor};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, SigmaMode};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n < 2 {
            return Err(DroError::InvalidArgument("an estimate needs at least two draws".into()));
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_error = (var / n as f64).sqrt();
        if !mean.is_finite() || !std_error.is_finite() {
            return Err(DroError::numeric("McEstimate", format!("non-finite estimate from {n} draws")));
        }
        Ok(Self { value: mean, std_error, n })
    }
}

/// Both forms of one draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawPair {
    pub t: usize,
    pub kl: f64,
    pub eps: f64,
    /// `|kl_φ term| + |kl_ref term|`, the size the deviation is judged against.
    pub scale: f64,
    /// Change of the full-variance KL difference relative to the mean-only
    /// one. Independent of every network by construction.
    pub dropped_constant: f64,
}

impl DrawPair {
    pub fn relative_deviation(&self) -> f64 {
        let d = (self.kl - self.eps).abs();
        if self.scale > 0.0 {
            d / self.scale
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideResult {
    pub kl: McEstimate,
    pub eps: McEstimate,
    pub draws: Vec<DrawPair>,
}

fn side_result(draws: Vec<DrawPair>) -> Result<SideResult> {
    let kl: Vec<f64> = draws.iter().map(|d| d.kl).collect();
    let eps: Vec<f64> = draws.iter().map(|d| d.eps).collect();
    Ok(SideResult { kl: McEstimate::from_samples(&kl)?, eps: McEstimate::from_samples(&eps)?, draws })
}

fn sq_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Variance of `q(x_{t−1} | x_t, x_0)`, with `t = 1` given `σ_1²`.
fn target_variance<T: Scalar>(s: &NoiseSchedule<T>, t: usize) -> T {
    if t == 1 {
        s.sigma2(1)
    } else {
        let ab_prev = s.alpha_bar(t - 1);
        s.beta(t) * (T::one() - ab_prev) / (T::one() - s.alpha_bar(t))
    }
}

/// Per-draw pairs for the expert side. `x0_source` rows are drawn uniformly.
#[allow(clippy::too_many_arguments)]
pub fn expert_side_draws<T, P, R>(
    phi: &P,
    reference: &R,
    s: &NoiseSchedule<T>,
    x0_source: &Tensor<T>,
    c: Cond,
    n: usize,
    beta_kl: f64,
    seed: impl Into<Seed>,
) -> Result<Vec<DrawPair>>
where
    T: Scalar,
    P: EpsModel<T> + ?Sized,
    R: EpsModel<T> + ?Sized,
{
    if x0_source.rows() == 0 {
        return Err(DroError::InvalidArgument("empty x0 source".into()));
    }
    let seed = seed.into();
    let horizon = s.horizon();
    let weight = T::of(beta_kl) * T::of_usize(horizon);
    (0..n)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed.child(j as u64).rng();
            let x0 = x0_source.row(uniform_int(&mut rng, 0, x0_source.rows() - 1));
            let t = uniform_int(&mut rng, 1, horizon);
            let eb: Vec<T> = normal_vec(&mut rng, x0.len());
            let xt = forward_diffuse(s, x0, t, &eb)?;
            let (target, q_var) =
                if t == 1 { (x0.to_vec(), target_variance(s, 1)) } else { posterior_params(s, x0, &xt, t)? };
            let sigma2 = s.sigma2(t);
            let e_phi = phi.predict_one(&xt, c, t)?;
            let e_ref = reference.predict_one(&xt, c, t)?;
            let mu_phi = reverse_mean_from_eps(s, &xt, &e_phi, t);
            let mu_ref = reverse_mean_from_eps(s, &xt, &e_ref, t);
            let kl_phi = gaussian_kl_isotropic(&target, &mu_phi, sigma2)?;
            let kl_ref = gaussian_kl_isotropic(&target, &mu_ref, sigma2)?;
            let full_phi = gaussian_kl(&target, q_var, &mu_phi, sigma2)?;
            let full_ref = gaussian_kl(&target, q_var, &mu_ref, sigma2)?;
            let lam = s.lambda_weight(t)?;
            let eps_form = weight * lam * (sq_diff(&eb, &e_ref) - sq_diff(&eb, &e_phi));
            Ok(DrawPair {
                t,
                kl: (weight * (kl_ref - kl_phi)).f64(),
                eps: eps_form.f64(),
                scale: (weight * (kl_phi.abs() + kl_ref.abs())).f64(),
                dropped_constant: ((full_ref - full_phi) - (kl_ref - kl_phi)).f64(),
            })
        })
        .collect()
}

/// Monte Carlo estimate of the expert-side KL form.
#[allow(clippy::too_many_arguments)]
pub fn expert_side_kl<T: Scalar, P: EpsModel<T> + ?Sized, R: EpsModel<T> + ?Sized>(
    phi: &P,
    reference: &R,
    s: &NoiseSchedule<T>,
    x0_source: &Tensor<T>,
    c: Cond,
    n: usize,
    beta_kl: f64,
    seed: impl Into<Seed>,
) -> Result<McEstimate> {
    let d = expert_side_draws(phi, reference, s, x0_source, c, n, beta_kl, seed)?;
    Ok(side_result(d)?.kl)
}

/// Monte Carlo estimate of the expert-side λ-weighted noise form.
#[allow(clippy::too_many_arguments)]
pub fn expert_side_eps<T: Scalar, P: EpsModel<T> + ?Sized, R: EpsModel<T> + ?Sized>(
    phi: &P,
    reference: &R,
    s: &NoiseSchedule<T>,
    x0_source: &Tensor<T>,
    c: Cond,
    n: usize,
    beta_kl: f64,
    seed: impl Into<Seed>,
) -> Result<McEstimate> {
    let d = expert_side_draws(phi, reference, s, x0_source, c, n, beta_kl, seed)?;
    Ok(side_result(d)?.eps)
}

/// Per-draw pairs for the policy side; `x_t` comes from `n` ancestral
/// chains of the policy (no guidance), one random timestep per chain.
#[allow(clippy::too_many_arguments)]
pub fn policy_side_draws<T, P, R, Q>(
    phi: &P,
    reference: &R,
    policy: &Q,
    s: &NoiseSchedule<T>,
    c: Cond,
    n: usize,
    beta_kl: f64,
    seed: impl Into<Seed>,
) -> Result<Vec<DrawPair>>
where
    T: Scalar,
    P: EpsModel<T> + ?Sized,
    R: EpsModel<T> + ?Sized,
    Q: EpsModel<T> + ?Sized,
{
    let seed = seed.into();
    let horizon = s.horizon();
    let chains = ancestral_trajectory(s, policy, &vec![c; n], T::one(), seed.child(0))?;
    let mut rng = seed.child(1).rng();
    let ts: Vec<usize> = (0..n).map(|_| uniform_int(&mut rng, 1, horizon)).collect();
    let weight = T::of(beta_kl) * T::of_usize(horizon);
    (0..n)
        .into_par_iter()
        .map(|j| {
            let t = ts[j];
            let xt = chains[t].row(j);
            let sigma2 = s.sigma2(t);
            let e_pol = policy.predict_one(xt, c, t)?;
            let e_phi = phi.predict_one(xt, c, t)?;
            let e_ref = reference.predict_one(xt, c, t)?;
            let mu_pol = reverse_mean_from_eps(s, xt, &e_pol, t);
            let mu_phi = reverse_mean_from_eps(s, xt, &e_phi, t);
            let mu_ref = reverse_mean_from_eps(s, xt, &e_ref, t);
            let kl_phi = gaussian_kl_isotropic(&mu_pol, &mu_phi, sigma2)?;
            let kl_ref = gaussian_kl_isotropic(&mu_pol, &mu_ref, sigma2)?;
            let full_phi = gaussian_kl(&mu_pol, sigma2, &mu_phi, sigma2)?;
            let full_ref = gaussian_kl(&mu_pol, sigma2, &mu_ref, sigma2)?;
            let lam = s.lambda_weight(t)?;
            let eps_form = weight * lam * (sq_diff(&e_pol, &e_ref) - sq_diff(&e_pol, &e_phi));
            Ok(DrawPair {
                t,
                kl: (weight * (kl_ref - kl_phi)).f64(),
                eps: eps_form.f64(),
                scale: (weight * (kl_phi.abs() + kl_ref.abs())).f64(),
                dropped_constant: ((full_ref - full_phi) - (kl_ref - kl_phi)).f64(),
            })
        })
        .collect()
}

/// Both policy-side estimates over shared draws.
#[allow(clippy::too_many_arguments)]
pub fn policy_side_pair<T, P, R, Q>(
    phi: &P,
    reference: &R,
    policy: &Q,
    s: &NoiseSchedule<T>,
    c: Cond,
    n: usize,
    beta_kl: f64,
    seed: impl Into<Seed>,
) -> Result<(McEstimate, McEstimate)>
where
    T: Scalar,
    P: EpsModel<T> + ?Sized,
    R: EpsModel<T> + ?Sized,
    Q: EpsModel<T> + ?Sized,
{
    let r = side_result(policy_side_draws(phi, reference, policy, s, c, n, beta_kl, seed)?)?;
    Ok((r.kl, r.eps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub side: String,
    pub draw: usize,
    pub t: usize,
    pub c: Cond,
    pub relative_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationReport {
    pub passed: bool,
    pub sigma_mode: SigmaMode,
    pub condition: Cond,
    pub tolerance: f64,
    pub expert_kl: McEstimate,
    pub expert_eps: McEstimate,
    pub policy_kl: McEstimate,
    pub policy_eps: McEstimate,
    /// Expert side minus policy side, in each form.
    pub objective_kl: f64,
    pub objective_eps: f64,
    pub objective_deviation: f64,
    pub max_draw_deviation: f64,
    /// Largest spread of the discarded variance terms across draws of one
    /// timestep; zero means they do not depend on the networks.
    pub dropped_constant_spread: f64,
    pub first_violation: Option<Violation>,
}

impl DerivationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DroError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DroError::Format(e.to_string()))
    }
}

fn constant_spread(draws: &[DrawPair], horizon: usize) -> f64 {
    let mut lo = vec![f64::INFINITY; horizon + 1];
    let mut hi = vec![f64::NEG_INFINITY; horizon + 1];
    for d in draws {
        lo[d.t] = lo[d.t].min(d.dropped_constant);
        hi[d.t] = hi[d.t].max(d.dropped_constant);
    }
    (1..=horizon).filter(|&t| lo[t].is_finite()).map(|t| hi[t] - lo[t]).fold(0.0, f64::max)
}

/// Runs both sides in both forms on shared draws and checks the identity
/// per draw and for the full objective.
#[allow(clippy::too_many_arguments)]
pub fn verify_derivation<T, P, R, Q>(
    phi: &P,
    reference: &R,
    policy: &Q,
    s: &NoiseSchedule<T>,
    x0_source: &Tensor<T>,
    c: Cond,
    n: usize,
    beta_kl: f64,
    tolerance: f64,
    seed: impl Into<Seed>,
) -> Result<DerivationReport>
where
    T: Scalar,
    P: EpsModel<T> + ?Sized,
    R: EpsModel<T> + ?Sized,
    Q: EpsModel<T> + ?Sized,
{
    let seed = seed.into();
    let expert = side_result(expert_side_draws(phi, reference, s, x0_source, c, n, beta_kl, seed.child(0))?)?;
    let pol = side_result(policy_side_draws(phi, reference, policy, s, c, n, beta_kl, seed.child(1))?)?;

    let mut max_dev: f64 = 0.0;
    let mut first = None;
    for (side, draws) in [("expert", &expert.draws), ("policy", &pol.draws)] {
        for (j, d) in draws.iter().enumerate() {
            let dev = d.relative_deviation();
            max_dev = max_dev.max(if dev.is_nan() { f64::INFINITY } else { dev });
            if first.is_none() && !(dev <= tolerance) {
                first = Some(Violation { side: side.into(), draw: j, t: d.t, c, relative_deviation: dev });
            }
        }
    }
    let objective_kl = expert.kl.value - pol.kl.value;
    let objective_eps = expert.eps.value - pol.eps.value;
    let scale = expert.draws.iter().chain(&pol.draws).map(|d| d.scale).sum::<f64>() / n as f64;
    let objective_deviation = (objective_kl - objective_eps).abs();
    let objective_ok = objective_deviation <= tolerance * scale.max(f64::MIN_POSITIVE);
    let spread = constant_spread(&expert.draws, s.horizon()).max(constant_spread(&pol.draws, s.horizon()));
    Ok(DerivationReport {
        passed: first.is_none() && (objective_ok || objective_deviation == 0.0),
        sigma_mode: s.sigma_mode(),
        condition: c,
        tolerance,
        expert_kl: expert.kl,
        expert_eps: expert.eps,
        policy_kl: pol.kl,
        policy_eps: pol.eps,
        objective_kl,
        objective_eps,
        objective_deviation,
        max_draw_deviation: max_dev,
        dropped_constant_spread: spread,
        first_violation: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Architecture, DenoiserParams};
    use crate::schedule::LambdaMode;

    fn arch() -> Architecture {
        Architecture { data_dim: 2, hidden: vec![16, 16], n_conditions: 2, cond_dim: 4, time_freqs: 3, horizon: 10 }
    }

    fn sched(mode: SigmaMode) -> NoiseSchedule<f64> {
        NoiseSchedule::linear(10, 1e-2, 0.3, mode, LambdaMode::Analytic).unwrap()
    }

    fn source() -> Tensor<f64> {
        Tensor::from_rows(&[[1.0, 0.5], [-1.0, 2.0], [0.0, -1.5]]).unwrap()
    }

    fn nets(seed: u64) -> Vec<DenoiserParams<f64>> {
        (0..3).map(|i| DenoiserParams::init(&arch(), Seed(seed).child(i)).unwrap()).collect()
    }

    #[test]
    fn estimate_statistics() {
        let e = McEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.value, 2.5);
        assert!((e.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(McEstimate::from_samples(&[1.0]).is_err());
        assert!(McEstimate::from_samples(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn identical_models_give_zero() {
        let m = &nets(1)[0];
        let s = sched(SigmaMode::Beta);
        let d = expert_side_draws(m, m, &s, &source(), Cond::Label(0), 200, 1.0, 3).unwrap();
        assert!(d.iter().all(|p| p.kl == 0.0 && p.eps == 0.0));
        let r = verify_derivation(m, m, m, &s, &source(), Cond::Label(1), 200, 1.0, DEFAULT_TOLERANCE, 4).unwrap();
        assert!(r.passed);
        assert_eq!(r.objective_kl, 0.0);
    }

    #[test]
    fn distinct_models_pass_in_both_modes() {
        let n = nets(2);
        for mode in [SigmaMode::Beta, SigmaMode::Posterior] {
            let s = sched(mode);
            let r =
                verify_derivation(&n[0], &n[1], &n[2], &s, &source(), Cond::Label(1), 300, 0.7, DEFAULT_TOLERANCE, 5)
                    .unwrap();
            assert!(r.passed, "{mode:?}: {:?}", r.first_violation);
            assert!(r.max_draw_deviation < 1e-10);
            assert!(r.objective_kl != 0.0);
            assert!(r.dropped_constant_spread < 1e-12, "{}", r.dropped_constant_spread);
            let back = DerivationReport::from_json(&r.to_json().unwrap()).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn policy_equal_to_phi_zeroes_the_push_norm() {
        let n = nets(3);
        let s = sched(SigmaMode::Beta);
        let d = policy_side_draws(&n[0], &n[1], &n[0], &s, Cond::Null, 100, 1.0, 6).unwrap();
        // with φ = θ the KL to φ vanishes, leaving only the reference term
        for p in &d {
            assert!(p.kl >= 0.0);
            assert!((p.kl - p.eps).abs() <= 1e-10 * p.scale.max(1e-300));
        }
    }

    #[test]
    fn doubled_lambda_fails() {
        let n = nets(4);
        let s = sched(SigmaMode::Posterior).with_scaled_lambda(2.0);
        let r = verify_derivation(&n[0], &n[1], &n[2], &s, &source(), Cond::Label(0), 100, 1.0, DEFAULT_TOLERANCE, 7)
            .unwrap();
        assert!(!r.passed);
        let v = r.first_violation.unwrap();
        assert_eq!(v.side, "expert");
        assert!(v.relative_deviation > 1e-3);
    }

    #[test]
    fn unit_lambda_differs_from_analytic() {
        let n = nets(5);
        let s = sched(SigmaMode::Beta).with_lambda_mode(LambdaMode::Unit);
        let r = verify_derivation(&n[0], &n[1], &n[2], &s, &source(), Cond::Label(0), 100, 1.0, DEFAULT_TOLERANCE, 8)
            .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn estimates_agree_across_seeds() {
        let n = nets(6);
        let s = sched(SigmaMode::Beta);
        let a = expert_side_kl(&n[0], &n[1], &s, &source(), Cond::Label(0), 2000, 1.0, 10).unwrap();
        let b = expert_side_kl(&n[0], &n[1], &s, &source(), Cond::Label(0), 2000, 1.0, 11).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * se, "{a:?} {b:?}");
        let e = expert_side_eps(&n[0], &n[1], &s, &source(), Cond::Label(0), 2000, 1.0, 10).unwrap();
        assert!((e.value - a.value).abs() <= 1e-10 * a.value.abs().max(1.0));
    }
}
