//! Forward noising, Gaussian reverse steps, the ancestral sampler and a
//! deterministic second-order multistep solver.

use crate::denoiser::{predict_eps_cfg, Cond, EpsModel};
use crate::error::{DroError, Result};
use crate::numerics::rng::{normal_vec, uniform};
use crate::numerics::{Seed, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// One noised point together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPair<T> {
    pub c: Cond,
    pub t: usize,
    pub x_t: Vec<T>,
    pub eps: Vec<T>,
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_diffuse<T: Scalar>(s: &NoiseSchedule<T>, x0: &[T], t: usize, eps: &[T]) -> Result<Vec<T>> {
    s.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(DroError::ShapeMismatch(format!("x0 has {} dims, eps {}", x0.len(), eps.len())));
    }
    let ab = s.alpha_bar(t);
    Ok(diffuse_with(ab, x0, eps))
}

/// Same as [`forward_diffuse`] for an arbitrary `ᾱ`.
pub fn diffuse_with<T: Scalar>(alpha_bar: T, x0: &[T], eps: &[T]) -> Vec<T> {
    let a = alpha_bar.sqrt();
    let b = (T::one() - alpha_bar).sqrt();
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

pub fn noisy_pair<T: Scalar>(s: &NoiseSchedule<T>, x0: &[T], c: Cond, t: usize, eps: Vec<T>) -> Result<NoisyPair<T>> {
    let x_t = forward_diffuse(s, x0, t, &eps)?;
    Ok(NoisyPair { c, t, x_t, eps })
}

/// Row-wise [`forward_diffuse`] with one timestep per row.
pub fn forward_diffuse_batch<T: Scalar>(
    s: &NoiseSchedule<T>,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !x0.same_shape(eps) || t.len() != x0.rows() {
        return Err(DroError::ShapeMismatch("forward_diffuse_batch inputs".into()));
    }
    let mut out = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        out.extend(forward_diffuse(s, x0.row(i), ti, eps.row(i))?);
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Coefficients `(c0, ct, var)` of `q(x_{t−1} | x_t, x_0) = N(c0·x_0 + ct·x_t, var·I)`.
pub fn posterior_coefficients<T: Scalar>(s: &NoiseSchedule<T>, t: usize) -> Result<(T, T, T)> {
    s.check_t(t)?;
    if t < 2 {
        return Err(DroError::InvalidArgument("posterior at t = 1 is the point mass at x_0".into()));
    }
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t - 1);
    let beta = s.beta(t);
    let denom = T::one() - ab;
    let c0 = ab_prev.sqrt() * beta / denom;
    let ct = s.alpha(t).sqrt() * (T::one() - ab_prev) / denom;
    let var = beta * (T::one() - ab_prev) / denom;
    Ok((c0, ct, var))
}

/// Mean and variance of `q(x_{t−1} | x_t, x_0)` for `t ≥ 2`.
pub fn posterior_params<T: Scalar>(s: &NoiseSchedule<T>, x0: &[T], x_t: &[T], t: usize) -> Result<(Vec<T>, T)> {
    let (c0, ct, var) = posterior_coefficients(s, t)?;
    if x0.len() != x_t.len() {
        return Err(DroError::ShapeMismatch("posterior_params inputs".into()));
    }
    let mean = x0.iter().zip(x_t).map(|(&a, &b)| c0 * a + ct * b).collect();
    Ok((mean, var))
}

/// `(x_t − β_t/√(1−ᾱ_t) · eps) / √α_t`.
pub fn reverse_mean_from_eps<T: Scalar>(s: &NoiseSchedule<T>, x_t: &[T], eps: &[T], t: usize) -> Vec<T> {
    let coef = s.beta(t) / (T::one() - s.alpha_bar(t)).sqrt();
    let inv = T::one() / s.alpha(t).sqrt();
    x_t.iter().zip(eps).map(|(&x, &e)| inv * (x - coef * e)).collect()
}

/// Mean and variance of the model's reverse kernel `p(x_{t−1} | x_t, c)`.
pub fn reverse_step_params<T: Scalar, M: EpsModel<T> + ?Sized>(
    s: &NoiseSchedule<T>,
    model: &M,
    x_t: &[T],
    c: Cond,
    t: usize,
) -> Result<(Vec<T>, T)> {
    s.check_t(t)?;
    let eps = model.predict_one(x_t, c, t)?;
    Ok((reverse_mean_from_eps(s, x_t, &eps, t), s.sigma2(t)))
}

fn guided_eps<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cond: &[Cond],
    t: usize,
    w: T,
) -> Result<Tensor<T>> {
    let ts = vec![t; x.rows()];
    predict_eps_cfg(model, x, cond, &ts, w)
}

fn reverse_mean_batch<T: Scalar>(s: &NoiseSchedule<T>, x: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let m = reverse_mean_from_eps(s, x.row(i), eps.row(i), t);
        out.row_mut(i).copy_from_slice(&m);
    }
    out
}

/// Ancestral chain from a given `x_T`. `noise(t)` supplies the standard
/// normal perturbation used when stepping from `t` to `t − 1` (`t ≥ 2`).
/// Returns every state, indexed by timestep: `out[t] = x_t`, `out[0] = x_0`.
pub fn ancestral_trajectory_from<T, M, F>(
    s: &NoiseSchedule<T>,
    model: &M,
    x_start: Tensor<T>,
    cond: &[Cond],
    w: T,
    mut noise: F,
) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    M: EpsModel<T> + ?Sized,
    F: FnMut(usize) -> Tensor<T>,
{
    let horizon = s.horizon();
    let mut states = vec![Tensor::zeros(&[0]); horizon + 1];
    let mut x = x_start;
    for t in (1..=horizon).rev() {
        let eps = guided_eps(model, &x, cond, t, w)?;
        let mut next = reverse_mean_batch(s, &x, &eps, t);
        if t >= 2 {
            let z = noise(t);
            let sd = s.sigma2(t).sqrt();
            for (v, &zv) in next.data_mut().iter_mut().zip(z.data()) {
                *v += sd * zv;
            }
        }
        states[t] = std::mem::replace(&mut x, next);
    }
    states[0] = x;
    Ok(states)
}

/// Ancestral trajectories for a batch, all randomness drawn from `seed`.
pub fn ancestral_trajectory<T: Scalar, M: EpsModel<T> + ?Sized>(
    s: &NoiseSchedule<T>,
    model: &M,
    cond: &[Cond],
    w: T,
    seed: impl Into<Seed>,
) -> Result<Vec<Tensor<T>>> {
    let d = model.data_dim();
    let n = cond.len();
    let mut rng = seed.into().rng();
    let x_start = Tensor::matrix(n, d, normal_vec(&mut rng, n * d))?;
    ancestral_trajectory_from(s, model, x_start, cond, w, |_| {
        Tensor::matrix(n, d, normal_vec(&mut rng, n * d)).expect("sized")
    })
}

/// Batched ancestral sampling from `x_T ~ N(0, I)` with guidance `w`.
pub fn ancestral_sample_batch<T: Scalar, M: EpsModel<T> + ?Sized>(
    s: &NoiseSchedule<T>,
    model: &M,
    cond: &[Cond],
    w: T,
    seed: impl Into<Seed>,
) -> Result<Tensor<T>> {
    let mut states = ancestral_trajectory(s, model, cond, w, seed)?;
    Ok(states.swap_remove(0))
}

pub fn ancestral_sample<T: Scalar, M: EpsModel<T> + ?Sized>(
    s: &NoiseSchedule<T>,
    model: &M,
    c: Cond,
    w: T,
    seed: impl Into<Seed>,
) -> Result<Vec<T>> {
    Ok(ancestral_sample_batch(s, model, &[c], w, seed)?.into_data())
}

/// Strictly decreasing solver knots, starting at `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepGrid {
    knots: Vec<usize>,
}

impl StepGrid {
    pub fn new(knots: Vec<usize>, horizon: usize) -> Result<Self> {
        let ok = knots.first() == Some(&horizon)
            && knots.windows(2).all(|w| w[0] > w[1])
            && knots.iter().all(|&k| (1..=horizon).contains(&k));
        if ok {
            Ok(Self { knots })
        } else {
            Err(DroError::InvalidArgument(format!("invalid step grid {knots:?} for T={horizon}")))
        }
    }

    /// Every timestep `T, T−1, …, 1`.
    pub fn dense(horizon: usize) -> Self {
        Self { knots: (1..=horizon).rev().collect() }
    }

    pub fn knots(&self) -> &[usize] {
        &self.knots
    }

    /// Knots `≥ target`, with `target` appended when it is not already one.
    pub fn through(&self, target: usize) -> Vec<usize> {
        let mut k: Vec<usize> = self.knots.iter().copied().filter(|&v| v >= target).collect();
        if k.last() != Some(&target) {
            k.push(target);
        }
        k
    }
}

/// Uniform `n_steps` grid over `[1, T]` with each interior knot jittered
/// uniformly within half the local spacing, then rounded and clamped so
/// the knots stay strictly decreasing.
pub fn perturbed_grid(horizon: usize, n_steps: usize, seed: impl Into<Seed>) -> Result<StepGrid> {
    if n_steps == 0 || n_steps > horizon {
        return Err(DroError::InvalidArgument(format!("need 1 <= n_steps <= T, got n_steps={n_steps}, T={horizon}")));
    }
    if n_steps == 1 {
        return StepGrid::new(vec![horizon], horizon);
    }
    let mut rng = seed.into().rng();
    let spacing = (horizon - 1) as f64 / (n_steps - 1) as f64;
    let mut knots = Vec::with_capacity(n_steps);
    knots.push(horizon);
    for i in 1..n_steps {
        let base = horizon as f64 - i as f64 * spacing;
        let jitter = if i + 1 < n_steps { (uniform(&mut rng) - 0.5) * spacing } else { 0.0 };
        let proposed = (base + jitter).round().max(1.0) as usize;
        let upper = knots[i - 1] - 1;
        let lower = n_steps - i;
        knots.push(proposed.clamp(lower, upper));
    }
    StepGrid::new(knots, horizon)
}

struct SolverCoefs<T> {
    alpha: T,
    sigma: T,
    lambda: T,
}

fn solver_coefs<T: Scalar>(s: &NoiseSchedule<T>, t: usize) -> SolverCoefs<T> {
    let ab = s.alpha_bar(t);
    let alpha = ab.sqrt();
    let sigma = (T::one() - ab).sqrt();
    SolverCoefs { alpha, sigma, lambda: (alpha / sigma).ln() }
}

/// Integrates the probability-flow ODE from `x_start` (the state at
/// `grid.knots()[0]`) down to `target_t` with a second-order multistep
/// update on the data prediction `x̂_0 = (x − σ ε̂)/α` (first step first
/// order). Uses the plain conditional prediction, no guidance.
pub fn solver_integrate<T: Scalar, M: EpsModel<T> + ?Sized>(
    s: &NoiseSchedule<T>,
    model: &M,
    cond: &[Cond],
    grid: &StepGrid,
    target_t: usize,
    x_start: Tensor<T>,
) -> Result<Tensor<T>> {
    s.check_t(target_t)?;
    if grid.knots()[0] != s.horizon() {
        return Err(DroError::InvalidArgument("grid must start at T".into()));
    }
    let knots = grid.through(target_t);
    let mut x = x_start;
    let mut prev: Option<(Tensor<T>, T)> = None;
    let half = T::of(0.5);
    for pair in knots.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let cs = solver_coefs(s, from);
        let ct = solver_coefs(s, to);
        let ts = vec![from; x.rows()];
        let eps = model.predict(&x, cond, &ts)?;
        let x0 = x.zip_map(&eps, |xv, ev| (xv - cs.sigma * ev) / cs.alpha)?;
        let h = ct.lambda - cs.lambda;
        let d = match &prev {
            None => x0.clone(),
            Some((x0_prev, h_prev)) => {
                let r = *h_prev / h;
                let a = T::one() + half / r;
                let b = half / r;
                x0.zip_map(x0_prev, |cur, old| a * cur - b * old)?
            }
        };
        let ratio = ct.sigma / cs.sigma;
        let k = ct.alpha * ((-h).exp() - T::one());
        x = x.zip_map(&d, |xv, dv| ratio * xv - k * dv)?;
        prev = Some((x0, h));
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` from `seed` and integrates to `target_t`.
pub fn solver_sample_to<T: Scalar, M: EpsModel<T> + ?Sized>(
    s: &NoiseSchedule<T>,
    model: &M,
    c: Cond,
    grid: &StepGrid,
    target_t: usize,
    seed: impl Into<Seed>,
) -> Result<Vec<T>> {
    let d = model.data_dim();
    let mut rng = seed.into().rng();
    let x_start = Tensor::matrix(1, d, normal_vec(&mut rng, d))?;
    Ok(solver_integrate(s, model, &[c], grid, target_t, x_start)?.into_data())
}

/// `‖mu1 − mu2‖² / (2 var)`: KL between isotropic Gaussians of equal variance.
pub fn gaussian_kl_isotropic<T: Scalar>(mu1: &[T], mu2: &[T], var: T) -> Result<T> {
    if !(var > T::zero()) {
        return Err(DroError::InvalidArgument(format!("variance {var} must be > 0")));
    }
    if mu1.len() != mu2.len() {
        return Err(DroError::ShapeMismatch("gaussian_kl_isotropic means".into()));
    }
    let sq = mu1.iter().zip(mu2).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(sq / (T::of(2.0) * var))
}

/// `KL(N(mu1, var1 I) ‖ N(mu2, var2 I))` with unequal variances.
pub fn gaussian_kl<T: Scalar>(mu1: &[T], var1: T, mu2: &[T], var2: T) -> Result<T> {
    if !(var1 > T::zero() && var2 > T::zero()) {
        return Err(DroError::InvalidArgument("variances must be > 0".into()));
    }
    let d = T::of_usize(mu1.len());
    let ratio = var1 / var2;
    let mean_term = gaussian_kl_isotropic(mu1, mu2, var2)?;
    Ok(T::of(0.5) * d * (ratio - T::one() - ratio.ln()) + mean_term)
}

/// Exact ε-predictor for data distributed as `N(mean, var · I)`:
/// `E[ε | x_t] = √(1−ᾱ)(x − √ᾱ μ) / (ᾱ var + 1 − ᾱ)`. Ignores the condition.
#[derive(Debug, Clone)]
pub struct GaussianTargetEps<T> {
    pub schedule: NoiseSchedule<T>,
    pub mean: Vec<T>,
    pub var: T,
}

impl<T: Scalar> EpsModel<T> for GaussianTargetEps<T> {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn predict(&self, x: &Tensor<T>, cond: &[Cond], t: &[usize]) -> Result<Tensor<T>> {
        if x.cols() != self.mean.len() || cond.len() != x.rows() || t.len() != x.rows() {
            return Err(DroError::ShapeMismatch("GaussianTargetEps inputs".into()));
        }
        let mut out = x.clone();
        for (i, &ti) in t.iter().enumerate() {
            self.schedule.check_t(ti)?;
            let ab = self.schedule.alpha_bar(ti);
            let scale = (T::one() - ab).sqrt() / (ab * self.var + T::one() - ab);
            let sa = ab.sqrt();
            for (o, &m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *o = scale * (*o - sa * m);
            }
        }
        Ok(out)
    }
}
