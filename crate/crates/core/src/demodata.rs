//! Toy conditional world, synthetic reward, candidate pools and top-K
//! expert selection.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, EpsModel};
use crate::diffusion::ancestral_sample_batch;
use crate::error::{DroError, Result};
use crate::numerics::rng::{normal, uniform, uniform_int, StreamRng};
use crate::numerics::{Seed, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Parameters of the default ring-shaped world: condition `k` places its
/// two components at `±(separation/2)·(cos kπ/C, sin kπ/C)` and prefers
/// component `k mod 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_conditions: usize,
    pub separation: f64,
    pub component_var: f64,
    pub tau: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { n_conditions: 4, separation: 4.0, component_var: 0.25, tau: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture<T> {
    pub means: Vec<Vec<T>>,
    pub weights: Vec<T>,
    pub preferred: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld<T> {
    dim: usize,
    component_var: T,
    tau: T,
    conditions: Vec<Mixture<T>>,
}

impl<T: Scalar> ToyWorld<T> {
    pub fn new(dim: usize, component_var: T, tau: T, conditions: Vec<Mixture<T>>) -> Result<Self> {
        if conditions.is_empty() {
            return Err(DroError::InvalidArgument("world needs at least one condition".into()));
        }
        if !(component_var > T::zero()) || !(tau > T::zero()) {
            return Err(DroError::InvalidArgument("component variance and tau must be > 0".into()));
        }
        let tol = T::of(1e-9);
        for (c, m) in conditions.iter().enumerate() {
            if m.means.is_empty() || m.means.len() != m.weights.len() {
                return Err(DroError::InvalidArgument(format!("condition {c}: means/weights mismatch")));
            }
            if m.means.iter().any(|mu| mu.len() != dim) {
                return Err(DroError::InvalidArgument(format!("condition {c}: wrong mean dimension")));
            }
            let total = m.weights.iter().fold(T::zero(), |a, &w| a + w);
            if m.weights.iter().any(|&w| w < T::zero()) || (total - T::one()).abs() > tol {
                return Err(DroError::InvalidArgument(format!("condition {c}: weights must sum to 1")));
            }
            if m.preferred >= m.means.len() {
                return Err(DroError::InvalidArgument(format!("condition {c}: preferred index out of range")));
            }
        }
        Ok(Self { dim, component_var, tau, conditions })
    }

    pub fn from_config(cfg: &WorldConfig) -> Result<Self> {
        if cfg.n_conditions == 0 {
            return Err(DroError::InvalidArgument("n_conditions must be >= 1".into()));
        }
        let half = cfg.separation / 2.0;
        let conditions = (0..cfg.n_conditions)
            .map(|k| {
                let angle = std::f64::consts::PI * k as f64 / cfg.n_conditions as f64;
                let (sn, cs) = angle.sin_cos();
                Mixture {
                    means: vec![vec![T::of(half * cs), T::of(half * sn)], vec![T::of(-half * cs), T::of(-half * sn)]],
                    weights: vec![T::of(0.5), T::of(0.5)],
                    preferred: k % 2,
                }
            })
            .collect();
        Self::new(2, T::of(cfg.component_var), T::of(cfg.tau), conditions)
    }

    /// One condition whose data is `N(mean, var · I)`.
    pub fn single_gaussian(mean: Vec<T>, var: T, tau: T) -> Result<Self> {
        let dim = mean.len();
        Self::new(dim, var, tau, vec![Mixture { means: vec![mean], weights: vec![T::one()], preferred: 0 }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn component_var(&self) -> T {
        self.component_var
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn mixture(&self, c: usize) -> Result<&Mixture<T>> {
        self.conditions.get(c).ok_or(DroError::UnknownCondition(c))
    }

    pub fn preferred_mean(&self, c: usize) -> Result<&[T]> {
        let m = self.mixture(c)?;
        Ok(&m.means[m.preferred])
    }

    /// Index of the component mean nearest to `x`.
    pub fn nearest_component(&self, x: &[T], c: usize) -> Result<usize> {
        let m = self.mixture(c)?;
        let mut best = (0, T::infinity());
        for (i, mu) in m.means.iter().enumerate() {
            let d = sq_dist(x, mu);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    /// One draw from condition `c`'s mixture; `c` must be valid.
    pub fn sample_one(&self, c: usize, rng: &mut StreamRng) -> Vec<T> {
        let m = &self.conditions[c];
        let u = T::of(uniform(rng));
        let mut acc = T::zero();
        let mut k = m.weights.len() - 1;
        for (i, &w) in m.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.component_var.sqrt();
        m.means[k].iter().map(|&mu| mu + sd * normal::<T>(rng)).collect()
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// `r*(x, c) = −‖x − μ_pref(c)‖² / τ`.
pub fn synth_reward<T: Scalar>(world: &ToyWorld<T>, x: &[T], c: usize) -> Result<T> {
    let mu = world.preferred_mean(c)?;
    if x.len() != mu.len() {
        return Err(DroError::ShapeMismatch("reward input dimension".into()));
    }
    Ok(-sq_dist(x, mu) / world.tau)
}

/// `n` i.i.d. draws from condition `c`'s mixture, as an `[n, dim]` matrix.
pub fn sample_ground_truth<T: Scalar>(
    world: &ToyWorld<T>,
    c: usize,
    n: usize,
    seed: impl Into<Seed>,
) -> Result<Tensor<T>> {
    world.mixture(c)?;
    let mut rng = seed.into().rng();
    let mut data = Vec::with_capacity(n * world.dim);
    for _ in 0..n {
        data.extend(world.sample_one(c, &mut rng));
    }
    Tensor::matrix(n, world.dim, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolItem<T> {
    pub x: Vec<T>,
    pub c: usize,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo<T> {
    pub x: Vec<T>,
    pub score: T,
}

/// Expert demonstrations per condition, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet<T> {
    per_condition: Vec<Vec<Demo<T>>>,
}

impl<T: Scalar> DemoSet<T> {
    pub fn new(per_condition: Vec<Vec<Demo<T>>>) -> Result<Self> {
        for (c, demos) in per_condition.iter().enumerate() {
            if demos.iter().any(|d| !d.score.is_finite()) {
                return Err(DroError::InvalidArgument(format!("condition {c}: non-finite score")));
            }
            if demos.windows(2).any(|w| w[0].score < w[1].score) {
                return Err(DroError::InvalidArgument(format!("condition {c}: scores not sorted")));
            }
        }
        Ok(Self { per_condition })
    }

    pub fn n_conditions(&self) -> usize {
        self.per_condition.len()
    }

    pub fn demos(&self, c: usize) -> &[Demo<T>] {
        self.per_condition.get(c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.per_condition.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Conditions that have at least one demonstration.
    pub fn populated(&self) -> Vec<usize> {
        (0..self.per_condition.len()).filter(|&c| !self.per_condition[c].is_empty()).collect()
    }

    pub fn mean_score(&self) -> T {
        let n = self.len();
        if n == 0 {
            return T::nan();
        }
        let total = self.per_condition.iter().flatten().fold(T::zero(), |a, d| a + d.score);
        total / T::of_usize(n)
    }

    /// Uniform draw from condition `c`'s demonstrations.
    pub fn draw(&self, c: usize, rng: &mut StreamRng) -> Result<&Demo<T>> {
        let demos = self.demos(c);
        if demos.is_empty() {
            return Err(DroError::InvalidArgument(format!("no demonstrations for condition {c}")));
        }
        Ok(&demos[uniform_int(rng, 0, demos.len() - 1)])
    }

    /// Keeps the best `k` per condition.
    pub fn truncated(&self, k: usize) -> Self {
        Self { per_condition: self.per_condition.iter().map(|d| d.iter().take(k).cloned().collect()).collect() }
    }

    /// CSV with columns `condition, x0, …, x{d-1}, score`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.per_condition.iter().flatten().map(|d| d.x.len()).next().unwrap_or(0);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["condition".to_string()];
        header.extend((0..dim).map(|j| format!("x{j}")));
        header.push("score".into());
        w.write_record(&header).map_err(csv_err)?;
        for (c, demos) in self.per_condition.iter().enumerate() {
            for d in demos {
                let mut rec = vec![c.to_string()];
                rec.extend(d.x.iter().map(|v| format!("{:e}", v.f64())));
                rec.push(format!("{:e}", d.score.f64()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut per_condition: Vec<Vec<Demo<T>>> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() < 3 {
                return Err(DroError::Format("demo row needs condition, coordinates and score".into()));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| DroError::Format(format!("bad number {s:?}: {e}")))
            };
            let c: usize =
                rec[0].trim().parse().map_err(|e| DroError::Format(format!("bad condition {:?}: {e}", &rec[0])))?;
            let x = (1..rec.len() - 1).map(|j| parse(&rec[j]).map(T::of)).collect::<Result<Vec<_>>>()?;
            let score = T::of(parse(&rec[rec.len() - 1])?);
            if per_condition.len() <= c {
                per_condition.resize_with(c + 1, Vec::new);
            }
            per_condition[c].push(Demo { x, score });
        }
        Self::new(per_condition)
    }
}

fn csv_err(e: csv::Error) -> DroError {
    DroError::Format(e.to_string())
}

/// Per condition, stable descending sort by score and keep the top `k`.
pub fn select_experts<T: Scalar>(pool: &[PoolItem<T>], k: usize, n_conditions: usize) -> Result<DemoSet<T>> {
    let mut per_condition: Vec<Vec<Demo<T>>> = vec![Vec::new(); n_conditions];
    for item in pool {
        if item.c >= n_conditions {
            return Err(DroError::UnknownCondition(item.c));
        }
        if !item.score.is_finite() {
            return Err(DroError::InvalidArgument("pool score is not finite".into()));
        }
        per_condition[item.c].push(Demo { x: item.x.clone(), score: item.score });
    }
    for (c, demos) in per_condition.iter_mut().enumerate() {
        if demos.len() < k {
            return Err(DroError::InsufficientPool { condition: c, have: demos.len(), need: k });
        }
        demos.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        demos.truncate(k);
    }
    DemoSet::new(per_condition)
}

/// Samples `per_condition` points per condition from `model` with
/// guidance `w` and scores each with [`synth_reward`].
pub fn build_pool<T: Scalar, M: EpsModel<T> + ?Sized>(
    world: &ToyWorld<T>,
    schedule: &NoiseSchedule<T>,
    model: &M,
    per_condition: usize,
    w: T,
    seed: impl Into<Seed>,
) -> Result<Vec<PoolItem<T>>> {
    let seed = seed.into();
    let mut pool = Vec::with_capacity(per_condition * world.n_conditions());
    if per_condition == 0 {
        return Ok(pool);
    }
    for c in 0..world.n_conditions() {
        let cond = vec![Cond::Label(c); per_condition];
        let xs = ancestral_sample_batch(schedule, model, &cond, w, seed.child(c as u64))?;
        for i in 0..per_condition {
            let x = xs.row(i).to_vec();
            let score = synth_reward(world, &x, c)?;
            pool.push(PoolItem { x, c, score });
        }
    }
    Ok(pool)
}
