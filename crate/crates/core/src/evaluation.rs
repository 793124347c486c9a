//! Win-rate protocol with median-of-n representatives, and the gap between
//! expert and policy rewards.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demodata::{synth_reward, DemoSet, ToyWorld};
use crate::denoiser::{Cond, EpsModel};
use crate::diffusion::ancestral_sample_batch;
use crate::error::{DroError, Result};
use crate::numerics::{Seed, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Index of the median score among an odd number of scores. Equal scores
/// keep their input order.
pub fn median_index<T: Scalar>(scores: &[T]) -> Result<usize> {
    if scores.len() % 2 == 0 {
        return Err(DroError::InvalidArgument(format!("median of n needs odd n, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DroError::InvalidArgument("median of n: non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    Ok(order[scores.len() / 2])
}

/// The row of `samples` whose score is the median of `scores`.
pub fn median_of_n<T: Scalar>(samples: &Tensor<T>, scores: &[T]) -> Result<Vec<T>> {
    if samples.rows() != scores.len() {
        return Err(DroError::ShapeMismatch("one score per sample".into()));
    }
    Ok(samples.row(median_index(scores)?).to_vec())
}

/// Median-of-n representative score of every prompt. Prompt `i` uses
/// condition `conditions[i % len]` and noise seed `seed.child(i)`, so two
/// models scored with the same seed see the same initial noise.
#[allow(clippy::too_many_arguments)]
pub fn prompt_scores<T: Scalar, M: EpsModel<T> + ?Sized>(
    world: &ToyWorld<T>,
    s: &NoiseSchedule<T>,
    model: &M,
    conditions: &[usize],
    n_prompts: usize,
    n_per_prompt: usize,
    w: T,
    seed: impl Into<Seed>,
) -> Result<Vec<T>> {
    if conditions.is_empty() {
        return Err(DroError::InvalidArgument("no evaluation conditions".into()));
    }
    if n_per_prompt % 2 == 0 {
        return Err(DroError::InvalidArgument(format!("n_per_prompt must be odd, got {n_per_prompt}")));
    }
    let seed = seed.into();
    (0..n_prompts)
        .into_par_iter()
        .map(|i| {
            let c = conditions[i % conditions.len()];
            let cond = vec![Cond::Label(c); n_per_prompt];
            let xs = ancestral_sample_batch(s, model, &cond, w, seed.child(i as u64))?;
            let scores = (0..n_per_prompt).map(|j| synth_reward(world, xs.row(j), c)).collect::<Result<Vec<_>>>()?;
            Ok(scores[median_index(&scores)?])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt: usize,
    pub condition: usize,
    pub score_a: f64,
    pub score_b: f64,
    /// 1 for a win of `a`, 0.5 for a tie, 0 for a loss.
    pub outcome: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub win_rate: f64,
    /// Win rate per condition index; `None` for conditions without prompts.
    pub per_condition: Vec<Option<f64>>,
    pub mean_reward_a: f64,
    pub mean_reward_b: f64,
    pub n_prompts: usize,
    pub n_per_prompt: usize,
    pub guidance: f64,
    /// Where the matching reward-margin trajectory was written, if any.
    #[serde(default)]
    pub reward_margin_history: Option<String>,
    pub prompts: Vec<PromptOutcome>,
}

impl EvalReport {
    /// Compares per-prompt representative scores of two models.
    pub fn from_scores<T: Scalar>(
        a: &[T],
        b: &[T],
        conditions: &[usize],
        n_conditions: usize,
        n_per_prompt: usize,
        guidance: f64,
    ) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() || conditions.is_empty() {
            return Err(DroError::InvalidArgument("win rate needs equal, nonempty score lists".into()));
        }
        let prompts: Vec<PromptOutcome> = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(i, (&sa, &sb))| PromptOutcome {
                prompt: i,
                condition: conditions[i % conditions.len()],
                score_a: sa.f64(),
                score_b: sb.f64(),
                outcome: if sa > sb {
                    1.0
                } else if sa == sb {
                    0.5
                } else {
                    0.0
                },
            })
            .collect();
        let n = prompts.len() as f64;
        let mut sums = vec![(0.0, 0usize); n_conditions];
        for p in &prompts {
            let slot = sums.get_mut(p.condition).ok_or(DroError::UnknownCondition(p.condition))?;
            slot.0 += p.outcome;
            slot.1 += 1;
        }
        Ok(Self {
            win_rate: prompts.iter().map(|p| p.outcome).sum::<f64>() / n,
            per_condition: sums.iter().map(|&(s, k)| (k > 0).then(|| s / k as f64)).collect(),
            mean_reward_a: prompts.iter().map(|p| p.score_a).sum::<f64>() / n,
            mean_reward_b: prompts.iter().map(|p| p.score_b).sum::<f64>() / n,
            n_prompts: prompts.len(),
            n_per_prompt,
            guidance,
            reward_margin_history: None,
            prompts,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DroError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DroError::Format(e.to_string()))
    }

    /// One row per prompt.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.prompts {
            w.serialize(p).map_err(|e| DroError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Win rate of `model_a` over `model_b`; both are sampled with the same
/// per-prompt seeds.
#[allow(clippy::too_many_arguments)]
pub fn win_rate<T: Scalar, A: EpsModel<T> + ?Sized, B: EpsModel<T> + ?Sized>(
    world: &ToyWorld<T>,
    s: &NoiseSchedule<T>,
    model_a: &A,
    model_b: &B,
    conditions: &[usize],
    n_prompts: usize,
    n_per_prompt: usize,
    w: T,
    seed: impl Into<Seed>,
) -> Result<EvalReport> {
    let seed = seed.into();
    let a = prompt_scores(world, s, model_a, conditions, n_prompts, n_per_prompt, w, seed)?;
    let b = prompt_scores(world, s, model_b, conditions, n_prompts, n_per_prompt, w, seed)?;
    EvalReport::from_scores(&a, &b, conditions, world.n_conditions(), n_per_prompt, w.f64())
}

/// Mean reward of `n` policy samples, conditions cycling over `conditions`.
pub fn mean_policy_reward<T: Scalar, M: EpsModel<T> + ?Sized>(
    world: &ToyWorld<T>,
    s: &NoiseSchedule<T>,
    policy: &M,
    conditions: &[usize],
    n: usize,
    w: T,
    seed: impl Into<Seed>,
) -> Result<T> {
    if n == 0 || conditions.is_empty() {
        return Err(DroError::InvalidArgument("need n >= 1 samples and a condition".into()));
    }
    let labels: Vec<usize> = (0..n).map(|i| conditions[i % conditions.len()]).collect();
    let cond: Vec<Cond> = labels.iter().map(|&c| Cond::Label(c)).collect();
    let xs = ancestral_sample_batch(s, policy, &cond, w, seed)?;
    let mut total = T::zero();
    for (i, &c) in labels.iter().enumerate() {
        total += synth_reward(world, xs.row(i), c)?;
    }
    Ok(total / T::of_usize(n))
}

/// Mean expert reward minus mean policy reward. Policy samples cycle over
/// the conditions that have demonstrations.
pub fn reward_margin<T: Scalar, M: EpsModel<T> + ?Sized>(
    world: &ToyWorld<T>,
    s: &NoiseSchedule<T>,
    demos: &DemoSet<T>,
    policy: &M,
    n: usize,
    w: T,
    seed: impl Into<Seed>,
) -> Result<T> {
    let conditions = demos.populated();
    if conditions.is_empty() {
        return Err(DroError::InvalidArgument("reward margin needs demonstrations".into()));
    }
    let policy_mean = mean_policy_reward(world, s, policy, &conditions, n, w, seed)?;
    Ok(demos.mean_score() - policy_mean)
}
