//! Reference pretraining, the ranking fine-tuning loop and its optimizer.
//!
//! All randomness of training step `i`, item `n` comes from
//! `seed.derive([tag, i, n])`, so a run can be stopped after any step and
//! resumed from its [`TrainState`] with identical results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demodata::{DemoSet, ToyWorld};
use crate::denoiser::{Architecture, Cond, DenoiserParams, EmaState};
use crate::diffusion::{perturbed_grid, solver_sample_to};
use crate::error::{DroError, Result};
use crate::evaluation::reward_margin;
use crate::losses::{evaluate, Objective, RankingBatch};
use crate::numerics::rng::{normal_vec, uniform, uniform_int};
use crate::numerics::{Gradient, ParamSet, Seed, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

const TAG_PRETRAIN: u64 = 0x5052_4554;
const TAG_TRAIN: u64 = 0x5452_4149;
const TAG_MARGIN: u64 = 0x4d41_5247;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Trl,
    MaxMargin,
    CrossEntropy,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Update steps `N`.
    pub n_steps: usize,
    /// Batch size `B`.
    pub batch: usize,
    /// Policy sync interval `M`.
    pub sync_every: usize,
    /// Clip floor `m` of the thresholded loss.
    pub clip_m: f64,
    pub loss: LossKind,
    /// Sigmoid scale of the cross-entropy loss.
    pub beta_w: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_drop: f64,
    pub ema_decay: f64,
    /// Knots of the perturbed solver grid used for policy rollouts.
    pub solver_steps: usize,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// KL weight of the regularized objective. Only scales the oracle's
    /// estimates; the training loss is invariant to it.
    pub beta_kl: f64,
    /// Record the reward margin every this many steps (0: first and last only).
    pub margin_every: usize,
    pub margin_samples: usize,
    pub margin_guidance: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_steps: 1500,
            batch: 64,
            sync_every: 1,
            clip_m: -0.001,
            loss: LossKind::Trl,
            beta_w: 1.0,
            lr: 3e-3,
            weight_decay: 0.0,
            p_drop: 0.2,
            ema_decay: 0.99,
            solver_steps: 10,
            seed: 0,
            beta_kl: 1.0,
            margin_every: 250,
            margin_samples: 512,
            margin_guidance: 2.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DroError::Config(m));
        if self.batch == 0 || self.sync_every == 0 || self.solver_steps == 0 {
            return bad("batch, sync_every and solver_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} outside [0, 1]", self.p_drop));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0".into());
        }
        if !self.clip_m.is_finite() && self.clip_m != f64::NEG_INFINITY {
            return bad("clip_m must be finite or -inf".into());
        }
        if self.loss == LossKind::CrossEntropy && !(self.beta_w > 0.0) {
            return bad("beta_w must be > 0".into());
        }
        if !(self.beta_kl > 0.0) {
            return bad("beta_kl must be > 0".into());
        }
        if self.margin_samples == 0 {
            return bad("margin_samples must be >= 1".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossKind::Trl => Objective::Trl { m: self.clip_m },
            LossKind::MaxMargin => Objective::MaxMargin,
            LossKind::CrossEntropy => Objective::CrossEntropy { beta_w: self.beta_w },
            LossKind::Sft => Objective::Sft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Condition dropout so the null embedding learns the marginal.
    pub p_drop: f64,
    pub ema_decay: f64,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 256, lr: 2e-3, weight_decay: 0.0, p_drop: 0.1, ema_decay: 0.995, seed: 0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(DroError::Config("pretrain batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(DroError::Config("pretrain p_drop in [0, 1] and ema_decay in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(DroError::Config("pretrain lr must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `p ← p − lr·m̂/(√v̂ + 1e−8) − lr·wd·p`, with bias-corrected moments.
pub fn optimizer_step<T: Scalar, P: ParamSet<T>>(
    state: &mut OptimizerState<T>,
    params: &mut P,
    grads: &Gradient<T>,
    lr: T,
    wd: T,
) -> Result<()> {
    if !grads.congruent(params) || state.m.len() != grads.tensors.len() {
        return Err(DroError::ShapeMismatch("gradient does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(DroError::numeric("optimizer_step", "non-finite gradient"));
    }
    let (b1, b2, eps) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2), T::of(ADAM_EPS));
    state.step += 1;
    let k = state.step as i32;
    let c1 = T::one() - b1.powi(k);
    let c2 = T::one() - b2.powi(k);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (T::one() - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (T::one() - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *pj = *pj - lr * mh / (vh.sqrt() + eps) - lr * wd * *pj;
        }
    }
    Ok(())
}

/// Null with probability `p_drop`, otherwise `c`.
pub fn drop_condition(c: Cond, p_drop: f64, seed: impl Into<Seed>) -> Result<Cond> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(DroError::InvalidArgument(format!("p_drop {p_drop} outside [0, 1]")));
    }
    let u = uniform(&mut seed.into().rng());
    Ok(if u < p_drop { Cond::Null } else { c })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    /// EMA weights, the model used downstream.
    pub ema: DenoiserParams<T>,
    pub raw: DenoiserParams<T>,
    pub history: Vec<PretrainRow>,
}

/// Fits a fresh denoiser to ground-truth draws of `world` with the plain
/// denoising loss.
pub fn pretrain_reference<T: Scalar>(
    world: &ToyWorld<T>,
    s: &NoiseSchedule<T>,
    arch: &Architecture,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    if arch.data_dim != world.dim() || arch.n_conditions != world.n_conditions() || arch.horizon != s.horizon() {
        return Err(DroError::Config("architecture must match the world's dimension, conditions and horizon".into()));
    }
    let seed = Seed(cfg.seed).child(TAG_PRETRAIN);
    let mut params = DenoiserParams::init(arch, seed.child(0))?;
    let mut ema = EmaState::new(&params, T::of(cfg.ema_decay))?;
    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::with_capacity(cfg.steps);
    let d = world.dim();
    let horizon = s.horizon();
    for step in 0..cfg.steps {
        let mut rng = seed.derive(&[1, step as u64]).rng();
        let mut x0 = Vec::with_capacity(cfg.batch * d);
        let mut cond = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let c = uniform_int(&mut rng, 0, world.n_conditions() - 1);
            x0.extend(world.sample_one(c, &mut rng));
            ts.push(uniform_int(&mut rng, 1, horizon));
            cond.push(if uniform(&mut rng) < cfg.p_drop { Cond::Null } else { Cond::Label(c) });
        }
        let x0 = Tensor::matrix(cfg.batch, d, x0)?;
        let eps = Tensor::matrix(cfg.batch, d, normal_vec(&mut rng, cfg.batch * d))?;
        let expert_x = crate::diffusion::forward_diffuse_batch(s, &x0, &ts, &eps)?;
        let batch = RankingBatch {
            expert_ref: Tensor::zeros(eps.shape()),
            cond,
            t: ts,
            expert_x,
            expert_eps: eps,
            policy: None,
        };
        let (loss, g, _) = evaluate(&params, &batch, Objective::Sft)
            .map_err(|e| DroError::numeric("pretrain", format!("step {step}: {e}")))?;
        optimizer_step(&mut opt, &mut params, &g, T::of(cfg.lr), T::of(cfg.weight_decay))
            .map_err(|e| DroError::numeric("pretrain", format!("step {step}: {e}")))?;
        ema.update(&params)?;
        history.push(PretrainRow { step: step + 1, loss: loss.f64() });
    }
    Ok(PretrainOutcome { ema: ema.shadow, raw: params, history })
}

/// One line of the fine-tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Empty on the step-0 row, which only carries the initial reward margin.
    pub loss: Option<f64>,
    pub mean_margin: Option<f64>,
    pub clip_fraction: Option<f64>,
    /// Mean expert reward minus mean reward of the EMA model; recorded
    /// only on some steps.
    pub reward_margin: Option<f64>,
}

/// Everything that evolves during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub phi: DenoiserParams<T>,
    pub policy: DenoiserParams<T>,
    pub ema: EmaState<T>,
    pub opt: OptimizerState<T>,
    /// Completed update steps.
    pub step: usize,
    pub history: Vec<HistoryRow>,
}

impl<T: Scalar> TrainState<T> {
    /// `θ ← θ_ref`, `φ ← θ_ref`.
    pub fn new(reference: &DenoiserParams<T>, cfg: &TrainerConfig) -> Result<Self> {
        Ok(Self {
            phi: reference.clone(),
            policy: reference.clone(),
            ema: EmaState::new(reference, T::of(cfg.ema_decay))?,
            opt: OptimizerState::new(reference),
            step: 0,
            history: Vec::new(),
        })
    }
}

/// Read-only inputs of a fine-tuning run.
pub struct TrainContext<'a, T> {
    pub reference: &'a DenoiserParams<T>,
    pub demos: &'a DemoSet<T>,
    pub world: &'a ToyWorld<T>,
    pub schedule: &'a NoiseSchedule<T>,
    pub cfg: &'a TrainerConfig,
}

struct ItemDraw<T> {
    cond: Cond,
    t: usize,
    x0: Vec<T>,
    eps: Vec<T>,
    x_t: Option<Vec<T>>,
}

/// The batch of step `step`: experts noised to random `t`, and, unless the
/// objective is plain regression, policy points `x_t` from the solver.
pub fn assemble_batch<T: Scalar>(
    ctx: &TrainContext<'_, T>,
    policy: &DenoiserParams<T>,
    step: usize,
) -> Result<RankingBatch<T>> {
    let cfg = ctx.cfg;
    let s = ctx.schedule;
    let conditions = ctx.demos.populated();
    if conditions.is_empty() {
        return Err(DroError::InvalidArgument("no expert demonstrations".into()));
    }
    let with_policy = cfg.loss != LossKind::Sft;
    let horizon = s.horizon();
    let knots = cfg.solver_steps.min(horizon);
    let d = ctx.world.dim();
    let base = Seed(cfg.seed).derive(&[TAG_TRAIN, step as u64]);
    let items: Vec<ItemDraw<T>> = (0..cfg.batch)
        .into_par_iter()
        .map(|n| {
            let item = base.child(n as u64);
            let mut rng = item.rng();
            let t = uniform_int(&mut rng, 1, horizon);
            let c = conditions[uniform_int(&mut rng, 0, conditions.len() - 1)];
            let x0 = ctx.demos.draw(c, &mut rng)?.x.clone();
            let eps = normal_vec(&mut rng, d);
            let cond = drop_condition(Cond::Label(c), cfg.p_drop, item.child(1))?;
            let x_t = if with_policy {
                let grid = perturbed_grid(horizon, knots, item.child(2))?;
                Some(solver_sample_to(s, policy, cond, &grid, t, item.child(3))?)
            } else {
                None
            };
            Ok(ItemDraw { cond, t, x0, eps, x_t })
        })
        .collect::<Result<_>>()?;
    let b = items.len();
    let x0 = Tensor::matrix(b, d, items.iter().flat_map(|i| i.x0.iter().copied()).collect())?;
    let eps = Tensor::matrix(b, d, items.iter().flat_map(|i| i.eps.iter().copied()).collect())?;
    let cond = items.iter().map(|i| i.cond).collect();
    let ts = items.iter().map(|i| i.t).collect();
    let policy_side = if with_policy {
        let xt = items.iter().flat_map(|i| i.x_t.as_ref().expect("drawn above").iter().copied()).collect();
        Some((policy, Tensor::matrix(b, d, xt)?))
    } else {
        None
    };
    RankingBatch::build(s, ctx.reference, &x0, eps, cond, ts, policy_side)
}

fn margin_now<T: Scalar>(ctx: &TrainContext<'_, T>, model: &DenoiserParams<T>, step: usize) -> Result<f64> {
    let seed = Seed(ctx.cfg.seed).derive(&[TAG_MARGIN, step as u64]);
    let m = reward_margin(
        ctx.world,
        ctx.schedule,
        ctx.demos,
        model,
        ctx.cfg.margin_samples,
        T::of(ctx.cfg.margin_guidance),
        seed,
    )?;
    Ok(m.f64())
}

/// Runs one update step on `state` and returns its log line.
pub fn train_step<T: Scalar>(ctx: &TrainContext<'_, T>, state: &mut TrainState<T>) -> Result<HistoryRow> {
    let cfg = ctx.cfg;
    let step = state.step;
    let batch = assemble_batch(ctx, &state.policy, step)?;
    let (loss, g, items) = evaluate(&state.phi, &batch, cfg.objective())
        .map_err(|e| DroError::numeric("dro_train", format!("step {}: {e}", step + 1)))?;
    optimizer_step(&mut state.opt, &mut state.phi, &g, T::of(cfg.lr), T::of(cfg.weight_decay))
        .map_err(|e| DroError::numeric("dro_train", format!("step {}: {e}", step + 1)))?;
    state.ema.update(&state.phi)?;
    state.step += 1;
    if state.step % cfg.sync_every == 0 {
        state.policy = state.phi.clone();
    }
    let n = items.len() as f64;
    let m = T::of(cfg.clip_m);
    let record_margin = state.step == cfg.n_steps || (cfg.margin_every > 0 && state.step % cfg.margin_every == 0);
    let row = HistoryRow {
        step: state.step,
        loss: Some(loss.f64()),
        mean_margin: Some(items.iter().map(|i| i.margin.f64()).sum::<f64>() / n),
        clip_fraction: Some(items.iter().filter(|i| i.margin <= m).count() as f64 / n),
        reward_margin: if record_margin { Some(margin_now(ctx, &state.ema.shadow, state.step)?) } else { None },
    };
    state.history.push(row.clone());
    Ok(row)
}

/// Advances `state` until `until` steps are complete.
pub fn train_until<T: Scalar>(ctx: &TrainContext<'_, T>, state: &mut TrainState<T>, until: usize) -> Result<()> {
    ctx.cfg.validate()?;
    if state.step == 0 && state.history.is_empty() {
        state.history.push(HistoryRow {
            step: 0,
            loss: None,
            mean_margin: None,
            clip_fraction: None,
            reward_margin: Some(margin_now(ctx, &state.ema.shadow, 0)?),
        });
    }
    while state.step < until {
        train_step(ctx, state)?;
    }
    Ok(())
}

/// Full fine-tuning run from the reference model.
pub fn dro_train<T: Scalar>(ctx: &TrainContext<'_, T>) -> Result<TrainState<T>> {
    ctx.cfg.validate()?;
    if ctx.demos.is_empty() {
        return Err(DroError::InvalidArgument("no expert demonstrations".into()));
    }
    let mut state = TrainState::new(ctx.reference, ctx.cfg)?;
    train_until(ctx, &mut state, ctx.cfg.n_steps)?;
    Ok(state)
}

/// Writes the fine-tuning log as CSV.
pub fn write_history<W: std::io::Write>(rows: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| DroError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demodata::WorldConfig;
    use crate::schedule::{LambdaMode, SigmaMode};

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![1.0f64, -2.0])];
        let mut st = OptimizerState::new(&p);
        let g = Gradient::zeros_like(&p);
        optimizer_step(&mut st, &mut p, &g, 0.1, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        optimizer_step(&mut st, &mut p, &g, 0.1, 0.5).unwrap();
        for (&a, &b) in p[0].data().iter().zip(&[1.0, -2.0]) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = vec![Tensor::vector(vec![0.0f64, 0.0, 0.0])];
        let mut st = OptimizerState::new(&p);
        let g = Gradient { tensors: vec![Tensor::vector(vec![0.5, -3.0, 1e-9])] };
        optimizer_step(&mut st, &mut p, &g, 0.01, 0.0).unwrap();
        // m̂ = g, v̂ = g², so the step is −lr·g/(|g| + 1e−8)
        for (&pj, &gj) in p[0].data().iter().zip(g.tensors[0].data()) {
            let expect = -0.01 * gj / (gj.abs() + 1e-8);
            assert!((pj - expect).abs() < 1e-15, "{pj} vs {expect}");
        }
        assert!(st.v[0].data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn optimizer_rejects_bad_gradients() {
        let mut p = vec![Tensor::vector(vec![0.0f64])];
        let mut st = OptimizerState::new(&p);
        let g = Gradient { tensors: vec![Tensor::vector(vec![f64::NAN])] };
        assert!(matches!(optimizer_step(&mut st, &mut p, &g, 0.1, 0.0), Err(DroError::Numeric { .. })));
        let g = Gradient { tensors: vec![Tensor::vector(vec![1.0, 2.0])] };
        assert!(optimizer_step(&mut st, &mut p, &g, 0.1, 0.0).is_err());
    }

    #[test]
    fn dropout_extremes_and_rate() {
        for i in 0..100 {
            assert_eq!(drop_condition(Cond::Label(2), 0.0, i).unwrap(), Cond::Label(2));
            assert_eq!(drop_condition(Cond::Label(2), 1.0, i).unwrap(), Cond::Null);
        }
        let n = 10_000;
        let nulls =
            (0..n).filter(|&i| drop_condition(Cond::Label(0), 0.2, Seed(5).child(i)).unwrap() == Cond::Null).count();
        let rate = nulls as f64 / n as f64;
        assert!((rate - 0.2).abs() < 0.02, "{rate}");
        assert!(drop_condition(Cond::Label(0), 1.5, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainerConfig::default();
        c.validate().unwrap();
        c.sync_every = 0;
        assert!(matches!(c.validate(), Err(DroError::Config(_))));
        let c = TrainerConfig { p_drop: 1.2, ..Default::default() };
        assert!(c.validate().is_err());
    }

    fn tiny() -> (ToyWorld<f64>, NoiseSchedule<f64>, Architecture) {
        let world = ToyWorld::from_config(&WorldConfig::default()).unwrap();
        let s = NoiseSchedule::linear(10, 1e-2, 0.5, SigmaMode::Beta, LambdaMode::Unit).unwrap();
        let arch =
            Architecture { data_dim: 2, hidden: vec![16], n_conditions: 4, cond_dim: 4, time_freqs: 2, horizon: 10 };
        (world, s, arch)
    }

    #[test]
    fn pretraining_is_seeded_and_zero_steps_is_init() {
        let (world, s, arch) = tiny();
        let cfg = PretrainConfig { steps: 0, ..Default::default() };
        let out = pretrain_reference(&world, &s, &arch, &cfg).unwrap();
        let init = DenoiserParams::init(&arch, Seed(0).child(TAG_PRETRAIN).child(0)).unwrap();
        assert_eq!(out.ema, init);
        let cfg = PretrainConfig { steps: 5, batch: 16, ..Default::default() };
        let a = pretrain_reference(&world, &s, &arch, &cfg).unwrap();
        let b = pretrain_reference(&world, &s, &arch, &cfg).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.history, b.history);
        assert_ne!(a.raw, init);
    }
}
