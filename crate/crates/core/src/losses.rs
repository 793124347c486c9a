//! Training objectives built from the per-item ranking terms.
//!
//! For one item with expert noise `ε̄` at the noised expert point `x̄_t` and
//! policy prediction `ε = ε_θ(x_t)` at a policy point `x_t`:
//!
//! ```text
//! l_left  = ‖ε̄ − ε_ref(x̄_t)‖² − ‖ε̄ − ε_φ(x̄_t)‖²
//! l_right = ‖ε  − ε_ref(x_t)‖² − ‖ε  − ε_φ(x_t)‖²
//! margin  = l_right − l_left
//! ```
//!
//! Only `ε_φ` carries gradient; reference and policy predictions enter as
//! constants. Batches aggregate by the mean.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, DenoiserParams, EpsModel};
use crate::diffusion::{forward_diffuse, forward_diffuse_batch};
use crate::error::{DroError, Result};
use crate::numerics::{Gradient, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

fn sq_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn row_sq_diffs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    (0..a.rows()).map(|i| sq_diff(a.row(i), b.row(i))).collect()
}

/// Per-item terms of one ranking batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_left: T,
    pub l_right: T,
    /// `l_right − l_left`.
    pub margin: T,
    /// `margin ≤ m` for the threshold the breakdown was made with.
    pub clipped: bool,
    pub t: usize,
    pub c: Cond,
    /// `‖ε̄ − ε_φ(x̄_t)‖²`
    pub sft: T,
    /// `‖ε − ε_φ(x_t)‖²`, zero without a policy side.
    pub push: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Assembles the item from its four squared norms.
    pub fn from_norms(ref_left: T, sft: T, ref_right: T, push: T, m: T, t: usize, c: Cond) -> Self {
        let l_left = ref_left - sft;
        let l_right = ref_right - push;
        let margin = l_right - l_left;
        Self { l_left, l_right, margin, clipped: margin <= m, t, c, sft, push }
    }

    pub fn is_finite(&self) -> bool {
        self.l_left.is_finite() && self.l_right.is_finite() && self.sft.is_finite() && self.push.is_finite()
    }
}

fn noised<T: Scalar>(s: &NoiseSchedule<T>, x0: &[T], t: usize, eps: &[T]) -> Result<Tensor<T>> {
    let x = forward_diffuse(s, x0, t, eps)?;
    Tensor::matrix(1, x.len(), x)
}

/// `‖ε̄ − ε_φ(x̄_t, c, t)‖²` with `x̄_t` the forward-noised `x̄_0`.
pub fn sft_loss<T: Scalar, M: EpsModel<T> + ?Sized>(
    phi: &M,
    s: &NoiseSchedule<T>,
    xbar0: &[T],
    c: Cond,
    t: usize,
    epsbar: &[T],
) -> Result<T> {
    let x = noised(s, xbar0, t, epsbar)?;
    let e = phi.predict(&x, &[c], &[t])?;
    Ok(sq_diff(epsbar, e.data()))
}

/// `‖ε̄ − ε_ref(x̄_t)‖² − ‖ε̄ − ε_φ(x̄_t)‖²`.
pub fn left_term<T: Scalar, M: EpsModel<T> + ?Sized, R: EpsModel<T> + ?Sized>(
    phi: &M,
    reference: &R,
    s: &NoiseSchedule<T>,
    xbar0: &[T],
    c: Cond,
    t: usize,
    epsbar: &[T],
) -> Result<T> {
    let x = noised(s, xbar0, t, epsbar)?;
    let r = reference.predict(&x, &[c], &[t])?;
    let p = phi.predict(&x, &[c], &[t])?;
    Ok(sq_diff(epsbar, r.data()) - sq_diff(epsbar, p.data()))
}

/// `‖ε − ε_ref(x_t)‖² − ‖ε − ε_φ(x_t)‖²` with `ε = ε_θ(x_t)`.
pub fn right_term<T, M, R, P>(
    phi: &M,
    reference: &R,
    policy: &P,
    s: &NoiseSchedule<T>,
    x_t: &[T],
    c: Cond,
    t: usize,
) -> Result<T>
where
    T: Scalar,
    M: EpsModel<T> + ?Sized,
    R: EpsModel<T> + ?Sized,
    P: EpsModel<T> + ?Sized,
{
    s.check_t(t)?;
    let x = Tensor::matrix(1, x_t.len(), x_t.to_vec())?;
    let e = policy.predict(&x, &[c], &[t])?;
    let r = reference.predict(&x, &[c], &[t])?;
    let p = phi.predict(&x, &[c], &[t])?;
    Ok(sq_diff(e.data(), r.data()) - sq_diff(e.data(), p.data()))
}

fn nonempty<T>(batch: &[LossBreakdown<T>]) -> Result<()> {
    if batch.is_empty() {
        return Err(DroError::InvalidArgument("empty loss batch".into()));
    }
    Ok(())
}

fn mean_of<T: Scalar>(batch: &[LossBreakdown<T>], f: impl Fn(&LossBreakdown<T>) -> T) -> Result<T> {
    nonempty(batch)?;
    let total = batch.iter().fold(T::zero(), |a, b| a + f(b));
    Ok(total / T::of_usize(batch.len()))
}

/// Mean of `max(m, margin)`.
pub fn trl_loss<T: Scalar>(batch: &[LossBreakdown<T>], m: T) -> Result<T> {
    mean_of(batch, |b| b.margin.max(m))
}

/// Mean of `‖ε̄ − ε_φ(x̄_t)‖² − ‖ε − ε_φ(x_t)‖²`, the φ-dependent part of the margin.
pub fn mm_loss<T: Scalar>(batch: &[LossBreakdown<T>]) -> Result<T> {
    mean_of(batch, |b| b.sft - b.push)
}

/// Mean of `−log σ(β_w · (l_left − l_right))`.
pub fn ce_loss<T: Scalar>(batch: &[LossBreakdown<T>], beta_w: T) -> Result<T> {
    if !(beta_w > T::zero()) {
        return Err(DroError::InvalidArgument(format!("beta_w must be > 0, got {beta_w}")));
    }
    mean_of(batch, |b| softplus(-beta_w * (b.l_left - b.l_right)))
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Thresholded ranking loss with floor `m`. `m = −∞` disables clipping.
    Trl {
        m: f64,
    },
    MaxMargin,
    CrossEntropy {
        beta_w: f64,
    },
    /// Plain denoising regression on the expert side.
    Sft,
}

impl Objective {
    /// Clip threshold used when labelling breakdowns.
    pub fn threshold(&self) -> f64 {
        match self {
            Objective::Trl { m } => *m,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Policy half of a batch: points `x_t` with frozen `ε_θ(x_t)` and `ε_ref(x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySide<T> {
    pub x: Tensor<T>,
    pub eps: Tensor<T>,
    pub reference: Tensor<T>,
}

/// Everything a ranking objective needs besides `φ` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingBatch<T> {
    pub cond: Vec<Cond>,
    pub t: Vec<usize>,
    /// Noised expert points `x̄_t`.
    pub expert_x: Tensor<T>,
    /// `ε̄`
    pub expert_eps: Tensor<T>,
    /// `ε_ref(x̄_t)`
    pub expert_ref: Tensor<T>,
    pub policy: Option<PolicySide<T>>,
}

impl<T: Scalar> RankingBatch<T> {
    /// Noises `xbar0` with `epsbar` and evaluates the frozen networks.
    /// `policy` pairs the policy network with its points `x_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn build<R, P>(
        s: &NoiseSchedule<T>,
        reference: &R,
        xbar0: &Tensor<T>,
        epsbar: Tensor<T>,
        cond: Vec<Cond>,
        t: Vec<usize>,
        policy: Option<(&P, Tensor<T>)>,
    ) -> Result<Self>
    where
        R: EpsModel<T> + ?Sized,
        P: EpsModel<T> + ?Sized,
    {
        if cond.len() != xbar0.rows() || t.len() != xbar0.rows() || xbar0.rows() == 0 {
            return Err(DroError::ShapeMismatch("ranking batch sizes disagree or are empty".into()));
        }
        let expert_x = forward_diffuse_batch(s, xbar0, &t, &epsbar)?;
        let expert_ref = reference.predict(&expert_x, &cond, &t)?;
        let policy = match policy {
            Some((model, x)) => {
                if !x.same_shape(xbar0) {
                    return Err(DroError::ShapeMismatch("policy points shape".into()));
                }
                let eps = model.predict(&x, &cond, &t)?;
                let reference = reference.predict(&x, &cond, &t)?;
                Some(PolicySide { x, eps, reference })
            }
            None => None,
        };
        Ok(Self { cond, t, expert_x, expert_eps: epsbar, expert_ref, policy })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// The batch without its policy side.
    pub fn expert_only(&self) -> Self {
        Self { policy: None, ..self.clone() }
    }
}

/// Tape nodes of one objective evaluation.
pub struct ObjectiveNodes {
    pub loss: Var,
    pub sft: Var,
    pub push: Option<Var>,
}

/// Records `objective` for `phi` (whose parameters are `vars`) on `tape`.
pub fn objective_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &[Var],
    phi: &DenoiserParams<T>,
    batch: &RankingBatch<T>,
    objective: Objective,
) -> Result<ObjectiveNodes> {
    let pe = phi.forward_tape(tape, vars, &batch.expert_x, &batch.cond, &batch.t)?;
    let eb = tape.constant(batch.expert_eps.clone());
    let d = tape.sub(eb, pe);
    let sft = tape.row_sq_norm(d);
    if objective == Objective::Sft {
        let loss = tape.mean(sft);
        return Ok(ObjectiveNodes { loss, sft, push: None });
    }
    let ref_left = tape.constant(Tensor::vector(row_sq_diffs(&batch.expert_eps, &batch.expert_ref)));
    let l_left = tape.sub(ref_left, sft);
    let mut push = None;
    let (margin, l_right) = match &batch.policy {
        Some(p) => {
            let pp = phi.forward_tape(tape, vars, &p.x, &batch.cond, &batch.t)?;
            let ev = tape.constant(p.eps.clone());
            let d = tape.sub(ev, pp);
            let pn = tape.row_sq_norm(d);
            push = Some(pn);
            let ref_right = tape.constant(Tensor::vector(row_sq_diffs(&p.eps, &p.reference)));
            let l_right = tape.sub(ref_right, pn);
            (tape.sub(l_right, l_left), Some(l_right))
        }
        None => (tape.neg(l_left), None),
    };
    let loss = match objective {
        Objective::Trl { m } => {
            let clipped = if m == f64::NEG_INFINITY { margin } else { tape.max_const(margin, T::of(m)) };
            tape.mean(clipped)
        }
        Objective::MaxMargin => {
            let phi_part = match push {
                Some(pn) => tape.sub(sft, pn),
                None => sft,
            };
            tape.mean(phi_part)
        }
        Objective::CrossEntropy { beta_w } => {
            if !(beta_w > 0.0) {
                return Err(DroError::InvalidArgument(format!("beta_w must be > 0, got {beta_w}")));
            }
            let diff = match l_right {
                Some(r) => tape.sub(l_left, r),
                None => l_left,
            };
            let z = tape.scale(diff, T::of(beta_w));
            let s = tape.sigmoid(z);
            let ls = tape.log(s);
            let nl = tape.neg(ls);
            tape.mean(nl)
        }
        Objective::Sft => unreachable!("handled above"),
    };
    Ok(ObjectiveNodes { loss, sft, push })
}

/// Value and `∇_φ` of `objective` on `batch`, with per-item breakdowns.
pub fn evaluate<T: Scalar>(
    phi: &DenoiserParams<T>,
    batch: &RankingBatch<T>,
    objective: Objective,
) -> Result<(T, Gradient<T>, Vec<LossBreakdown<T>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = phi.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let nodes = objective_tape(&mut tape, &vars, phi, batch, objective)?;
    let breakdowns = breakdowns_from(batch, tape.value(nodes.sft), nodes.push.map(|p| tape.value(p)), objective);
    if let Some(i) = breakdowns.iter().position(|b| !b.is_finite()) {
        return Err(DroError::numeric(
            "ranking loss",
            format!("item {i} (t = {}, c = {:?}) is not finite", breakdowns[i].t, breakdowns[i].c),
        ));
    }
    let g = tape.backward(nodes.loss, &vars)?;
    Ok((tape.scalar(nodes.loss), Gradient { tensors: g }, breakdowns))
}

fn breakdowns_from<T: Scalar>(
    batch: &RankingBatch<T>,
    sft: &Tensor<T>,
    push: Option<&Tensor<T>>,
    objective: Objective,
) -> Vec<LossBreakdown<T>> {
    let ref_left = row_sq_diffs(&batch.expert_eps, &batch.expert_ref);
    let ref_right = match &batch.policy {
        Some(p) => row_sq_diffs(&p.eps, &p.reference),
        None => vec![T::zero(); batch.len()],
    };
    let m = T::of(objective.threshold());
    (0..batch.len())
        .map(|i| {
            let pu = push.map_or(T::zero(), |p| p.data()[i]);
            LossBreakdown::from_norms(ref_left[i], sft.data()[i], ref_right[i], pu, m, batch.t[i], batch.cond[i])
        })
        .collect()
}

/// Breakdowns of `phi` on `batch` without a gradient pass.
pub fn breakdowns<T: Scalar>(phi: &DenoiserParams<T>, batch: &RankingBatch<T>, m: T) -> Result<Vec<LossBreakdown<T>>> {
    let pe = phi.forward(&batch.expert_x, &batch.cond, &batch.t)?;
    let sft = Tensor::vector(row_sq_diffs(&batch.expert_eps, &pe));
    let push = match &batch.policy {
        Some(p) => Some(Tensor::vector(row_sq_diffs(&p.eps, &phi.forward(&p.x, &batch.cond, &batch.t)?))),
        None => None,
    };
    Ok(breakdowns_from(batch, &sft, push.as_ref(), Objective::Trl { m: m.f64() }))
}
