//! Conditional ε-prediction MLP.
//!
//! Input is `concat(x_t, time_embedding(t / T), condition_embedding(c))`,
//! followed by SiLU hidden layers and a linear output of the data
//! dimension. The condition table has one learned row per label plus a final
//! row for the null condition.

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::numerics::rng::{normal, uniform};
use crate::numerics::{ParamSet, Seed, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// A condition label or the null (dropped) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Label(usize),
    Null,
}

impl Cond {
    pub fn label(self) -> Option<usize> {
        match self {
            Cond::Label(c) => Some(c),
            Cond::Null => None,
        }
    }
}

impl std::fmt::Display for Cond {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cond::Label(c) => write!(f, "{c}"),
            Cond::Null => write!(f, "null"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub n_conditions: usize,
    pub cond_dim: usize,
    /// Number of sinusoid frequencies; the embedding has twice as many features.
    pub time_freqs: usize,
    /// Diffusion horizon `T` used to normalise timesteps.
    pub horizon: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { data_dim: 2, hidden: vec![128, 128], n_conditions: 4, cond_dim: 8, time_freqs: 6, horizon: 50 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(DroError::InvalidArgument("data_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(DroError::InvalidArgument(format!("hidden widths must be >= 1, got {:?}", self.hidden)));
        }
        if self.n_conditions == 0 {
            return Err(DroError::InvalidArgument("need at least one condition".into()));
        }
        if self.horizon == 0 {
            return Err(DroError::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_freqs + self.cond_dim
    }

    /// `(fan_in, fan_out)` of each dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.data_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        dense + (self.n_conditions + 1) * self.cond_dim
    }

    pub fn cond_row(&self, c: Cond) -> Result<usize> {
        match c {
            Cond::Label(k) if k < self.n_conditions => Ok(k),
            Cond::Label(k) => Err(DroError::UnknownCondition(k)),
            Cond::Null => Ok(self.n_conditions),
        }
    }
}

/// Sinusoidal features of `t / T` at frequencies `π · 2^k`.
pub fn time_embedding<T: Scalar>(t: usize, horizon: usize, freqs: usize) -> Vec<T> {
    let u = t as f64 / horizon as f64;
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out.push(T::of((w * u).sin()));
        out.push(T::of((w * u).cos()));
    }
    out
}

/// Anything that predicts the noise in a batch of noisy points.
pub trait EpsModel<T: Scalar>: Sync {
    fn data_dim(&self) -> usize;

    /// `x` is `[n, data_dim]`; `cond` and `t` have one entry per row.
    fn predict(&self, x: &Tensor<T>, cond: &[Cond], t: &[usize]) -> Result<Tensor<T>>;

    fn predict_one(&self, x: &[T], c: Cond, t: usize) -> Result<Vec<T>> {
        let xm = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.predict(&xm, &[c], &[t])?.into_data())
    }
}

/// Classifier-free guided prediction `ε_null + w (ε_c − ε_null)`.
/// `w == 1` skips the unconditional pass; rows whose condition is already
/// null come out as the plain null prediction.
pub fn predict_eps_cfg<T: Scalar, M: EpsModel<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    cond: &[Cond],
    t: &[usize],
    w: T,
) -> Result<Tensor<T>> {
    let eps_c = model.predict(x, cond, t)?;
    if w == T::one() {
        return Ok(eps_c);
    }
    let nulls = vec![Cond::Null; cond.len()];
    let eps_null = model.predict(x, &nulls, t)?;
    eps_null.zip_map(&eps_c, |n, c| n + w * (c - n))
}

/// Flat parameter record of one denoiser: `[W_0, b_0, …, W_L, b_L, cond_table]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    arch: Architecture,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> for DenoiserParams<T> {
    fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }
}

impl<T: Scalar> DenoiserParams<T> {
    /// Dense weights and biases ~ U(−1/√fan_in, 1/√fan_in); condition rows ~ N(0, 1).
    pub fn init(arch: &Architecture, seed: impl Into<Seed>) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed.into().rng();
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in arch.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw =
                |n: usize| -> Vec<T> { (0..n).map(|_| T::of((2.0 * uniform(&mut rng) - 1.0) * bound)).collect() };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            tensors.push(Tensor::matrix(fan_in, fan_out, w)?);
            tensors.push(Tensor::vector(b));
        }
        let rows = arch.n_conditions + 1;
        let table: Vec<T> = (0..rows * arch.cond_dim).map(|_| normal(&mut rng)).collect();
        tensors.push(Tensor::matrix(rows, arch.cond_dim, table)?);
        Ok(Self { arch: arch.clone(), tensors })
    }

    /// Rebuilds a record from raw arrays, checking them against `arch`.
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let mut expected: Vec<Vec<usize>> = Vec::new();
        for (i, o) in arch.layer_dims() {
            expected.push(vec![i, o]);
            expected.push(vec![o]);
        }
        expected.push(vec![arch.n_conditions + 1, arch.cond_dim]);
        if tensors.len() != expected.len() || tensors.iter().zip(&expected).any(|(t, e)| t.shape() != e.as_slice()) {
            return Err(DroError::ShapeMismatch(format!("parameter arrays do not match architecture {arch:?}")));
        }
        if tensors.iter().any(|t| !t.is_finite()) {
            return Err(DroError::numeric("from_tensors", "non-finite parameter"));
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserParams<U> {
        DenoiserParams { arch: self.arch.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Zeroes the output layer, making the network predict `0` everywhere.
    pub fn zero_output_layer(&mut self) {
        let n = self.tensors.len();
        for t in &mut self.tensors[n - 3..n - 1] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_inputs(&self, x: &Tensor<T>, cond: &[Cond], t: &[usize]) -> Result<Vec<usize>> {
        if x.cols() != self.arch.data_dim || cond.len() != x.rows() || t.len() != x.rows() {
            return Err(DroError::ShapeMismatch(format!(
                "x {:?} with {} conditions and {} timesteps (data_dim {})",
                x.shape(),
                cond.len(),
                t.len(),
                self.arch.data_dim
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.arch.horizon) {
            return Err(DroError::TimestepOutOfRange { t: bad, horizon: self.arch.horizon });
        }
        cond.iter().map(|&c| self.arch.cond_row(c)).collect()
    }

    fn time_features(&self, t: &[usize]) -> Tensor<T> {
        let f = 2 * self.arch.time_freqs;
        let mut data = Vec::with_capacity(t.len() * f);
        for &s in t {
            data.extend(time_embedding::<T>(s, self.arch.horizon, self.arch.time_freqs));
        }
        Tensor::matrix(t.len(), f, data).expect("sized above")
    }

    /// Batched ε prediction without recording derivatives.
    pub fn forward(&self, x: &Tensor<T>, cond: &[Cond], t: &[usize]) -> Result<Tensor<T>> {
        let rows = self.check_inputs(x, cond, t)?;
        let n = x.rows();
        let temb = self.time_features(t);
        let table = self.tensors.last().expect("cond table");
        let width = self.arch.input_dim();
        let mut input = Vec::with_capacity(n * width);
        for i in 0..n {
            input.extend_from_slice(x.row(i));
            input.extend_from_slice(temb.row(i));
            input.extend_from_slice(table.row(rows[i]));
        }
        let mut h = Tensor::matrix(n, width, input)?;
        let layers = self.arch.hidden.len() + 1;
        for l in 0..layers {
            let w = &self.tensors[2 * l];
            let b = self.tensors[2 * l + 1].data();
            h = h.matmul(w)?;
            for i in 0..n {
                for (v, &bb) in h.row_mut(i).iter_mut().zip(b) {
                    *v += bb;
                }
            }
            if l + 1 < layers {
                h = h.map(|v| v * crate::numerics::tape::sigmoid(v));
            }
        }
        if !h.is_finite() {
            return Err(DroError::numeric("denoiser forward", "non-finite output"));
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`, where `vars` are this record's
    /// parameters as tape leaves (in [`ParamSet::tensors`] order).
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: &Tensor<T>,
        cond: &[Cond],
        t: &[usize],
    ) -> Result<Var> {
        let rows = self.check_inputs(x, cond, t)?;
        if vars.len() != self.tensors.len() {
            return Err(DroError::ShapeMismatch("tape variables do not match parameters".into()));
        }
        let xv = tape.constant(x.clone());
        let tv = tape.constant(self.time_features(t));
        let cv = tape.gather_rows(vars[vars.len() - 1], &rows);
        let mut h = tape.concat_cols(&[xv, tv, cv]);
        let layers = self.arch.hidden.len() + 1;
        for l in 0..layers {
            h = tape.matmul(h, vars[2 * l]);
            h = tape.add_bias(h, vars[2 * l + 1]);
            if l + 1 < layers {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    pub fn predict_eps(&self, x: &[T], c: Cond, t: usize) -> Result<Vec<T>> {
        self.predict_one(x, c, t)
    }
}

impl<T: Scalar> EpsModel<T> for DenoiserParams<T> {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x: &Tensor<T>, cond: &[Cond], t: &[usize]) -> Result<Tensor<T>> {
        self.forward(x, cond, t)
    }
}

/// Exponential moving average of a parameter record.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub shadow: DenoiserParams<T>,
    pub decay: T,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(source: &DenoiserParams<T>, decay: T) -> Result<Self> {
        if !(decay >= T::zero() && decay < T::one()) {
            return Err(DroError::InvalidArgument(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self { shadow: source.clone(), decay })
    }

    /// `shadow ← decay · shadow + (1 − decay) · current`.
    pub fn update(&mut self, current: &DenoiserParams<T>) -> Result<()> {
        if self.shadow.arch != current.arch {
            return Err(DroError::ShapeMismatch("EMA source architecture changed".into()));
        }
        let d = self.decay;
        let keep = T::one() - d;
        for (s, c) in self.shadow.tensors.iter_mut().zip(&current.tensors) {
            for (sv, &cv) in s.data_mut().iter_mut().zip(c.data()) {
                *sv = d * *sv + keep * cv;
            }
        }
        Ok(())
    }
}

pub fn ema_update<T: Scalar>(mut e: EmaState<T>, current: &DenoiserParams<T>) -> Result<EmaState<T>> {
    e.update(current)?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn small() -> Architecture {
        Architecture { data_dim: 2, hidden: vec![8, 8], n_conditions: 3, cond_dim: 4, time_freqs: 3, horizon: 10 }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = DenoiserParams::<f64>::init(&small(), 1).unwrap();
        let b = DenoiserParams::<f64>::init(&small(), 1).unwrap();
        let c = DenoiserParams::<f64>::init(&small(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let arch = Architecture {
            data_dim: 2,
            hidden: vec![64, 64],
            n_conditions: 3,
            cond_dim: 8,
            time_freqs: 6,
            horizon: 50,
        };
        // input 2 + 12 + 8 = 22
        let hand = (22 * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2) + 4 * 8;
        assert_eq!(hand, 5794);
        assert_eq!(arch.param_count(), hand);
        let p = DenoiserParams::<f32>::init(&arch, 0).unwrap();
        assert_eq!(p.num_scalars(), hand);
    }

    #[test]
    fn rejects_zero_width() {
        let mut arch = small();
        arch.hidden = vec![8, 0];
        assert!(DenoiserParams::<f64>::init(&arch, 0).is_err());
    }

    #[test]
    fn prediction_is_pure_and_checks_ranges() {
        let p = DenoiserParams::<f64>::init(&small(), 3).unwrap();
        let x = [0.3, -1.2];
        let a = p.predict_eps(&x, Cond::Label(1), 4).unwrap();
        let b = p.predict_eps(&x, Cond::Label(1), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(matches!(p.predict_eps(&x, Cond::Label(1), 0), Err(DroError::TimestepOutOfRange { .. })));
        assert!(matches!(p.predict_eps(&x, Cond::Label(1), 11), Err(DroError::TimestepOutOfRange { .. })));
        assert!(matches!(p.predict_eps(&x, Cond::Label(3), 4), Err(DroError::UnknownCondition(3))));
        assert!(p.predict_eps(&x, Cond::Null, 4).is_ok());
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut p = DenoiserParams::<f64>::init(&small(), 3).unwrap();
        p.zero_output_layer();
        assert_eq!(p.predict_eps(&[5.0, 1.0], Cond::Label(0), 2).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn condition_changes_output() {
        let p = DenoiserParams::<f64>::init(&small(), 3).unwrap();
        let a = p.predict_eps(&[0.1, 0.2], Cond::Label(0), 5).unwrap();
        let b = p.predict_eps(&[0.1, 0.2], Cond::Label(2), 5).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn guidance_combination() {
        let p = DenoiserParams::<f64>::init(&small(), 9).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.4, -0.7]).unwrap();
        let (c, t) = ([Cond::Label(2)], [7]);
        let eps_c = p.forward(&x, &c, &t).unwrap();
        let eps_n = p.forward(&x, &[Cond::Null], &t).unwrap();
        assert_eq!(predict_eps_cfg(&p, &x, &c, &t, 1.0).unwrap(), eps_c);
        assert_eq!(predict_eps_cfg(&p, &x, &c, &t, 0.0).unwrap(), eps_n);
        let g = predict_eps_cfg(&p, &x, &c, &t, 7.5).unwrap();
        for j in 0..2 {
            let expected = eps_n.data()[j] + 7.5 * (eps_c.data()[j] - eps_n.data()[j]);
            assert!((g.data()[j] - expected).abs() < 1e-14);
        }
        assert_eq!(predict_eps_cfg(&p, &x, &[Cond::Null], &t, 2.0).unwrap(), eps_n);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = DenoiserParams::<f64>::init(&small(), 4).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 2.0, 0.5, 0.5]).unwrap();
        let cond = [Cond::Label(0), Cond::Null, Cond::Label(2)];
        let t = [1, 5, 10];
        let plain = p.forward(&x, &cond, &t).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.tensors().iter().map(|w| tape.param(w.clone())).collect();
        let out = p.forward_tape(&mut tape, &vars, &x, &cond, &t).unwrap();
        let taped = tape.value(out);
        for (a, b) in plain.data().iter().zip(taped.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let p = DenoiserParams::<f64>::init(&small(), 5).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let cond = [Cond::Label(1), Cond::Null];
        let t = [3, 8];
        let err = grad_check(
            &p,
            |tape, vars| {
                let out = p.forward_tape(tape, vars, &x, &cond, &t)?;
                let n = tape.row_sq_norm(out);
                Ok(tape.mean(n))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn bounded_inputs_give_finite_outputs() {
        let p = DenoiserParams::<f64>::init(&small(), 6).unwrap();
        for &scale in &[1.0, 1e3, 1e6] {
            let out = p.predict_eps(&[scale, -scale], Cond::Label(0), 1).unwrap();
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn ema_one_step_and_geometric_gap() {
        let arch = small();
        let mut zero = DenoiserParams::<f64>::init(&arch, 0).unwrap();
        zero.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut one = zero.clone();
        one.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(1.0));

        let e = ema_update(EmaState::new(&zero, 0.9999).unwrap(), &one).unwrap();
        assert!(e.shadow.tensors().iter().all(|t| t.data().iter().all(|&v| (v - 0.0001).abs() < 1e-15)));

        let e = ema_update(EmaState::new(&zero, 0.0).unwrap(), &one).unwrap();
        assert_eq!(e.shadow, one);

        let mut e = EmaState::new(&zero, 0.5).unwrap();
        for k in 1..=10 {
            e.update(&one).unwrap();
            let gap = 1.0 - e.shadow.tensors()[0].data()[0];
            assert_eq!(gap, 0.5f64.powi(k));
        }
    }

    #[test]
    fn ema_rejects_other_architecture() {
        let a = DenoiserParams::<f64>::init(&small(), 0).unwrap();
        let mut arch = small();
        arch.hidden = vec![4];
        let b = DenoiserParams::<f64>::init(&arch, 0).unwrap();
        let mut e = EmaState::new(&a, 0.9).unwrap();
        assert!(e.update(&b).is_err());
    }
}
