//! Arrays, reverse-mode derivatives and seeded randomness.

pub mod rng;
pub mod tape;
pub mod tensor;

use crate::error::{DroError, Result};
use crate::scalar::Scalar;

pub use rng::{seeded_gaussian, Seed, StreamRng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Anything whose state is an ordered list of parameter arrays.
pub trait ParamSet<T: Scalar>: Clone {
    fn tensors(&self) -> &[Tensor<T>];
    fn tensors_mut(&mut self) -> &mut [Tensor<T>];

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(Tensor::len).sum()
    }
}

impl<T: Scalar> ParamSet<T> for Vec<Tensor<T>> {
    fn tensors(&self) -> &[Tensor<T>] {
        self
    }

    fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        self
    }
}

/// Per-parameter derivative arrays, congruent with the [`ParamSet`] they
/// were taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradient<T> {
    pub fn zeros_like<P: ParamSet<T>>(params: &P) -> Self {
        Self { tensors: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn congruent<P: ParamSet<T>>(&self, params: &P) -> bool {
        self.tensors.len() == params.tensors().len()
            && self.tensors.iter().zip(params.tensors()).all(|(g, p)| g.same_shape(p))
    }
}

/// Evaluates `loss` on a fresh tape whose leaves are `params` and returns
/// its value together with the exact reverse-mode gradient.
pub fn grad<T, P, F>(params: &P, loss: F) -> Result<(T, Gradient<T>)>
where
    T: Scalar,
    P: ParamSet<T>,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let g = tape.backward(out, &vars)?;
    Ok((tape.scalar(out), Gradient { tensors: g }))
}

fn value_only<T, P, F>(params: &P, loss: &F) -> Result<T>
where
    T: Scalar,
    P: ParamSet<T>,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    tape.check()?;
    Ok(tape.scalar(out))
}

/// Largest relative disagreement between the reverse-mode gradient and
/// central differences of step `step`, with relative error measured as
/// `|a - fd| / max(1, |a|, |fd|)`.
pub fn grad_check<T, P, F>(params: &P, loss: F, step: T) -> Result<T>
where
    T: Scalar,
    P: ParamSet<T>,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(DroError::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let (_, analytic) = grad(params, &loss)?;
    let mut probe = params.clone();
    let two = T::of(2.0);
    let mut worst = T::zero();
    for ti in 0..params.tensors().len() {
        for j in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + step;
            let up = value_only(&probe, &loss)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig - step;
            let down = value_only(&probe, &loss)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            let fd = (up - down) / (two * step);
            let a = analytic.tensors[ti].data()[j];
            let denom = T::one().max(a.abs()).max(fd.abs());
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_and_check() {
        let p = vec![Tensor::vector(vec![1.0f64, -2.0])];
        let loss = |tape: &mut Tape<f64>, v: &[Var]| {
            let n = tape.row_sq_norm(v[0]);
            Ok(tape.sum(n))
        };
        let (val, g) = grad(&p, loss).unwrap();
        assert_eq!(val, 5.0);
        assert_eq!(g.tensors[0].data(), &[2.0, -4.0]);
        assert!(grad_check(&p, loss, 1e-5).unwrap() < 1e-10);
    }

    #[test]
    fn clipped_max_has_zero_gradient() {
        let p = vec![Tensor::matrix(2, 1, vec![-3.0f64, 5.0]).unwrap()];
        let (_, g) = grad(&p, |tape, v| {
            let first = tape.gather_rows(v[0], &[0]);
            let m = tape.max_const(first, 1.0);
            Ok(tape.sum(m))
        })
        .unwrap();
        assert_eq!(g.tensors[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = vec![Tensor::vector(vec![1.0f64])];
        let r = grad_check(&p, |t, v| Ok(t.sum(v[0])), 0.0);
        assert!(matches!(r, Err(DroError::InvalidArgument(_))));
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = Seed(3).rng();
        let mut mk = |r: usize, c: usize| Tensor::matrix(r, c, rng::normal_vec::<f64>(&mut rng, r * c)).unwrap();
        let x = mk(5, 3);
        let params = vec![mk(3, 4), mk(1, 4), mk(4, 2), mk(1, 2)];
        let loss = |tape: &mut Tape<f64>, v: &[Var]| {
            let xi = tape.constant(x.clone());
            let h = tape.matmul(xi, v[0]);
            let h = tape.add_bias(h, v[1]);
            let h = tape.silu(h);
            let o = tape.matmul(h, v[2]);
            let o = tape.add_bias(o, v[3]);
            let s = tape.sigmoid(o);
            let l = tape.log(s);
            let n = tape.row_sq_norm(l);
            Ok(tape.mean(n))
        };
        let err = grad_check(&params, loss, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
