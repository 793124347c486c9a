//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records a straight-line program over a closed primitive set:
//! affine maps (`matmul`, `add_bias`, `add`, `sub`, `scale`), the smooth
//! elementwise nonlinearity `silu`, squared row norms, `sum`/`mean`,
//! `sigmoid`, `log` and `max_const`, plus the structural ops `concat_cols`
//! and `gather_rows`. [`Tape::backward`] replays it in reverse.
//!
//! Any primitive producing a non-finite value marks the tape as faulted; the
//! first fault is reported by `backward` (and [`Tape::check`]) with the name
//! of the offending primitive.

use crate::error::{DroError, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Silu(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RowSqNorm(Var),
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Log(Var),
    MaxConst(Var, T),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::RowSqNorm(..) => "row_sq_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::MaxConst(..) => "max_const",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<DroError>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that carries no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Returns the first fault recorded while building the tape.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(DroError::Numeric { op, detail }) => Err(DroError::numeric(op.clone(), detail.clone())),
            Some(DroError::ShapeMismatch(s)) => Err(DroError::ShapeMismatch(s.clone())),
            Some(e) => Err(DroError::InvalidArgument(e.to_string())),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(DroError::numeric(op.name(), format!("non-finite value at node {}", self.nodes.len())));
        }
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn shape_fault(&mut self, what: String, shape: &[usize]) -> Var {
        if self.fault.is_none() {
            self.fault = Some(DroError::ShapeMismatch(what));
        }
        self.nodes.push(Node { value: Tensor::zeros(shape), op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        match self.value(a).matmul(self.value(b)) {
            Ok(v) => {
                let tr = self.tracked(a) || self.tracked(b);
                self.push(v, Op::MatMul(a, b), tr)
            }
            Err(e) => self.shape_fault(e.to_string(), &[1]),
        }
    }

    /// Adds a bias row `[m]` to every row of `[n, m]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.cols() != bv.len() {
            let msg = format!("add_bias {:?} + {:?}", av.shape(), bv.shape());
            let shape = av.shape().to_vec();
            return self.shape_fault(msg, &shape);
        }
        let mut out = av.clone();
        let b = bv.data().to_vec();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let tr = self.tracked(a) || self.tracked(bias);
        self.push(out, Op::AddBias(a, bias), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        match self.value(a).zip_map(self.value(b), |x, y| x + y) {
            Ok(v) => {
                let tr = self.tracked(a) || self.tracked(b);
                self.push(v, Op::Add(a, b), tr)
            }
            Err(e) => self.shape_fault(e.to_string(), &[1]),
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        match self.value(a).zip_map(self.value(b), |x, y| x - y) {
            Ok(v) => {
                let tr = self.tracked(a) || self.tracked(b);
                self.push(v, Op::Sub(a, b), tr)
            }
            Err(e) => self.shape_fault(e.to_string(), &[1]),
        }
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let tr = self.tracked(a);
        self.push(v, Op::Scale(a, c), tr)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let tr = self.tracked(a);
        self.push(v, Op::Silu(a), tr)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return self.shape_fault("concat_cols: row counts differ".into(), &[rows, 1]);
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        let v = Tensor::matrix(rows, total, data).expect("sized above");
        self.push(v, Op::ConcatCols(parts.to_vec()), tr)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows()) {
            let msg = format!("gather_rows index {bad} >= {}", tv.rows());
            return self.shape_fault(msg, &[idx.len(), cols]);
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(tv.row(i));
        }
        let v = Tensor::matrix(idx.len(), cols, data).expect("sized above");
        let tr = self.tracked(table);
        self.push(v, Op::GatherRows(table, idx.to_vec()), tr)
    }

    /// `[n, m] -> [n]`, squared Euclidean norm of each row.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<T> = (0..av.rows()).map(|i| av.row(i).iter().fold(T::zero(), |s, &x| s + x * x)).collect();
        let tr = self.tracked(a);
        self.push(Tensor::vector(out), Op::RowSqNorm(a), tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let tr = self.tracked(a);
        self.push(v, Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Tensor::scalar(av.sum() / T::of_usize(av.len()));
        let tr = self.tracked(a);
        self.push(v, Op::Mean(a), tr)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let tr = self.tracked(a);
        self.push(v, Op::Sigmoid(a), tr)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let tr = self.tracked(a);
        self.push(v, Op::Log(a), tr)
    }

    /// Elementwise `max(c, x)`. At `x == c` the gradient flows through `x`.
    pub fn max_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| if x >= c { x } else { c });
        let tr = self.tracked(a);
        self.push(v, Op::MaxConst(a, c), tr)
    }

    /// Gradients of the one-element node `loss` with respect to `wrt`.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        self.check()?;
        if self.value(loss).len() != 1 {
            return Err(DroError::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.tracked(*bias) {
                        let bshape = self.value(*bias).shape().to_vec();
                        let mut gb = Tensor::zeros(&bshape);
                        for i in 0..g.rows() {
                            for (o, &v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (T::one() - s))
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        if self.tracked(p) {
                            let mut gp = Tensor::zeros(pv.shape());
                            for i in 0..g.rows() {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(table, rows) => {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::RowSqNorm(a) => {
                    let av = self.value(*a);
                    let two = T::of(2.0);
                    let mut ga = Tensor::zeros(av.shape());
                    for i in 0..av.rows() {
                        let gi = g.data()[i];
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = two * x * gi;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0] / T::of_usize(av.len());
                    accumulate(&mut grads, *a, Tensor::full(av.shape(), gv));
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gv, s| gv * s * (T::one() - s))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv / x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaxConst(a, c) => {
                    let c = *c;
                    let ga = g.zip_map(self.value(*a), |gv, x| if x >= c { gv } else { T::zero() })?;
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        wrt.iter()
            .map(|&v| {
                let g = if v.0 < grads.len() { grads[v.0].clone() } else { None };
                let g = g.unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(DroError::numeric("backward", format!("non-finite gradient at node {}", v.0)))
                }
            })
            .collect()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let n = tape.row_sq_norm(p);
        let l = tape.sum(n);
        assert_eq!(tape.scalar(l), 5.0);
        let g = tape.backward(l, &[p]).unwrap();
        assert_eq!(g[0].data(), &[2.0, -4.0]);
    }

    #[test]
    fn max_const_clipped_branch_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![-0.5, 3.0]));
        let m = tape.max_const(p, 0.0);
        let l = tape.sum(m);
        let g = tape.backward(l, &[p]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn max_const_tie_takes_the_variable_branch() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![-0.001]));
        let m = tape.max_const(p, -0.001);
        let l = tape.sum(m);
        let g = tape.backward(l, &[p]).unwrap();
        assert_eq!(g[0].data(), &[1.0]);
    }

    #[test]
    fn constants_carry_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0]));
        let d = tape.sub(c, p);
        let l = tape.sum(d);
        let g = tape.backward(l, &[p, c]).unwrap();
        assert_eq!(g[0].data(), &[-1.0]);
        assert_eq!(g[1].data(), &[0.0]);
    }

    #[test]
    fn log_of_zero_names_the_primitive() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![0.0]));
        let l = tape.log(p);
        let s = tape.sum(l);
        match tape.backward(s, &[p]) {
            Err(DroError::Numeric { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let g = tape.gather_rows(table, &[1, 1, 0]);
        let l = tape.sum(g);
        assert_eq!(tape.scalar(l), 5.0);
        let grads = tape.backward(l, &[table]).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 2.0]);
    }
}
