use crate::error::{DroError, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Rank 1 and rank 2 are the only shapes the
/// denoiser needs; row accessors treat a rank-1 tensor as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DroError::ShapeMismatch(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DroError::ShapeMismatch(format!("ragged rows: {} vs {}", r.len(), cols)));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination; shapes must agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(DroError::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// `self[n,k] · rhs[k,m]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(DroError::ShapeMismatch(format!("matmul [{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(&self.data, &rhs.data, &mut out, n, k, m);
        Self::matrix(n, m, out)
    }

    /// `self[n,k]ᵀ · rhs[n,m]` giving `[k,m]`.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (n2, m) = (rhs.rows(), rhs.cols());
        if n != n2 {
            return Err(DroError::ShapeMismatch(format!("t_matmul [{n},{k}]^T x [{n2},{m}]")));
        }
        let mut out = vec![T::zero(); k * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let b = &rhs.data[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o = &mut out[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Self::matrix(k, m, out)
    }

    /// `self[n,m] · rhs[k,m]ᵀ` giving `[n,k]`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        let (n, m) = (self.rows(), self.cols());
        let (k, m2) = (rhs.rows(), rhs.cols());
        if m != m2 {
            return Err(DroError::ShapeMismatch(format!("matmul_t [{n},{m}] x [{k},{m2}]^T")));
        }
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let a = &self.data[i * m..(i + 1) * m];
            for j in 0..k {
                let b = &rhs.data[j * m..(j + 1) * m];
                out[i * k + j] = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            }
        }
        Self::matrix(n, k, out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);

        let bt = Tensor::matrix(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), c);

        let at = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        assert_eq!(at.t_matmul(&b).unwrap(), c);
    }

    #[test]
    fn rank_one_is_a_row() {
        let v = Tensor::vector(vec![1.0f32, 2.0]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 2);
        assert_eq!(v.row(0), &[1.0, 2.0]);
    }
}
