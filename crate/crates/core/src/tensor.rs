//! Dense row-major tensors and the eager kernels shared with the tape.
//!
//! Every kernel checks its output for non-finite values. A NaN or infinity
//! is always reported as [`Error::NonFinite`], never passed along.

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `[n, d]` matrix from equal-length rows. An empty slice
    /// yields a `[0, 0]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {} has {} values, expected {}", i, r.len(), cols),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent of a rank-2 tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing extent (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Selects rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Gathers the given rows of a rank-2 tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::dim("vstack", "column counts differ"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, c, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign_unchecked(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents {} and {} disagree", k, k2),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::matrix(m, n, out)?.check_finite("matmul")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)?.check_finite("add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)?.check_finite("sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)?.check_finite("mul")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map(|v| v * c).check_finite("scale")
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.map(|v| v + c).check_finite("add_scalar")
    }

    /// Adds a `[n]` or `[1, n]` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("add_bias")?;
        if bias.len() != n || bias.rank() > 2 || (bias.rank() == 2 && bias.shape[0] != 1) {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not fit {:?}", bias.shape, self.shape),
            ));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Tensor::new(self.shape.clone(), out)?.check_finite("add_bias")
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.map(|v| if v >= 0.0 { v } else { slope * v })
            .check_finite("leaky_relu")
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.map(f64::tanh).check_finite("tanh")
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map(f64::exp).check_finite("exp")
    }

    pub fn log(&self) -> Result<Tensor> {
        self.map(f64::ln).check_finite("log")
    }

    pub fn square(&self) -> Result<Tensor> {
        self.map(|v| v * v).check_finite("square")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.map(|v| v.clamp(lo, hi)).check_finite("clamp")
    }

    pub fn sum(&self) -> Result<Tensor> {
        Tensor::scalar(self.data.iter().sum()).check_finite("sum")
    }

    /// Per-row sums of an `[m, n]` matrix, as an `[m, 1]` column.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("row_sum")?;
        let data = if n == 0 {
            vec![0.0; m]
        } else {
            self.data.chunks(n).map(|r| r.iter().sum()).collect()
        };
        Tensor::matrix(m, 1, data)?.check_finite("row_sum")
    }

    /// Columns `start..end` of an `[m, n]` matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim(
                "slice_cols",
                format!("range {}..{} out of {} columns", start, end, n),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Tensor::matrix(m, w, out)
    }
}

/// `c (+)= op(a) * op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements, and the
    // strides above address exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Log-density of a diagonal Gaussian evaluated at a single point.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], log_var: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != log_var.len() {
        return Err(Error::dim(
            "gaussian_log_density",
            format!("{} / {} / {}", x.len(), mean.len(), log_var.len()),
        ));
    }
    let mut acc = 0.0;
    for ((&xi, &mi), &lv) in x.iter().zip(mean).zip(log_var) {
        let d = xi - mi;
        acc += -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp();
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite {
            op: "gaussian_log_density",
        });
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.data()[i * k + t] * b.data()[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap().data(), &[3.0, 4.0]);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2, 1]);
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let b = Tensor::matrix(4, 2, (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let got = a.matmul(&b).unwrap();
            for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor::vector(vec![2.0, -1.0, 0.0]);
        let y = x.leaky_relu(0.2).unwrap();
        assert_eq!(y.data(), &[2.0, -0.2, 0.0]);
    }

    #[test]
    fn gaussian_density_cases() {
        let v = gaussian_log_density(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v + 1.837877).abs() < 1e-6);
        let v = gaussian_log_density(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v + 4.337877).abs() < 1e-6);
        let lv = [0.3, -1.2, 2.0];
        let m = [0.5, 0.1, -3.0];
        let v = gaussian_log_density(&m, &m, &lv).unwrap();
        let expect = -1.5 * LN_2PI - 0.5 * lv.iter().sum::<f64>();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::vector(vec![1000.0]);
        assert!(matches!(x.exp(), Err(Error::NonFinite { op: "exp" })));
        let x = Tensor::vector(vec![-1.0]);
        assert!(x.log().is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }
}
