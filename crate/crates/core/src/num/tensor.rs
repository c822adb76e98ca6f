//! Dense row-major f64 tensors and the plain (non-recording) kernels.
//!
//! Everything downstream of this file works in 64-bit floats. The matrix
//! product delegates to `matrixmultiply::dgemm` for throughput; shape
//! checking, gradient rules and the rest of the numeric contract live here.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor construction",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform init over (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.range_f64(-bound, bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for 2-D tensors; 1 for 1-D.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count: last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Validity check demanded by the tensor contract: every entry finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// C = A @ B for 2-D tensors, inner dimensions checked.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    dgemm_into(a.data(), b.data(), &mut out, m, k, n, false, false, 0.0);
    Tensor::new(vec![m, n], out)
}

/// out = alpha-accumulated A(^T) @ B(^T), row-major buffers.
///
/// `beta = 0.0` overwrites, `beta = 1.0` accumulates. Transposition is
/// expressed through strides so no copies are made.
pub fn dgemm_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: f64,
) {
    let (rsa, csa) = if trans_a {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Numerically stable softmax along `axis` (max subtraction).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_strides(x.shape(), axis)?;
    let mut out = vec![0.0; x.numel()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[idx(j)]);
            }
            let mut denom = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[idx(j)] /= denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// log(sum(exp(x))) along `axis`, max-subtracted. The reduced axis is
/// collapsed to length 1.
pub fn logsumexp(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_strides(x.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                sum += (data[idx(j)] - max).exp();
            }
            out[o * inner + i] = max + sum.ln();
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

/// KL(p || q) for categorical distributions, with the 0 ln 0 = 0 convention.
///
/// Both must be distributions (sum to 1 within 1e-9). A zero in q where p has
/// mass is a domain error.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_categorical",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "kl_categorical: {name} sums to {s}, expected 1"
            )));
        }
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Domain(
                "kl_categorical: q has zero mass where p > 0".into(),
            ));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        for c in [-100.0, 0.0, 3.5, 1e6] {
            let x = Tensor::new(vec![2], vec![c, c + 3f64.ln()]).unwrap();
            let s = softmax(&x, 0).unwrap();
            assert!((s.data()[0] - 0.25).abs() < 1e-9, "c={c}");
            assert!((s.data()[1] - 0.75).abs() < 1e-9, "c={c}");
        }
    }

    #[test]
    fn softmax_no_overflow() {
        let x = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!(s.is_finite());
        assert!(s.data()[0] > 1.0 - 1e-12);
        assert!(s.data()[1] < 1e-12);
    }

    #[test]
    fn logsumexp_cases() {
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!((logsumexp(&x, 0).unwrap().item() - 2f64.ln()).abs() < 1e-12);

        let single = Tensor::new(vec![1], vec![-4.2]).unwrap();
        assert!((logsumexp(&single, 0).unwrap().item() - (-4.2)).abs() < 1e-12);

        let cv = Tensor::new(vec![4], vec![5.0; 4]).unwrap();
        assert!((logsumexp(&cv, 0).unwrap().item() - (5.0 + 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_categorical(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_direct_summation_oracle() {
        // Independent oracle: direct summation of p ln(p/q).
        let p = [0.7f64, 0.1, 0.1, 0.1];
        let q = [0.25f64; 4];
        let expected: f64 = p
            .iter()
            .zip(q.iter())
            .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
            .sum();
        assert!((expected - 0.445846).abs() < 1e-6);
        let v = kl_categorical(&p, &q).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_in_q_is_domain_error() {
        let err = kl_categorical(&[0.5, 0.5], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn axis_out_of_range() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(softmax(&x, 2), Err(Error::Axis { .. })));
    }
}
