//! HSIC estimators and centered-kernel-alignment similarities over linear
//! kernels. The unbiased variant is the metric the fingerprint pipeline
//! aggregates; the biased one exists for comparison experiments.

use thiserror::Error;

use crate::matrix::{gram_linear, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("estimator needs at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("kernel matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("kernel sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("kernel matrix is asymmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
    #[error("input row counts differ: {left} vs {right}")]
    SampleMismatch { left: usize, right: usize },
    #[error("degenerate self-similarity denominator (near-constant rows?)")]
    DegenerateDenominator,
}

/// Two Gram matrices over the same sample set, symmetry-checked on entry.
#[derive(Debug, Clone)]
pub struct KernelPair<T> {
    k1: Matrix<T>,
    k2: Matrix<T>,
}

impl<T: Scalar> KernelPair<T> {
    pub fn new(k1: Matrix<T>, k2: Matrix<T>) -> Result<Self, KernelError> {
        for k in [&k1, &k2] {
            if k.rows() != k.cols() {
                return Err(KernelError::NotSquare {
                    rows: k.rows(),
                    cols: k.cols(),
                });
            }
        }
        if k1.rows() != k2.rows() {
            return Err(KernelError::SizeMismatch {
                left: k1.rows(),
                right: k2.rows(),
            });
        }
        for k in [&k1, &k2] {
            check_symmetric(k)?;
        }
        Ok(KernelPair { k1, k2 })
    }

    pub fn size(&self) -> usize {
        self.k1.rows()
    }

    pub fn k1(&self) -> &Matrix<T> {
        &self.k1
    }

    pub fn k2(&self) -> &Matrix<T> {
        &self.k2
    }
}

fn check_symmetric<T: Scalar>(k: &Matrix<T>) -> Result<(), KernelError> {
    let mut max_abs = T::zero();
    for v in k.data() {
        max_abs = max_abs.max(v.abs());
    }
    let tol = T::from_f64_lossy(1e-10) * T::one().max(max_abs);
    for i in 0..k.rows() {
        for j in (i + 1)..k.cols() {
            if (k.get(i, j) - k.get(j, i)).abs() > tol {
                return Err(KernelError::Asymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Biased HSIC: the centered trace statistic tr(K1 H K2 H) / (m-1)^2. The
/// centering matrix is never materialized; centering is done through row,
/// column and grand means.
pub fn hsic_biased<T: Scalar>(pair: &KernelPair<T>) -> Result<T, KernelError> {
    let m = pair.size();
    if m < 2 {
        return Err(KernelError::TooFewSamples { got: m, min: 2 });
    }
    let k1 = pair.k1();
    let k2 = pair.k2();
    let mc = T::from_count(m);
    let row_means: Vec<T> = (0..m)
        .map(|i| (0..m).map(|j| k1.get(i, j)).sum::<T>() / mc)
        .collect();
    let grand_mean = row_means.iter().cloned().sum::<T>() / mc;
    // tr(K1 H K2 H) = <H K1 H, K2> with (H K1 H)_ij = K1_ij - r_i - r_j + g
    let mut acc = T::zero();
    for i in 0..m {
        for j in 0..m {
            let centered = k1.get(i, j) - row_means[i] - row_means[j] + grand_mean;
            acc += centered * k2.get(i, j);
        }
    }
    let denom = (mc - T::one()) * (mc - T::one());
    Ok(acc / denom)
}

/// Unbiased HSIC estimator on diagonal-zeroed kernels. Defined for m >= 4;
/// may be negative.
pub fn hsic_unbiased<T: Scalar>(pair: &KernelPair<T>) -> Result<T, KernelError> {
    let m = pair.size();
    if m < 4 {
        return Err(KernelError::TooFewSamples { got: m, min: 4 });
    }
    let kt1 = zero_diagonal(pair.k1());
    let kt2 = zero_diagonal(pair.k2());
    Ok(hsic_unbiased_zero_diag(&kt1, &kt2))
}

/// Core three-term formula; inputs must already have zero diagonals.
fn hsic_unbiased_zero_diag<T: Scalar>(kt1: &Matrix<T>, kt2: &Matrix<T>) -> T {
    let m = kt1.rows();
    let mc = T::from_count(m);
    let mut trace = T::zero();
    for (a, b) in kt1.data().iter().zip(kt2.data()) {
        trace += *a * *b;
    }
    let row_sums = |k: &Matrix<T>| -> Vec<T> {
        (0..m)
            .map(|i| (0..m).map(|j| k.get(i, j)).sum())
            .collect()
    };
    let s1 = row_sums(kt1);
    let s2 = row_sums(kt2);
    let total1: T = s1.iter().cloned().sum();
    let total2: T = s2.iter().cloned().sum();
    let cross: T = s1.iter().zip(&s2).map(|(&a, &b)| a * b).sum();

    let one = T::one();
    let two = T::from_f64_lossy(2.0);
    let term2 = total1 * total2 / ((mc - one) * (mc - two));
    let term3 = two * cross / (mc - two);
    (trace + term2 - term3) / (mc * (mc - T::from_f64_lossy(3.0)))
}

fn zero_diagonal<T: Scalar>(k: &Matrix<T>) -> Matrix<T> {
    let mut out = k.clone();
    for i in 0..k.rows() {
        out.set(i, i, T::zero());
    }
    out
}

/// Unbiased CKA over linear kernels: values in [-1, 1], clamped after the
/// computation so rounding never pushes magnitudes past one.
pub fn cka_unbiased<T: Scalar>(x1: &Matrix<T>, x2: &Matrix<T>) -> Result<T, KernelError> {
    if x1.rows() != x2.rows() {
        return Err(KernelError::SampleMismatch {
            left: x1.rows(),
            right: x2.rows(),
        });
    }
    let m = x1.rows();
    if m < 4 {
        return Err(KernelError::TooFewSamples { got: m, min: 4 });
    }
    let kt1 = zero_diagonal(&gram_linear(x1));
    let kt2 = zero_diagonal(&gram_linear(x2));
    let cross = hsic_unbiased_zero_diag(&kt1, &kt2);
    let self1 = hsic_unbiased_zero_diag(&kt1, &kt1);
    let self2 = hsic_unbiased_zero_diag(&kt2, &kt2);
    if self1 <= T::zero() || self2 <= T::zero() {
        return Err(KernelError::DegenerateDenominator);
    }
    let value = cross / (self1 * self2).sqrt();
    Ok(value.max(-T::one()).min(T::one()))
}

/// Biased CKA over linear kernels: values in [0, 1]; comparison use only.
pub fn cka_biased<T: Scalar>(x1: &Matrix<T>, x2: &Matrix<T>) -> Result<T, KernelError> {
    if x1.rows() != x2.rows() {
        return Err(KernelError::SampleMismatch {
            left: x1.rows(),
            right: x2.rows(),
        });
    }
    let m = x1.rows();
    if m < 2 {
        return Err(KernelError::TooFewSamples { got: m, min: 2 });
    }
    let k1 = gram_linear(x1);
    let k2 = gram_linear(x2);
    let cross = hsic_biased(&KernelPair::new(k1.clone(), k2.clone())?)?;
    let self1 = hsic_biased(&KernelPair::new(k1.clone(), k1)?)?;
    let self2 = hsic_biased(&KernelPair::new(k2.clone(), k2)?)?;
    let denom = (self1 * self2).sqrt();
    if denom <= T::zero() {
        return Err(KernelError::DegenerateDenominator);
    }
    Ok((cross / denom).max(T::zero()).min(T::one()))
}
