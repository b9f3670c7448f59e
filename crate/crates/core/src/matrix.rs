//! Dense row-major matrices and the small set of kernels the pipeline needs:
//! column-cosine matrices, linear-kernel Grams, block-diagonal rotations and
//! permutation/signature application.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatrixError {
    #[error("data length {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("row count mismatch: {left} vs {right}")]
    RowCountMismatch { left: usize, right: usize },
    #[error("dimension mismatch: {left_rows}x{left_cols} * {right_rows}x{right_cols}")]
    DimMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("block rotation needs an even row count, got {rows}")]
    OddRows { rows: usize },
    #[error("rotation carries {angles} angles but the matrix needs {needed}")]
    AngleCount { angles: usize, needed: usize },
    #[error("column map reuses {side} index {index}")]
    NotInjective { side: &'static str, index: usize },
    #[error("{got} signs for {matches} matched columns")]
    SignLength { got: usize, matches: usize },
    #[error("index {index} out of range for {axis} of size {size}")]
    IndexRange {
        axis: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Dense row-major matrix over a floating scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(MatrixError::LengthMismatch {
                    rows: r,
                    cols: c,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    /// Builds a matrix entry by entry in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scaled(&self, factor: T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * factor).collect(),
        }
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, MatrixError> {
        if self.cols != rhs.rows {
            return Err(MatrixError::DimMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let v = out.get(i, j) + a * rhs.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix<T>, MatrixError> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(MatrixError::IndexRange {
                    axis: "rows",
                    index: i,
                    size: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Gathers rows and flips the sign of each gathered row where `signs` is negative.
    pub fn select_rows_signed(
        &self,
        indices: &[usize],
        signs: &[i8],
    ) -> Result<Matrix<T>, MatrixError> {
        if signs.len() != indices.len() {
            return Err(MatrixError::SignLength {
                got: signs.len(),
                matches: indices.len(),
            });
        }
        let mut out = self.select_rows(indices)?;
        for (r, &s) in signs.iter().enumerate() {
            if s < 0 {
                for j in 0..out.cols {
                    let v = out.get(r, j);
                    out.set(r, j, -v);
                }
            }
        }
        Ok(out)
    }

    /// Index of the first non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|x| !x.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    pub fn is_finite(&self) -> bool {
        self.find_non_finite().is_none()
    }

    /// Root mean square over all entries; zero for an empty matrix.
    pub fn rms(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sumsq: T = self.data.iter().map(|&x| x * x).sum();
        (sumsq / T::from_count(self.data.len())).sqrt()
    }
}

/// Column-cosine matrix: entry (k, l) is the cosine between column k of `a`
/// and column l of `b`. Columns with zero norm contribute 0 so dead
/// dimensions never abort or win an assignment.
pub fn cosine_matrix<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, MatrixError> {
    if a.rows() != b.rows() {
        return Err(MatrixError::RowCountMismatch {
            left: a.rows(),
            right: b.rows(),
        });
    }
    let m = a.rows();
    let norms = |x: &Matrix<T>| -> Vec<T> {
        (0..x.cols())
            .map(|j| {
                let mut s = T::zero();
                for i in 0..m {
                    let v = x.get(i, j);
                    s += v * v;
                }
                s.sqrt()
            })
            .collect()
    };
    let na = norms(a);
    let nb = norms(b);
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for k in 0..a.cols() {
        for l in 0..b.cols() {
            if na[k] == T::zero() || nb[l] == T::zero() {
                continue;
            }
            let mut dot = T::zero();
            for i in 0..m {
                dot += a.get(i, k) * b.get(i, l);
            }
            out.set(k, l, dot / (na[k] * nb[l]));
        }
    }
    Ok(out)
}

/// Linear-kernel Gram matrix K = X Xᵀ. The lower triangle mirrors the upper
/// one exactly so the result is bitwise symmetric.
pub fn gram_linear<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let m = x.rows();
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut dot = T::zero();
            for c in 0..x.cols() {
                dot += x.get(i, c) * x.get(j, c);
            }
            out.set(i, j, dot);
            out.set(j, i, dot);
        }
    }
    out
}

/// Block-diagonal rotation built from d/2 planar angles: block j rotates the
/// coordinate pair (2j, 2j+1). Always orthogonal by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRotation<T> {
    angles: Vec<T>,
}

impl<T: Scalar> BlockRotation<T> {
    pub fn new(angles: Vec<T>) -> Self {
        BlockRotation { angles }
    }

    pub fn identity(half_dim: usize) -> Self {
        BlockRotation {
            angles: vec![T::zero(); half_dim],
        }
    }

    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    /// Dimension of the rotated space (twice the angle count).
    pub fn dim(&self) -> usize {
        self.angles.len() * 2
    }

    /// The rotation with every angle negated, i.e. the transpose/inverse.
    pub fn inverse(&self) -> Self {
        BlockRotation {
            angles: self.angles.iter().map(|&a| -a).collect(),
        }
    }

    /// Materializes the dense rotation matrix (tests and oracles only;
    /// application goes through `apply_block_rotation`).
    pub fn to_matrix(&self) -> Matrix<T> {
        let d = self.dim();
        let mut out = Matrix::zeros(d, d);
        for (j, &psi) in self.angles.iter().enumerate() {
            let (s, c) = psi.sin_cos();
            out.set(2 * j, 2 * j, c);
            out.set(2 * j, 2 * j + 1, -s);
            out.set(2 * j + 1, 2 * j, s);
            out.set(2 * j + 1, 2 * j + 1, c);
        }
        out
    }
}

/// Left-multiplies `w` (d x n) by the block-diagonal rotation, mixing row
/// pairs (2j, 2j+1). Column norms are preserved.
pub fn apply_block_rotation<T: Scalar>(
    w: &Matrix<T>,
    rot: &BlockRotation<T>,
) -> Result<Matrix<T>, MatrixError> {
    let d = w.rows();
    if !d.is_multiple_of(2) {
        return Err(MatrixError::OddRows { rows: d });
    }
    if rot.angles().len() != d / 2 {
        return Err(MatrixError::AngleCount {
            angles: rot.angles().len(),
            needed: d / 2,
        });
    }
    let mut out = Matrix::zeros(d, w.cols());
    for (j, &psi) in rot.angles().iter().enumerate() {
        let (s, c) = psi.sin_cos();
        let (r0, r1) = (2 * j, 2 * j + 1);
        for col in 0..w.cols() {
            let a = w.get(r0, col);
            let b = w.get(r1, col);
            out.set(r0, col, c * a - s * b);
            out.set(r1, col, s * a + c * b);
        }
    }
    Ok(out)
}

/// Scatters signed columns of `w` into a `target_cols`-wide matrix:
/// output column `target` of each `(source, target)` pair is ±(column
/// `source` of `w`). Targets not covered by the map stay zero-filled.
pub fn apply_perm_sign_columns<T: Scalar>(
    w: &Matrix<T>,
    perm: &[(usize, usize)],
    signs: &[i8],
    target_cols: usize,
) -> Result<Matrix<T>, MatrixError> {
    check_injective(perm, signs, w.cols(), target_cols)?;
    let mut out = Matrix::zeros(w.rows(), target_cols);
    for (&(src, dst), &sign) in perm.iter().zip(signs) {
        for i in 0..w.rows() {
            let v = w.get(i, src);
            out.set(i, dst, if sign < 0 { -v } else { v });
        }
    }
    Ok(out)
}

/// Row-wise twin of `apply_perm_sign_columns`: output row `target` is
/// ±(row `source` of `w`).
pub fn apply_perm_sign_rows<T: Scalar>(
    w: &Matrix<T>,
    perm: &[(usize, usize)],
    signs: &[i8],
    target_rows: usize,
) -> Result<Matrix<T>, MatrixError> {
    check_injective(perm, signs, w.rows(), target_rows)?;
    let mut out = Matrix::zeros(target_rows, w.cols());
    for (&(src, dst), &sign) in perm.iter().zip(signs) {
        for j in 0..w.cols() {
            let v = w.get(src, j);
            out.set(dst, j, if sign < 0 { -v } else { v });
        }
    }
    Ok(out)
}

fn check_injective(
    perm: &[(usize, usize)],
    signs: &[i8],
    source_size: usize,
    target_size: usize,
) -> Result<(), MatrixError> {
    if signs.len() != perm.len() {
        return Err(MatrixError::SignLength {
            got: signs.len(),
            matches: perm.len(),
        });
    }
    let mut src_seen = vec![false; source_size];
    let mut dst_seen = vec![false; target_size];
    for &(src, dst) in perm {
        if src >= source_size {
            return Err(MatrixError::IndexRange {
                axis: "source columns",
                index: src,
                size: source_size,
            });
        }
        if dst >= target_size {
            return Err(MatrixError::IndexRange {
                axis: "target columns",
                index: dst,
                size: target_size,
            });
        }
        if src_seen[src] {
            return Err(MatrixError::NotInjective { side: "source", index: src });
        }
        if dst_seen[dst] {
            return Err(MatrixError::NotInjective { side: "target", index: dst });
        }
        src_seen[src] = true;
        dst_seen[dst] = true;
    }
    Ok(())
}
