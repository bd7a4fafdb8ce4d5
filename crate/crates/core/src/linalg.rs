//! Dense row-major matrix storage and the handful of operations the rest of
//! the crate needs: products, transpose, Frobenius norm, and a Jacobi
//! symmetric eigensolver.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense f64 matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("from_vec")?;
        Ok(m)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument(
                "ragged rows in matrix construction".to_string(),
            ));
        }
        Matrix::from_vec(r, c, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.get(i, j).is_finite() {
                    return Err(Error::NonFinite {
                        context: context.to_string(),
                        row: i,
                        col: j,
                    });
                }
            }
        }
        Ok(())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for j in 0..other.cols {
                    orow[j] += aik * brow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// sqrt of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "add",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// In-place `self += factor * other`; shapes must already agree.
    pub fn add_scaled_assign(&mut self, other: &Matrix, factor: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
    }

    /// Gram matrix of the rows: `self * self'`.
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(self.row(i), self.row(j));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    /// Column-wise concatenation; all blocks must share the row count.
    pub fn hconcat(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        for b in blocks {
            if b.rows != rows {
                return Err(Error::ShapeMismatch {
                    op: "hconcat",
                    left_rows: rows,
                    left_cols: blocks[0].cols,
                    right_rows: b.rows,
                    right_cols: b.cols,
                });
            }
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let orow = out.row_mut(i);
            let mut offset = 0;
            for b in blocks {
                orow[offset..offset + b.cols].copy_from_slice(b.row(i));
                offset += b.cols;
            }
        }
        Ok(out)
    }

    /// Slice of columns `[from, to)` as a new matrix.
    pub fn columns(&self, from: usize, to: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, to - from);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[from..to]);
        }
        out
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues sorted descending and the matching eigenvector
    /// columns, so `a = V diag(l) V'`. The input is symmetrized by averaging
    /// first; asymmetry beyond 1e-9 is rejected.
    pub fn sym_eig(&self) -> Result<(Vec<f64>, Matrix)> {
        if self.rows != self.cols {
            return Err(Error::NotSquare {
                op: "sym_eig",
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let delta = (self.get(i, j) - self.get(j, i)).abs();
                if delta > 1e-9 {
                    return Err(Error::NotSymmetric {
                        op: "sym_eig",
                        i,
                        j,
                        delta,
                    });
                }
            }
        }

        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, 0.5 * (self.get(i, j) + self.get(j, i)));
            }
        }
        let mut v = Matrix::identity(n);

        let off = |m: &Matrix| -> f64 {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += m.get(i, j) * m.get(i, j);
                    }
                }
            }
            s.sqrt()
        };

        let initial_off = off(&a);
        // convergence: off-diagonal mass down to 1e-12 of the initial mass
        let threshold = 1e-12 * initial_off;
        const MAX_SWEEPS: usize = 100;

        if initial_off > 0.0 {
            for _sweep in 0..MAX_SWEEPS {
                if off(&a) <= threshold {
                    break;
                }
                for p in 0..n - 1 {
                    for q in (p + 1)..n {
                        let apq = a.get(p, q);
                        if apq == 0.0 {
                            continue;
                        }
                        let app = a.get(p, p);
                        let aqq = a.get(q, q);
                        let theta = (aqq - app) / (2.0 * apq);
                        let t = if theta >= 0.0 {
                            1.0 / (theta + (1.0 + theta * theta).sqrt())
                        } else {
                            1.0 / (theta - (1.0 + theta * theta).sqrt())
                        };
                        let c = 1.0 / (1.0 + t * t).sqrt();
                        let s = t * c;

                        // rows/cols p and q of a
                        for k in 0..n {
                            let akp = a.get(k, p);
                            let akq = a.get(k, q);
                            a.set(k, p, c * akp - s * akq);
                            a.set(k, q, s * akp + c * akq);
                        }
                        for k in 0..n {
                            let apk = a.get(p, k);
                            let aqk = a.get(q, k);
                            a.set(p, k, c * apk - s * aqk);
                            a.set(q, k, s * apk + c * aqk);
                        }
                        // accumulate eigenvectors
                        for k in 0..n {
                            let vkp = v.get(k, p);
                            let vkq = v.get(k, q);
                            v.set(k, p, c * vkp - s * vkq);
                            v.set(k, q, s * vkp + c * vkq);
                        }
                    }
                }
            }
        }

        // sort descending, stable in the original index on ties
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            a.get(j, j)
                .partial_cmp(&a.get(i, i))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
        let mut vectors = Matrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            for k in 0..n {
                vectors.set(k, dst, v.get(k, src));
            }
        }
        Ok((eigenvalues, vectors))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Sum of entrywise products; equals tr(a b') for equal shapes.
pub fn sum_entrywise_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "sum_entrywise_product",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .sum())
}

/// Boolean matrix; used for support masks, decisions and label truth tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn falses(rows: usize, cols: usize) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = BoolMatrix::falses(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn row_count_true(&self, i: usize) -> usize {
        (0..self.cols).filter(|&j| self.get(i, j)).count()
    }
}

// Matrices persist as base64 of little-endian f64 bytes so model files
// round-trip bit-exactly.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: String,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use base64::Engine;
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        MatrixRepr {
            rows: self.rows,
            cols: self.cols,
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use base64::Engine;
        let repr = MatrixRepr::deserialize(deserializer)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(repr.data.as_bytes())
            .map_err(|e| D::Error::custom(format!("bad matrix payload: {e}")))?;
        if bytes.len() != repr.rows * repr.cols * 8 {
            return Err(D::Error::custom(format!(
                "matrix payload holds {} bytes, expected {} for {}x{}",
                bytes.len(),
                repr.rows * repr.cols * 8,
                repr.rows,
                repr.cols
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(repr.rows, repr.cols, data)
            .map_err(|e| D::Error::custom(format!("invalid matrix: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct BoolMatrixRepr {
    rows: usize,
    cols: usize,
    data: String,
}

impl Serialize for BoolMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use base64::Engine;
        let bytes: Vec<u8> = self.data.iter().map(|&b| b as u8).collect();
        BoolMatrixRepr {
            rows: self.rows,
            cols: self.cols,
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoolMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use base64::Engine;
        let repr = BoolMatrixRepr::deserialize(deserializer)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(repr.data.as_bytes())
            .map_err(|e| D::Error::custom(format!("bad mask payload: {e}")))?;
        if bytes.len() != repr.rows * repr.cols {
            return Err(D::Error::custom("mask payload length mismatch"));
        }
        Ok(BoolMatrix {
            rows: repr.rows,
            cols: repr.cols,
            data: bytes.into_iter().map(|b| b != 0).collect(),
        })
    }
}
