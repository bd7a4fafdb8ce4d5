//! Initial explicit maps for grid cells: the identity map for the linear
//! kernel and a landmark KPCA approximation for histogram intersection.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Eigenvalues below this floor are dropped when building the KPCA
/// projection; 1/sqrt of a near-zero spectrum is not usable.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

/// Histogram intersection kernel: sum of coordinate-wise minima.
pub fn hi_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "hi_kernel length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    for v in x.iter().chain(y.iter()) {
        if *v < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "hi_kernel requires nonnegative entries, found {v}"
            )));
        }
    }
    Ok(x.iter().zip(y.iter()).map(|(a, b)| a.min(*b)).sum())
}

/// Histogram intersection Gram between the rows of `a` and the rows of `b`.
pub fn hi_gram(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "hi_gram",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, hi_kernel(a.row(i), b.row(j))?);
        }
    }
    Ok(out)
}

/// Definition of the initial cell map, persisted inside the model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialMap {
    /// Exact map of the linear kernel: the features themselves.
    Linear { feature_dim: usize },
    /// Landmark KPCA of the histogram intersection kernel.
    HiKpca {
        landmarks: Matrix,
        projection: Matrix,
        eigenvalue_floor: f64,
    },
}

impl InitialMap {
    /// Width of the produced map rows.
    pub fn output_dim(&self) -> usize {
        match self {
            InitialMap::Linear { feature_dim } => *feature_dim,
            InitialMap::HiKpca { projection, .. } => projection.cols(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            InitialMap::Linear { feature_dim } => *feature_dim,
            InitialMap::HiKpca { landmarks, .. } => landmarks.cols(),
        }
    }

    /// Map the per-cell feature rows of one image.
    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        match self {
            InitialMap::Linear { feature_dim } => {
                if features.cols() != *feature_dim {
                    return Err(Error::Validation(format!(
                        "feature width {} does not match the map's expected {}",
                        features.cols(),
                        feature_dim
                    )));
                }
                Ok(initial_map_linear(features))
            }
            InitialMap::HiKpca {
                landmarks,
                projection,
                ..
            } => {
                if features.cols() != landmarks.cols() {
                    return Err(Error::Validation(format!(
                        "feature width {} does not match landmark width {}",
                        features.cols(),
                        landmarks.cols()
                    )));
                }
                // row for cell x = projection' k(x, landmarks)
                hi_gram(features, landmarks)?.matmul(projection)
            }
        }
    }
}

/// Explicit map of the linear kernel: the features unchanged.
pub fn initial_map_linear(features: &Matrix) -> Matrix {
    features.clone()
}

/// Fit the landmark KPCA projection. Keeps the top `dim` eigenpairs of the
/// landmark HI Gram whose eigenvalues clear the floor (shrinking `dim` when
/// the spectrum is shorter); projection column i is v_i / sqrt(lambda_i).
pub fn fit_kpca(landmarks: Matrix, dim: usize) -> Result<InitialMap> {
    let m = landmarks.rows();
    if dim == 0 || dim > m {
        return Err(Error::InvalidArgument(format!(
            "kpca dim {dim} must be in 1..={m} (landmark count)"
        )));
    }
    let gram = hi_gram(&landmarks, &landmarks)?;
    let (eigenvalues, vectors) = gram.sym_eig()?;
    let kept: Vec<usize> = (0..dim.min(eigenvalues.len()))
        .filter(|&i| eigenvalues[i] >= EIGENVALUE_FLOOR)
        .collect();
    if kept.is_empty() {
        return Err(Error::Numeric(
            "degenerate kernel: every landmark eigenvalue is below the floor".to_string(),
        ));
    }
    let mut projection = Matrix::zeros(m, kept.len());
    for (col, &i) in kept.iter().enumerate() {
        let scale = 1.0 / eigenvalues[i].sqrt();
        for row in 0..m {
            projection.set(row, col, vectors.get(row, i) * scale);
        }
    }
    Ok(InitialMap::HiKpca {
        landmarks,
        projection,
        eigenvalue_floor: EIGENVALUE_FLOOR,
    })
}

/// Uniform seeded sample (without replacement) of `count` rows from the pool
/// of all training cells; the selected indices are kept in ascending order.
pub fn sample_landmarks(cells: &Matrix, count: usize, seed: u64) -> Result<Matrix> {
    let total = cells.rows();
    if total == 0 {
        return Err(Error::Validation("no cells to sample landmarks from".to_string()));
    }
    let m = count.min(total);
    let mut indices: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..m {
        let j = i + rng.random_range(0..total - i);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..m].to_vec();
    chosen.sort_unstable();
    let mut out = Matrix::zeros(m, cells.cols());
    for (row, &idx) in chosen.iter().enumerate() {
        out.row_mut(row).copy_from_slice(cells.row(idx));
    }
    Ok(out)
}
