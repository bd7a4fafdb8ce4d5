//! Neighborhood systems: per-direction geometric cell adjacencies over the
//! image grid and the image-level semantic adjacency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, BoolMatrix, Matrix};

/// Regular grid layout shared by every image in a dataset; cells are indexed
/// row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl GridSpec {
    pub fn new(grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if grid_rows < 1 || grid_cols < 1 {
            return Err(Error::Validation(format!(
                "grid must be at least 1x1, got {grid_rows}x{grid_cols}"
            )));
        }
        Ok(GridSpec {
            grid_rows,
            grid_cols,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn cell_position(&self, index: usize) -> (usize, usize) {
        (index / self.grid_cols, index % self.grid_cols)
    }
}

/// The four directional neighbor types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Top,
    Bottom,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Top,
        Direction::Bottom,
        Direction::Left,
        Direction::Right,
    ];

    pub fn parse(name: &str) -> Result<Direction> {
        match name {
            "top" => Ok(Direction::Top),
            "bottom" => Ok(Direction::Bottom),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(Error::InvalidArgument(format!(
                "unknown direction '{other}' (expected top, bottom, left or right)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Direction::Top => "top",
            Direction::Bottom => "bottom",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

/// Sector test for the offset (drow, dcol) of cell j relative to cell i.
/// Horizontal wins the |dcol| == |drow| tie so the four sectors partition the
/// punctured disk.
fn in_sector(drow: i64, dcol: i64, direction: Direction) -> bool {
    let horizontal = dcol.abs() >= drow.abs() && dcol != 0;
    match direction {
        Direction::Right => horizontal && dcol > 0,
        Direction::Left => horizontal && dcol < 0,
        Direction::Bottom => !horizontal && drow > 0,
        Direction::Top => !horizontal && drow < 0,
    }
}

/// 0/1 support of the directional neighborhood: cell j is a neighbor of cell
/// i when their center distance (in cell units) is at most `radius`, j != i,
/// and j lies in the requested sector of i.
pub fn build_geometric_adjacency(
    grid: &GridSpec,
    radius: f64,
    direction: Direction,
) -> Result<Matrix> {
    if radius < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "geometric radius must be >= 1, got {radius}"
        )));
    }
    let n = grid.cell_count();
    let r_sq = radius * radius;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let (ri, ci) = grid.cell_position(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let (rj, cj) = grid.cell_position(j);
            let drow = rj as i64 - ri as i64;
            let dcol = cj as i64 - ci as i64;
            let dist_sq = (drow * drow + dcol * dcol) as f64;
            if dist_sq <= r_sq && in_sector(drow, dcol, direction) {
                out.set(i, j, 1.0);
            }
        }
    }
    Ok(out)
}

/// The C = 4 per-direction cell adjacencies with their frozen supports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometricContext {
    pub directions: Vec<Matrix>,
    pub radius: f64,
    pub support_masks: Vec<BoolMatrix>,
}

impl GeometricContext {
    /// Build all four directions (top, bottom, left, right order) with
    /// uniform row-stochastic initial weights.
    pub fn build(grid: &GridSpec, radius: f64) -> Result<Self> {
        let mut directions = Vec::with_capacity(4);
        let mut support_masks = Vec::with_capacity(4);
        for dir in Direction::ALL {
            let support = build_geometric_adjacency(grid, radius, dir)?;
            let mask = BoolMatrix::from_fn(support.rows(), support.cols(), |i, j| {
                support.get(i, j) != 0.0
            });
            directions.push(row_normalize(&support)?);
            support_masks.push(mask);
        }
        Ok(GeometricContext {
            directions,
            radius,
            support_masks,
        })
    }
}

/// Image-level adjacency with frozen support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticContext {
    pub adjacency: Matrix,
    pub support_mask: BoolMatrix,
    pub k_neighbors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Dot,
}

impl Similarity {
    pub fn parse(name: &str) -> Result<Similarity> {
        match name {
            "cosine" => Ok(Similarity::Cosine),
            "dot" => Ok(Similarity::Dot),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity '{other}' (expected cosine or dot)"
            ))),
        }
    }
}

/// kNN semantic support over pooled image maps. Row i keeps the k most
/// similar other images (ties to the lower index) with uniform 1/k weights.
/// Rows with zero norm fall back to dot similarity under the cosine setting.
pub fn build_semantic_adjacency(
    pooled: &Matrix,
    k: usize,
    similarity: Similarity,
) -> Result<(Matrix, BoolMatrix)> {
    let p = pooled.rows();
    if k < 1 {
        return Err(Error::InvalidArgument(
            "semantic k must be at least 1".to_string(),
        ));
    }
    if k >= p {
        return Err(Error::InvalidArgument(format!(
            "semantic k = {k} must be smaller than the image count {p}"
        )));
    }
    let norms: Vec<f64> = (0..p).map(|i| dot(pooled.row(i), pooled.row(i)).sqrt()).collect();
    let mut adjacency = Matrix::zeros(p, p);
    let mut mask = BoolMatrix::falses(p, p);
    for i in 0..p {
        let mut candidates: Vec<(usize, f64)> = (0..p)
            .filter(|&j| j != i)
            .map(|j| {
                let d = dot(pooled.row(i), pooled.row(j));
                let sim = match similarity {
                    Similarity::Dot => d,
                    Similarity::Cosine => {
                        if norms[i] > 0.0 && norms[j] > 0.0 {
                            d / (norms[i] * norms[j])
                        } else {
                            d
                        }
                    }
                };
                (j, sim)
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let weight = 1.0 / k as f64;
        for &(j, _) in candidates.iter().take(k) {
            adjacency.set(i, j, weight);
            mask.set(i, j, true);
        }
    }
    Ok((adjacency, mask))
}

/// Semantic support from explicit directed link pairs (already resolved to
/// image indices). Duplicates are deduplicated and self links dropped;
/// weights are uniform per row.
pub fn load_semantic_links(pairs: &[(usize, usize)], p: usize) -> Result<(Matrix, BoolMatrix)> {
    let mut mask = BoolMatrix::falses(p, p);
    for &(from, to) in pairs {
        if from >= p || to >= p {
            return Err(Error::Validation(format!(
                "semantic link ({from}, {to}) is out of range for {p} images"
            )));
        }
        if from == to {
            continue;
        }
        mask.set(from, to, true);
    }
    let mut adjacency = Matrix::zeros(p, p);
    for i in 0..p {
        let degree = mask.row_count_true(i);
        if degree == 0 {
            continue;
        }
        let weight = 1.0 / degree as f64;
        for j in 0..p {
            if mask.get(i, j) {
                adjacency.set(i, j, weight);
            }
        }
    }
    Ok((adjacency, mask))
}

/// Divide each nonzero row by its sum; zero rows pass through unchanged.
/// Rejects negative entries (normalization of signed matrices is undefined).
pub fn row_normalize(a: &Matrix) -> Result<Matrix> {
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if a.get(i, j) < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "row_normalize requires nonnegative entries, found {} at ({i}, {j})",
                    a.get(i, j)
                )));
            }
        }
    }
    let mut out = a.clone();
    for i in 0..out.rows() {
        let sum: f64 = out.row(i).iter().sum();
        if sum > 0.0 {
            for v in out.row_mut(i) {
                *v /= sum;
            }
        }
    }
    Ok(out)
}
