//! The unfolded context network: geometric context layers over grid cells,
//! sum pooling into per-image maps, semantic context layers over images, and
//! the Gram-matrix recursions that serve as brute-force oracles for the maps.
//!
//! Each geometric layer concatenates the initial map with one propagated
//! block per direction, so the layer Gram satisfies
//! `K(t+1) = S + gamma1 * sum_c P_c K(t) P_c'`; the semantic level is the
//! single-context analogue over pooled image maps.

use serde::{Deserialize, Serialize};

use crate::context::{GeometricContext, SemanticContext};
use crate::error::{Error, Result};
use crate::linalg::{sum_entrywise_product, BoolMatrix, Matrix};

/// Layer counts and context strengths of the unfolded network.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthConfig {
    pub geo_layers: usize,
    pub sem_layers: usize,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            geo_layers: 2,
            sem_layers: 2,
            gamma1: 1.0,
            gamma2: 1.0,
        }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gamma parameters must be nonnegative, got {} and {}",
                self.gamma1, self.gamma2
            )));
        }
        Ok(())
    }
}

/// Per-layer (untied) context matrices with their shared frozen supports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerLayerContexts {
    /// `geometric[t][c]` is the n x n direction-c matrix of layer t.
    pub geometric: Vec<Vec<Matrix>>,
    /// One support mask per direction, shared by every layer.
    pub geometric_masks: Vec<BoolMatrix>,
    /// `semantic[t]` is the P x P image adjacency of layer t.
    pub semantic: Vec<Matrix>,
    pub semantic_mask: Option<BoolMatrix>,
}

impl PerLayerContexts {
    /// Replicate the initial contexts across layers.
    pub fn from_initial(
        geometric: &GeometricContext,
        semantic: Option<&SemanticContext>,
        depth: &DepthConfig,
    ) -> Self {
        PerLayerContexts {
            geometric: (0..depth.geo_layers)
                .map(|_| geometric.directions.clone())
                .collect(),
            geometric_masks: geometric.support_masks.clone(),
            semantic: semantic
                .map(|s| (0..depth.sem_layers).map(|_| s.adjacency.clone()).collect())
                .unwrap_or_default(),
            semantic_mask: semantic.map(|s| s.support_mask.clone()),
        }
    }

    pub fn direction_count(&self) -> usize {
        self.geometric.first().map_or(0, |layer| layer.len())
    }

    fn geo_layer(&self, t: usize) -> Result<&[Matrix]> {
        self.geometric.get(t).map(|v| v.as_slice()).ok_or_else(|| {
            Error::InvalidArgument(format!("missing geometric context matrices for layer {t}"))
        })
    }

    fn sem_layer(&self, t: usize) -> Result<&Matrix> {
        self.semantic.get(t).ok_or_else(|| {
            Error::InvalidArgument(format!("missing semantic context matrix for layer {t}"))
        })
    }
}

/// Run the geometric layers on one image's initial map. Returns every layer
/// activation, layer 0 first.
pub fn forward_geometric(
    phi0: &Matrix,
    contexts: &PerLayerContexts,
    cfg: &DepthConfig,
) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let n = phi0.rows();
    let root_gamma = cfg.gamma1.sqrt();
    let mut layers = Vec::with_capacity(cfg.geo_layers + 1);
    layers.push(phi0.clone());
    for t in 0..cfg.geo_layers {
        let directions = contexts.geo_layer(t)?;
        let current = layers.last().unwrap();
        let mut blocks: Vec<Matrix> = Vec::with_capacity(directions.len() + 1);
        blocks.push(phi0.clone());
        for (c, p) in directions.iter().enumerate() {
            if p.rows() != n || p.cols() != n {
                return Err(Error::Validation(format!(
                    "geometric layer {t}, direction {c}: context is {}x{}, expected {n}x{n}",
                    p.rows(),
                    p.cols()
                )));
            }
            blocks.push(p.matmul(current)?.scale(root_gamma));
        }
        let refs: Vec<&Matrix> = blocks.iter().collect();
        layers.push(Matrix::hconcat(&refs)?);
    }
    Ok(layers)
}

/// Sum the cell rows of the last geometric activation into the image map.
pub fn pool(activations_last: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; activations_last.cols()];
    for i in 0..activations_last.rows() {
        for (acc, v) in out.iter_mut().zip(activations_last.row(i)) {
            *acc += v;
        }
    }
    out
}

/// Run the semantic layers on the pooled image maps. Returns every layer
/// activation, layer 0 (the pooled maps) first.
pub fn forward_semantic(
    pooled: &Matrix,
    contexts: &PerLayerContexts,
    cfg: &DepthConfig,
) -> Result<Vec<Matrix>> {
    cfg.validate()?;
    let p = pooled.rows();
    let root_gamma = cfg.gamma2.sqrt();
    let mut layers = Vec::with_capacity(cfg.sem_layers + 1);
    layers.push(pooled.clone());
    for t in 0..cfg.sem_layers {
        let adjacency = contexts.sem_layer(t)?;
        if adjacency.rows() != p || adjacency.cols() != p {
            return Err(Error::Validation(format!(
                "semantic layer {t}: context is {}x{}, expected {p}x{p}",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        let current = layers.last().unwrap();
        let block = adjacency.matmul(current)?.scale(root_gamma);
        layers.push(Matrix::hconcat(&[pooled, &block])?);
    }
    Ok(layers)
}

fn check_symmetry(s: &Matrix, op: &'static str) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::NotSquare {
            op,
            rows: s.rows(),
            cols: s.cols(),
        });
    }
    for i in 0..s.rows() {
        for j in (i + 1)..s.cols() {
            let delta = (s.get(i, j) - s.get(j, i)).abs();
            if delta > 1e-9 {
                return Err(Error::NotSymmetric { op, i, j, delta });
            }
        }
    }
    Ok(())
}

/// Brute-force Gram oracle for the geometric layers: iterate
/// `K(t+1) = S + gamma1 * sum_c P_c(t) K(t) P_c(t)'` from `K(0) = S`.
pub fn fixed_point_kernel_geo(
    s: &Matrix,
    contexts: &PerLayerContexts,
    cfg: &DepthConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    check_symmetry(s, "fixed_point_kernel_geo")?;
    let mut k = s.clone();
    for t in 0..cfg.geo_layers {
        let mut next = s.clone();
        for p in contexts.geo_layer(t)? {
            let term = p.matmul(&k)?.matmul(&p.transpose())?;
            next.add_scaled_assign(&term, cfg.gamma1);
        }
        k = next;
    }
    Ok(k)
}

/// Semantic analogue of the geometric Gram oracle:
/// `K(t+1) = S~ + gamma2 * P_I(t) K(t) P_I(t)'`.
pub fn fixed_point_kernel_sem(
    s_tilde: &Matrix,
    contexts: &PerLayerContexts,
    cfg: &DepthConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    check_symmetry(s_tilde, "fixed_point_kernel_sem")?;
    let mut k = s_tilde.clone();
    for t in 0..cfg.sem_layers {
        let p = contexts.sem_layer(t)?;
        let term = p.matmul(&k)?.matmul(&p.transpose())?;
        let mut next = s_tilde.clone();
        next.add_scaled_assign(&term, cfg.gamma2);
        k = next;
    }
    Ok(k)
}

/// Diagnostic value of the cell-level kernel objective:
/// `tr(-K S') - alpha1 * sum_c tr(K P_c K' P_c') + (beta1/2) ||K||^2`.
pub fn objective_geo(
    k: &Matrix,
    s: &Matrix,
    directions: &[Matrix],
    alpha1: f64,
    beta1: f64,
) -> Result<f64> {
    let fidelity = -sum_entrywise_product(k, s)?;
    let mut context_term = 0.0;
    for p in directions {
        let kpk = k.matmul(p)?.matmul(&k.transpose())?;
        context_term += sum_entrywise_product(&kpk, p)?;
    }
    let norm = k.frobenius_norm();
    Ok(fidelity - alpha1 * context_term + 0.5 * beta1 * norm * norm)
}

/// Diagnostic value of the image-level kernel objective.
pub fn objective_sem(
    k: &Matrix,
    s_tilde: &Matrix,
    p_i: &Matrix,
    alpha2: f64,
    beta2: f64,
) -> Result<f64> {
    let fidelity = -sum_entrywise_product(k, s_tilde)?;
    let kpk = k.matmul(p_i)?.matmul(&k.transpose())?;
    let context_term = sum_entrywise_product(&kpk, p_i)?;
    let norm = k.frobenius_norm();
    Ok(fidelity - alpha2 * context_term + 0.5 * beta2 * norm * norm)
}

/// Cached activations of one full forward pass over a dataset.
#[derive(Debug, Clone)]
pub struct LayerStack {
    /// `geo[p][t]`: activation of image p at geometric layer t.
    pub geo: Vec<Vec<Matrix>>,
    /// Pooled maps, one row per image.
    pub pooled: Matrix,
    /// `sem[t]`: semantic activation of layer t (layer 0 = pooled).
    pub sem: Vec<Matrix>,
}

impl LayerStack {
    /// The final per-image maps fed to the classifier head.
    pub fn final_maps(&self) -> &Matrix {
        self.sem.last().unwrap_or(&self.pooled)
    }
}

/// Forward every image through the geometric level, pool, then run the
/// semantic level over the whole dataset.
pub fn forward_dataset(
    phi0s: &[Matrix],
    contexts: &PerLayerContexts,
    cfg: &DepthConfig,
) -> Result<LayerStack> {
    let mut geo = Vec::with_capacity(phi0s.len());
    for (index, phi0) in phi0s.iter().enumerate() {
        let layers = forward_geometric(phi0, contexts, cfg).map_err(|e| {
            Error::Validation(format!("geometric forward failed for image {index}: {e}"))
        })?;
        geo.push(layers);
    }
    let pool_width = geo.first().map_or(0, |layers| layers.last().unwrap().cols());
    let mut pooled = Matrix::zeros(phi0s.len(), pool_width);
    for (p, layers) in geo.iter().enumerate() {
        let v = pool(layers.last().unwrap());
        pooled.row_mut(p).copy_from_slice(&v);
    }
    let sem = forward_semantic(&pooled, contexts, cfg)?;
    Ok(LayerStack { geo, pooled, sem })
}

/// Geometric layer widths implied by the recurrence `d(t+1) = d0 + C * d(t)`.
pub fn geometric_widths(d0: usize, directions: usize, layers: usize) -> Vec<usize> {
    let mut widths = vec![d0];
    for _ in 0..layers {
        widths.push(d0 + directions * widths.last().unwrap());
    }
    widths
}
