//! One-vs-rest linear hinge-loss head over the final image maps. Each binary
//! problem is solved by dual coordinate descent on the 1-augmented features;
//! the last weight coordinate multiplies the constant augmentation and acts
//! as a bias (kept out of the reported regularizer).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, BoolMatrix, Matrix};

/// P x K label table with entries in {-1, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    images: usize,
    classes: usize,
    signs: Vec<i8>,
}

impl LabelMatrix {
    pub fn from_bool(truth: &BoolMatrix) -> Self {
        LabelMatrix {
            images: truth.rows(),
            classes: truth.cols(),
            signs: (0..truth.rows())
                .flat_map(|p| (0..truth.cols()).map(move |k| (p, k)))
                .map(|(p, k)| if truth.get(p, k) { 1 } else { -1 })
                .collect(),
        }
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn sign(&self, image: usize, class: usize) -> f64 {
        self.signs[image * self.classes + class] as f64
    }

    pub fn positives(&self, class: usize) -> usize {
        (0..self.images).filter(|&p| self.sign(p, class) > 0.0).count()
    }
}

/// Per-class penalties and solver knobs for the hinge trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmTrainParams {
    /// Per-class regularization trade-off C_k.
    pub c: Vec<f64>,
    /// Per-class multiplier on the penalty of positive examples (1 = none).
    pub pos_weight: Vec<f64>,
    /// Maximum full passes over the dual variables.
    pub epochs: usize,
    /// Stop when the largest dual-variable change in a pass drops below this.
    pub tol: f64,
}

impl SvmTrainParams {
    pub fn uniform(classes: usize, c: f64, epochs: usize, tol: f64) -> Self {
        SvmTrainParams {
            c: vec![c; classes],
            pos_weight: vec![1.0; classes],
            epochs,
            tol,
        }
    }

    /// Scale the positive-example penalty of each class by #neg/#pos.
    pub fn balanced(classes: usize, c: f64, epochs: usize, tol: f64, labels: &LabelMatrix) -> Self {
        let mut params = Self::uniform(classes, c, epochs, tol);
        for k in 0..classes {
            let pos = labels.positives(k);
            let neg = labels.images() - pos;
            if pos > 0 && neg > 0 {
                params.pos_weight[k] = neg as f64 / pos as f64;
            }
        }
        params
    }
}

/// Trained one-vs-rest head. Each weight vector has length map width + 1;
/// the trailing coordinate is the bias on the constant-1 augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<Vec<f64>>,
    pub c_k: Vec<f64>,
    pub c_pos: Vec<f64>,
}

impl SvmModel {
    pub fn zero(classes: usize, map_width: usize, c_k: Vec<f64>, c_pos: Vec<f64>) -> Self {
        SvmModel {
            weights: vec![vec![0.0; map_width + 1]; classes],
            c_k,
            c_pos,
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    pub fn map_width(&self) -> usize {
        self.weights.first().map_or(0, |w| w.len() - 1)
    }

    /// Effective hinge penalty for one example of one class.
    #[inline]
    pub fn effective_c(&self, class: usize, label_sign: f64) -> f64 {
        if label_sign > 0.0 {
            self.c_k[class] * self.c_pos[class]
        } else {
            self.c_k[class]
        }
    }

    #[inline]
    fn raw_score(&self, class: usize, map_row: &[f64]) -> f64 {
        let w = &self.weights[class];
        dot(&w[..map_row.len()], map_row) + w[map_row.len()]
    }
}

fn check_width(model: &SvmModel, maps: &Matrix, op: &'static str) -> Result<()> {
    if maps.cols() != model.map_width() {
        return Err(Error::ShapeMismatch {
            op,
            left_rows: model.classes(),
            left_cols: model.map_width(),
            right_rows: maps.rows(),
            right_cols: maps.cols(),
        });
    }
    Ok(())
}

/// Objective value: per class, half the squared weight norm (bias excluded)
/// plus the class- and sign-weighted hinge total over images.
pub fn hinge_objective(model: &SvmModel, maps: &Matrix, labels: &LabelMatrix) -> Result<f64> {
    check_width(model, maps, "hinge_objective")?;
    if labels.images() != maps.rows() || labels.classes() != model.classes() {
        return Err(Error::Validation(format!(
            "labels are {}x{} but maps hold {} images and the model {} classes",
            labels.images(),
            labels.classes(),
            maps.rows(),
            model.classes()
        )));
    }
    let mut total = 0.0;
    for k in 0..model.classes() {
        let w = &model.weights[k];
        let d = model.map_width();
        total += 0.5 * dot(&w[..d], &w[..d]);
        for p in 0..maps.rows() {
            let y = labels.sign(p, k);
            let margin = 1.0 - y * model.raw_score(k, maps.row(p));
            if margin > 0.0 {
                total += model.effective_c(k, y) * margin;
            }
        }
    }
    Ok(total)
}

/// Raw scores w_k' [map; 1] for every image and class.
pub fn score(model: &SvmModel, maps: &Matrix) -> Result<Matrix> {
    check_width(model, maps, "score")?;
    let mut out = Matrix::zeros(maps.rows(), model.classes());
    for p in 0..maps.rows() {
        for k in 0..model.classes() {
            out.set(p, k, model.raw_score(k, maps.row(p)));
        }
    }
    Ok(out)
}

/// A keyword is assigned exactly when its score is strictly positive.
pub fn decide(scores: &Matrix) -> BoolMatrix {
    BoolMatrix::from_fn(scores.rows(), scores.cols(), |p, k| scores.get(p, k) > 0.0)
}

/// One binary fit with its convergence trace.
#[derive(Debug, Clone)]
pub struct BinarySvmFit {
    /// Augmented weight vector (bias last).
    pub weights: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Dual objective after each full pass.
    pub dual_per_pass: Vec<f64>,
    pub passes: usize,
}

impl BinarySvmFit {
    /// Solver primal: half squared norm of the full augmented vector plus the
    /// weighted hinge total.
    pub fn primal_objective(&self, maps: &Matrix, y: &[f64], cost: &[f64]) -> f64 {
        let d = maps.cols();
        let mut value = 0.5 * dot(&self.weights, &self.weights);
        for p in 0..maps.rows() {
            let s = dot(&self.weights[..d], maps.row(p)) + self.weights[d];
            let margin = 1.0 - y[p] * s;
            if margin > 0.0 {
                value += cost[p] * margin;
            }
        }
        value
    }

    pub fn dual_objective(&self) -> f64 {
        self.alphas.iter().sum::<f64>() - 0.5 * dot(&self.weights, &self.weights)
    }
}

/// Dual coordinate descent for one binary problem over 1-augmented rows.
/// `cost[p]` is the per-example box bound. Coordinates are visited in a fixed
/// cyclic order so runs are reproducible.
pub fn train_binary(
    maps: &Matrix,
    y: &[f64],
    cost: &[f64],
    epochs: usize,
    tol: f64,
) -> Result<BinarySvmFit> {
    let rows = maps.rows();
    let d = maps.cols();
    maps.check_finite("train_binary features")?;
    let mut weights = vec![0.0; d + 1];
    let mut alphas = vec![0.0; rows];
    // Q_pp = ||x_p||^2 + 1 for the augmented rows, never zero
    let q_diag: Vec<f64> = (0..rows)
        .map(|p| dot(maps.row(p), maps.row(p)) + 1.0)
        .collect();

    let mut dual_per_pass = Vec::new();
    let mut passes = 0;
    for _ in 0..epochs {
        let mut max_change = 0.0_f64;
        for p in 0..rows {
            let row = maps.row(p);
            let s = dot(&weights[..d], row) + weights[d];
            let gradient = y[p] * s - 1.0;
            let old = alphas[p];
            let candidate = (old - gradient / q_diag[p]).clamp(0.0, cost[p]);
            let delta = candidate - old;
            if delta != 0.0 {
                alphas[p] = candidate;
                let step = delta * y[p];
                for (w, x) in weights[..d].iter_mut().zip(row) {
                    *w += step * x;
                }
                weights[d] += step;
            }
            max_change = max_change.max(delta.abs());
        }
        passes += 1;
        let fit_view = BinarySvmFit {
            weights: weights.clone(),
            alphas: alphas.clone(),
            dual_per_pass: Vec::new(),
            passes,
        };
        dual_per_pass.push(fit_view.dual_objective());
        if max_change < tol {
            break;
        }
    }
    Ok(BinarySvmFit {
        weights,
        alphas,
        dual_per_pass,
        passes,
    })
}

/// Train the K independent binary heads.
pub fn train_svms(maps: &Matrix, labels: &LabelMatrix, params: &SvmTrainParams) -> Result<SvmModel> {
    if maps.rows() < 2 {
        return Err(Error::Validation(format!(
            "training needs at least 2 images, got {}",
            maps.rows()
        )));
    }
    if labels.images() != maps.rows() {
        return Err(Error::Validation(format!(
            "labels cover {} images but maps hold {}",
            labels.images(),
            maps.rows()
        )));
    }
    let classes = labels.classes();
    if params.c.len() != classes || params.pos_weight.len() != classes {
        return Err(Error::InvalidArgument(format!(
            "expected {classes} per-class penalties, got {} / {}",
            params.c.len(),
            params.pos_weight.len()
        )));
    }
    let mut model = SvmModel::zero(classes, maps.cols(), params.c.clone(), params.pos_weight.clone());
    for k in 0..classes {
        let y: Vec<f64> = (0..maps.rows()).map(|p| labels.sign(p, k)).collect();
        let cost: Vec<f64> = y
            .iter()
            .map(|&sign| model.effective_c(k, sign))
            .collect();
        let fit = train_binary(maps, &y, &cost, params.epochs, params.tol)?;
        model.weights[k] = fit.weights;
    }
    Ok(model)
}
