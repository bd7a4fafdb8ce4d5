//! Glue between datasets, training and the persisted model: initial-map
//! construction, the end-to-end train entry point, and prediction on a
//! (possibly different) manifest.

use serde::{Deserialize, Serialize};

use crate::context::{
    build_semantic_adjacency, load_semantic_links, GeometricContext, Similarity,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{fit_kpca, sample_landmarks, InitialMap};
use crate::linalg::Matrix;
use crate::model::{DhcnModel, Provenance, FORMAT_VERSION, MATRIX_ENCODING};
use crate::network::{forward_dataset, forward_semantic, DepthConfig, PerLayerContexts};
use crate::svm::{decide, score, SvmTrainParams};
use crate::train::{
    train, SemanticSource, TrainConfig, TrainLogRecord, TrainOptions, TrainingProblem,
};

/// Initial-map selection before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialMapChoice {
    Linear,
    HiKpca { dim: usize, landmark_count: usize },
}

/// Fit the initial map on the training cells (a no-op for linear).
pub fn build_initial_map(dataset: &Dataset, choice: InitialMapChoice, seed: u64) -> Result<InitialMap> {
    match choice {
        InitialMapChoice::Linear => Ok(InitialMap::Linear {
            feature_dim: dataset.feature_dim,
        }),
        InitialMapChoice::HiKpca {
            dim,
            landmark_count,
        } => {
            let n = dataset.grid.cell_count();
            let total = n * dataset.images.len();
            let mut cells = Matrix::zeros(total, dataset.feature_dim);
            for (p, image) in dataset.images.iter().enumerate() {
                for i in 0..n {
                    cells.row_mut(p * n + i).copy_from_slice(image.features.row(i));
                }
            }
            let landmarks = sample_landmarks(&cells, landmark_count, seed)?;
            let dim = dim.min(landmarks.rows());
            fit_kpca(landmarks, dim)
        }
    }
}

/// Apply the initial map to every image.
pub fn compute_phi0s(dataset: &Dataset, map: &InitialMap) -> Result<Vec<Matrix>> {
    dataset
        .images
        .iter()
        .map(|image| map.apply(&image.features))
        .collect()
}

/// All the knobs of a training run, as resolved from the CLI.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub depth: DepthConfig,
    pub radius: f64,
    pub semantic_k: usize,
    pub similarity: Similarity,
    pub use_links: bool,
    pub initial_map: InitialMapChoice,
    pub svm_c: f64,
    pub balance_classes: bool,
    pub svm_epochs: usize,
    pub svm_tol: f64,
    pub cfg: TrainConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            depth: DepthConfig::default(),
            radius: 1.0,
            semantic_k: 10,
            similarity: Similarity::Cosine,
            use_links: false,
            initial_map: InitialMapChoice::Linear,
            svm_c: 1.0,
            balance_classes: false,
            svm_epochs: 1000,
            svm_tol: 1e-8,
            cfg: TrainConfig::default(),
        }
    }
}

pub fn training_problem(dataset: &Dataset, map: &InitialMap) -> Result<TrainingProblem> {
    Ok(TrainingProblem {
        phi0s: compute_phi0s(dataset, map)?,
        labels: dataset.labels.clone(),
        image_ids: dataset.image_ids(),
        link_pairs: dataset.link_pairs.clone(),
    })
}

pub fn train_options(dataset: &Dataset, spec: &TrainSpec) -> Result<TrainOptions> {
    let geometric = GeometricContext::build(&dataset.grid, spec.radius)?;
    let classes = dataset.concepts.len();
    let svm = if spec.balance_classes {
        SvmTrainParams::balanced(classes, spec.svm_c, spec.svm_epochs, spec.svm_tol, &dataset.labels)
    } else {
        SvmTrainParams::uniform(classes, spec.svm_c, spec.svm_epochs, spec.svm_tol)
    };
    Ok(TrainOptions {
        depth: spec.depth,
        geometric,
        semantic_source: if spec.use_links {
            SemanticSource::Links
        } else {
            SemanticSource::Knn {
                k: spec.semantic_k,
                similarity: spec.similarity,
            }
        },
        svm,
        cfg: spec.cfg.clone(),
    })
}

/// Train on a dataset and assemble the persistable model.
pub fn train_model(
    dataset: &Dataset,
    spec: &TrainSpec,
    log: impl FnMut(&TrainLogRecord),
) -> Result<DhcnModel> {
    if dataset.images.len() < 2 {
        return Err(Error::Validation(format!(
            "training needs at least 2 images, got {}",
            dataset.images.len()
        )));
    }
    let initial_map = build_initial_map(dataset, spec.initial_map, spec.cfg.seed)?;
    let problem = training_problem(dataset, &initial_map)?;
    let opts = train_options(dataset, spec)?;
    let core = train(&problem, &opts, log)?;
    Ok(DhcnModel {
        format_version: FORMAT_VERSION,
        matrix_encoding: MATRIX_ENCODING.to_string(),
        mode: spec.cfg.mode,
        depth: core.effective_depth,
        grid: dataset.grid,
        radius: spec.radius,
        concepts: dataset.concepts.clone(),
        initial_map,
        contexts: core.contexts,
        semantic_source: core.semantic_source,
        semantic_image_ids: problem.image_ids,
        svm: core.svm,
        provenance: Provenance {
            seed: spec.cfg.seed,
            config: spec.cfg.clone(),
            svm_c: spec.svm_c,
            balance_classes: spec.balance_classes,
            svm_epochs: spec.svm_epochs,
            svm_tol: spec.svm_tol,
            final_objective: core.best_objective,
        },
    })
}

/// Per-image prediction output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub id: String,
    pub keywords: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictions {
    pub concepts: Vec<String>,
    pub images: Vec<PredictionEntry>,
}

/// Score a dataset with a trained model.
///
/// Geometric contexts are tied across images and transfer as-is. The learned
/// semantic matrices only index the training images, so they are reused only
/// when the predict set carries exactly the same ids in the same order;
/// otherwise the semantic support is rebuilt on the predict set with the
/// persisted construction settings and uniform row weights.
pub fn predict(model: &DhcnModel, dataset: &Dataset) -> Result<Predictions> {
    if dataset.grid != model.grid {
        return Err(Error::Validation(format!(
            "manifest grid {}x{} does not match the model grid {}x{}",
            dataset.grid.grid_rows,
            dataset.grid.grid_cols,
            model.grid.grid_rows,
            model.grid.grid_cols
        )));
    }
    if dataset.feature_dim != model.initial_map.input_dim() {
        return Err(Error::Validation(format!(
            "manifest feature_dim {} does not match the model's expected {}",
            dataset.feature_dim,
            model.initial_map.input_dim()
        )));
    }
    if dataset.images.is_empty() {
        return Ok(Predictions {
            concepts: model.concepts.clone(),
            images: Vec::new(),
        });
    }

    let phi0s = compute_phi0s(dataset, &model.initial_map)?;
    let same_images = dataset.image_ids() == model.semantic_image_ids;

    let final_maps = if model.depth.sem_layers == 0 || same_images {
        let stack = forward_dataset(&phi0s, &model.contexts, &model.depth)?;
        stack.final_maps().clone()
    } else {
        // geometric pass with the learned contexts, then a fresh uniform
        // semantic support over the predict set
        let geo_depth = DepthConfig {
            sem_layers: 0,
            ..model.depth
        };
        let stack = forward_dataset(&phi0s, &model.contexts, &geo_depth)?;
        let source = model.semantic_source.ok_or_else(|| {
            Error::Validation("model has semantic layers but no semantic source".to_string())
        })?;
        let (adjacency, _mask) = match source {
            SemanticSource::Knn { k, similarity } => {
                if k >= dataset.images.len() {
                    return Err(Error::Validation(format!(
                        "model's semantic k = {k} needs at least {} predict images, got {}",
                        k + 1,
                        dataset.images.len()
                    )));
                }
                build_semantic_adjacency(&stack.pooled, k, similarity)?
            }
            SemanticSource::Links => {
                load_semantic_links(&dataset.link_pairs, dataset.images.len())?
            }
        };
        let contexts = PerLayerContexts {
            geometric: Vec::new(),
            geometric_masks: Vec::new(),
            semantic: (0..model.depth.sem_layers).map(|_| adjacency.clone()).collect(),
            semantic_mask: None,
        };
        forward_semantic(&stack.pooled, &contexts, &model.depth)?
            .last()
            .unwrap()
            .clone()
    };

    let scores = score(&model.svm, &final_maps)?;
    let decisions = decide(&scores);
    let images = dataset
        .images
        .iter()
        .enumerate()
        .map(|(p, image)| PredictionEntry {
            id: image.id.clone(),
            keywords: model
                .concepts
                .iter()
                .enumerate()
                .filter(|(k, _)| decisions.get(p, *k))
                .map(|(_, name)| name.clone())
                .collect(),
            scores: (0..model.concepts.len()).map(|k| scores.get(p, k)).collect(),
        })
        .collect();
    Ok(Predictions {
        concepts: model.concepts.clone(),
        images,
    })
}

/// Pair predictions with manifest ground truth and compute the metrics.
pub fn evaluate_predictions(
    predictions: &Predictions,
    dataset: &Dataset,
) -> Result<crate::metrics::EvalReport> {
    if predictions.concepts != dataset.concepts {
        return Err(Error::Validation(format!(
            "concept lists differ: predictions carry {:?}, manifest declares {:?}",
            predictions.concepts, dataset.concepts
        )));
    }
    let k = dataset.concepts.len();
    let p = dataset.images.len();
    let mut by_id = std::collections::BTreeMap::new();
    for entry in &predictions.images {
        by_id.insert(entry.id.as_str(), entry);
    }
    if by_id.len() != predictions.images.len() {
        return Err(Error::Validation(
            "duplicate image ids in predictions".to_string(),
        ));
    }
    let mut scores = Matrix::zeros(p, k);
    let mut pred = crate::linalg::BoolMatrix::falses(p, k);
    for (row, image) in dataset.images.iter().enumerate() {
        let entry = by_id.get(image.id.as_str()).ok_or_else(|| {
            Error::Validation(format!("predictions are missing image '{}'", image.id))
        })?;
        if entry.scores.len() != k {
            return Err(Error::Validation(format!(
                "image '{}' carries {} scores, expected {}",
                image.id,
                entry.scores.len(),
                k
            )));
        }
        for col in 0..k {
            scores.set(row, col, entry.scores[col]);
        }
        for keyword in &entry.keywords {
            let col = dataset
                .concepts
                .iter()
                .position(|c| c == keyword)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "image '{}' predicts unknown concept '{}'",
                        image.id, keyword
                    ))
                })?;
            pred.set(row, col, true);
        }
    }
    crate::metrics::evaluate(&dataset.concepts, &scores, &pred, &dataset.truth)
}
