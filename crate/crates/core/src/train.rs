//! End-to-end alternating optimization: fit the hinge head at fixed contexts,
//! then backpropagate the supervised loss through the semantic layers, the
//! pooling step and the geometric layers to update every context matrix by
//! gradient descent on its frozen support.

use serde::{Deserialize, Serialize};

use crate::context::{
    build_semantic_adjacency, load_semantic_links, GeometricContext, SemanticContext, Similarity,
};
use crate::error::{Error, Result};
use crate::linalg::{BoolMatrix, Matrix};
use crate::network::{forward_dataset, DepthConfig, LayerStack, PerLayerContexts};
use crate::svm::{hinge_objective, train_svms, LabelMatrix, SvmModel, SvmTrainParams};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Ablation ladder of training modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Context-free: no context layers at all.
    Cf,
    /// Geometric layers present but frozen at initialization.
    Dfcn,
    /// Geometric layers learned, no semantic level.
    Dlcn,
    /// Both geometric and semantic contexts learned.
    Dhcn,
}

impl TrainMode {
    pub fn parse(name: &str) -> Result<TrainMode> {
        match name {
            "cf" => Ok(TrainMode::Cf),
            "dfcn" => Ok(TrainMode::Dfcn),
            "dlcn" => Ok(TrainMode::Dlcn),
            "dhcn" => Ok(TrainMode::Dhcn),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode '{other}' (expected cf, dfcn, dlcn or dhcn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Cf => "cf",
            TrainMode::Dfcn => "dfcn",
            TrainMode::Dlcn => "dlcn",
            TrainMode::Dhcn => "dhcn",
        }
    }

    pub fn learns_geometric(&self) -> bool {
        matches!(self, TrainMode::Dlcn | TrainMode::Dhcn)
    }

    pub fn learns_semantic(&self) -> bool {
        matches!(self, TrainMode::Dhcn)
    }

    pub fn has_semantic_level(&self) -> bool {
        matches!(self, TrainMode::Dhcn)
    }

    /// The layer counts the mode actually runs with.
    pub fn effective_depth(&self, requested: &DepthConfig) -> DepthConfig {
        DepthConfig {
            geo_layers: if matches!(self, TrainMode::Cf) {
                0
            } else {
                requested.geo_layers
            },
            sem_layers: if self.has_semantic_level() {
                requested.sem_layers
            } else {
                0
            },
            ..*requested
        }
    }
}

/// Knobs of the alternating optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub outer_iters: usize,
    pub context_lr: f64,
    pub context_steps_per_outer: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mode: TrainMode,
    pub renormalize_rows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_iters: 100,
            context_lr: 0.01,
            context_steps_per_outer: 1,
            grad_clip: None,
            seed: 0,
            mode: TrainMode::Dhcn,
            renormalize_rows: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters < 1 {
            return Err(Error::InvalidArgument(
                "outer_iters must be at least 1".to_string(),
            ));
        }
        if self.context_lr <= 0.0 {
            return Err(Error::InvalidArgument(
                "context learning rate must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Support-masked gradients of the loss with respect to every context matrix.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// `geometric[t][c]`, masked to the direction-c support.
    pub geometric: Vec<Vec<Matrix>>,
    /// `semantic[t]`, masked to the semantic support.
    pub semantic: Vec<Matrix>,
    /// Loss value at which the gradients were taken.
    pub loss: f64,
}

impl GradientBundle {
    pub fn global_norm(&self) -> f64 {
        let mut total = 0.0;
        for layer in &self.geometric {
            for g in layer {
                total += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        for g in &self.semantic {
            total += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        total.sqrt()
    }
}

/// Gradient of the hinge loss with respect to the final semantic maps, one
/// row per image (bias coordinate dropped). Row p collects
/// `-sum_k C_pk Y_pk w_k` over the classes whose hinge is active at p.
pub fn grad_wrt_final_map(
    model: &SvmModel,
    maps: &Matrix,
    labels: &LabelMatrix,
) -> Result<Matrix> {
    if maps.cols() != model.map_width() {
        return Err(Error::ShapeMismatch {
            op: "grad_wrt_final_map",
            left_rows: model.classes(),
            left_cols: model.map_width(),
            right_rows: maps.rows(),
            right_cols: maps.cols(),
        });
    }
    if labels.images() != maps.rows() || labels.classes() != model.classes() {
        return Err(Error::Validation(format!(
            "labels are {}x{}, expected {}x{}",
            labels.images(),
            labels.classes(),
            maps.rows(),
            model.classes()
        )));
    }
    let d = model.map_width();
    let mut out = Matrix::zeros(maps.rows(), d);
    for p in 0..maps.rows() {
        for k in 0..model.classes() {
            let y = labels.sign(p, k);
            let w = &model.weights[k];
            let score = crate::linalg::dot(&w[..d], maps.row(p)) + w[d];
            // strict inequality: ties take the zero branch
            if 1.0 - y * score > 0.0 {
                let coeff = -model.effective_c(k, y) * y;
                let row = out.row_mut(p);
                for (o, wi) in row.iter_mut().zip(&w[..d]) {
                    *o += coeff * wi;
                }
            }
        }
    }
    Ok(out)
}

fn mask_in_place(grad: &mut Matrix, mask: &BoolMatrix) {
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            if !mask.get(i, j) {
                grad.set(i, j, 0.0);
            }
        }
    }
}

/// Chain-rule pass from the final-map gradient down to every context matrix.
///
/// Semantic layer t splits the incoming gradient into the pooled-copy block
/// (accumulated toward pooling) and the propagated block B, yielding
/// `dE/dP(t) = sqrt(gamma2) * B * phi(t)'` and passing
/// `sqrt(gamma2) * P(t)' * B` down. Pooling copies each image's pooled
/// gradient to all of its cell rows. Geometric layers apply the same split
/// per direction, with context gradients summed over images (contexts are
/// tied across images, untied across layers). Everything is masked to the
/// frozen supports.
pub fn backprop_contexts(
    stack: &LayerStack,
    contexts: &PerLayerContexts,
    grad_final: &Matrix,
    cfg: &DepthConfig,
    loss: f64,
) -> Result<GradientBundle> {
    let final_maps = stack.final_maps();
    if grad_final.rows() != final_maps.rows() || grad_final.cols() != final_maps.cols() {
        return Err(Error::ShapeMismatch {
            op: "backprop_contexts",
            left_rows: grad_final.rows(),
            left_cols: grad_final.cols(),
            right_rows: final_maps.rows(),
            right_cols: final_maps.cols(),
        });
    }
    if stack.sem.len() != cfg.sem_layers + 1 {
        return Err(Error::Validation(format!(
            "layer stack caches {} semantic activations but the config asks for {}",
            stack.sem.len(),
            cfg.sem_layers + 1
        )));
    }
    let pool_width = stack.pooled.cols();
    let root_gamma2 = cfg.gamma2.sqrt();
    let sem_mask = contexts.semantic_mask.as_ref();

    // ---- semantic level ----
    let mut sem_grads: Vec<Matrix> = (0..cfg.sem_layers)
        .map(|_| Matrix::zeros(stack.pooled.rows(), stack.pooled.rows()))
        .collect();
    let mut grad_pooled = Matrix::zeros(stack.pooled.rows(), pool_width);
    let mut down = grad_final.clone();
    for t in (0..cfg.sem_layers).rev() {
        let head = down.columns(0, pool_width);
        let block = down.columns(pool_width, down.cols());
        let phi_t = &stack.sem[t];
        let mut grad_p = block.matmul(&phi_t.transpose())?.scale(root_gamma2);
        if let Some(mask) = sem_mask {
            mask_in_place(&mut grad_p, mask);
        }
        sem_grads[t] = grad_p;
        grad_pooled = grad_pooled.add(&head)?;
        down = contexts.semantic[t]
            .transpose()
            .matmul(&block)?
            .scale(root_gamma2);
    }
    grad_pooled = grad_pooled.add(&down)?;

    // ---- pooling: broadcast each image's pooled gradient to its cells ----
    // ---- geometric level, summed over images ----
    let directions = contexts.direction_count();
    let root_gamma1 = cfg.gamma1.sqrt();
    let n = stack.geo.first().map_or(0, |layers| layers[0].rows());
    let d0 = stack.geo.first().map_or(0, |layers| layers[0].cols());
    let mut geo_grads: Vec<Vec<Matrix>> = (0..cfg.geo_layers)
        .map(|_| (0..directions).map(|_| Matrix::zeros(n, n)).collect())
        .collect();

    for (p, layers) in stack.geo.iter().enumerate() {
        if layers.len() != cfg.geo_layers + 1 {
            return Err(Error::Validation(format!(
                "image {p} caches {} geometric activations but the config asks for {}",
                layers.len(),
                cfg.geo_layers + 1
            )));
        }
        let mut down_p = Matrix::zeros(n, pool_width);
        for i in 0..n {
            down_p.row_mut(i).copy_from_slice(grad_pooled.row(p));
        }
        for t in (0..cfg.geo_layers).rev() {
            let phi_t = &layers[t];
            let width_t = phi_t.cols();
            let mut next_down = Matrix::zeros(n, width_t);
            for c in 0..directions {
                let from = d0 + c * width_t;
                let block = down_p.columns(from, from + width_t);
                let grad_pc = block.matmul(&phi_t.transpose())?.scale(root_gamma1);
                geo_grads[t][c].add_scaled_assign(&grad_pc, 1.0);
                let passed = contexts.geometric[t][c]
                    .transpose()
                    .matmul(&block)?
                    .scale(root_gamma1);
                next_down.add_scaled_assign(&passed, 1.0);
            }
            down_p = next_down;
        }
    }
    for layer in geo_grads.iter_mut() {
        for (c, grad) in layer.iter_mut().enumerate() {
            mask_in_place(grad, &contexts.geometric_masks[c]);
        }
    }

    Ok(GradientBundle {
        geometric: geo_grads,
        semantic: sem_grads,
        loss,
    })
}

/// Everything the trainer needs about a dataset, independent of file I/O.
#[derive(Debug, Clone)]
pub struct TrainingProblem {
    /// Initial per-image cell maps (n x d0 each).
    pub phi0s: Vec<Matrix>,
    pub labels: LabelMatrix,
    pub image_ids: Vec<String>,
    /// Directed semantic link pairs resolved to image indices.
    pub link_pairs: Vec<(usize, usize)>,
}

/// How the semantic support is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SemanticSource {
    Knn { k: usize, similarity: Similarity },
    Links,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub depth: DepthConfig,
    pub geometric: GeometricContext,
    pub semantic_source: SemanticSource,
    pub svm: SvmTrainParams,
    pub cfg: TrainConfig,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub phase: &'static str,
    pub objective: f64,
    pub hinge_sum: f64,
    pub gradient_norm: Option<f64>,
}

/// Result of the alternating optimization: the best-objective snapshot.
#[derive(Debug, Clone)]
pub struct TrainedCore {
    pub contexts: PerLayerContexts,
    pub svm: SvmModel,
    pub best_objective: f64,
    pub effective_depth: DepthConfig,
    pub semantic_source: Option<SemanticSource>,
}

fn hinge_sum(model: &SvmModel, maps: &Matrix, labels: &LabelMatrix) -> Result<f64> {
    let mut reg = 0.0;
    let d = model.map_width();
    for w in &model.weights {
        reg += 0.5 * crate::linalg::dot(&w[..d], &w[..d]);
    }
    Ok(hinge_objective(model, maps, labels)? - reg)
}

/// Build the initial per-layer contexts for a problem, including the frozen
/// semantic support taken from the pooled maps under the initial contexts.
pub fn initial_contexts(
    problem: &TrainingProblem,
    opts: &TrainOptions,
) -> Result<(PerLayerContexts, DepthConfig)> {
    let depth = opts.cfg.mode.effective_depth(&opts.depth);
    let semantic = if opts.cfg.mode.has_semantic_level() && depth.sem_layers > 0 {
        let geo_depth = DepthConfig {
            sem_layers: 0,
            ..depth
        };
        let geo_only = PerLayerContexts::from_initial(&opts.geometric, None, &geo_depth);
        let stack = forward_dataset(&problem.phi0s, &geo_only, &geo_depth)?;
        let (adjacency, support_mask) = match opts.semantic_source {
            SemanticSource::Knn { k, similarity } => {
                build_semantic_adjacency(&stack.pooled, k, similarity)?
            }
            SemanticSource::Links => {
                load_semantic_links(&problem.link_pairs, problem.phi0s.len())?
            }
        };
        let k_neighbors = match opts.semantic_source {
            SemanticSource::Knn { k, .. } => k,
            SemanticSource::Links => 0,
        };
        Some(SemanticContext {
            adjacency,
            support_mask,
            k_neighbors,
        })
    } else {
        None
    };
    Ok((
        PerLayerContexts::from_initial(&opts.geometric, semantic.as_ref(), &depth),
        depth,
    ))
}

fn apply_gradient_step(
    contexts: &mut PerLayerContexts,
    bundle: &GradientBundle,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut scale = -cfg.context_lr;
    if let Some(clip) = cfg.grad_clip {
        let norm = bundle.global_norm();
        if norm > clip {
            scale *= clip / norm;
        }
    }
    if cfg.mode.learns_geometric() {
        for (layer, grads) in contexts.geometric.iter_mut().zip(&bundle.geometric) {
            for (p, g) in layer.iter_mut().zip(grads) {
                p.add_scaled_assign(g, scale);
            }
        }
    }
    if cfg.mode.learns_semantic() {
        for (p, g) in contexts.semantic.iter_mut().zip(&bundle.semantic) {
            p.add_scaled_assign(g, scale);
        }
    }
    if cfg.renormalize_rows {
        let renorm = |m: &mut Matrix| {
            for i in 0..m.rows() {
                let row = m.row_mut(i);
                for v in row.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        };
        if cfg.mode.learns_geometric() {
            for layer in contexts.geometric.iter_mut() {
                for p in layer.iter_mut() {
                    renorm(p);
                }
            }
        }
        if cfg.mode.learns_semantic() {
            for p in contexts.semantic.iter_mut() {
                renorm(p);
            }
        }
    }
    Ok(())
}

/// Alternating optimization. Returns the snapshot with the best recorded
/// objective; the log callback receives one record per half-step.
pub fn train(
    problem: &TrainingProblem,
    opts: &TrainOptions,
    mut log: impl FnMut(&TrainLogRecord),
) -> Result<TrainedCore> {
    opts.cfg.validate()?;
    opts.depth.validate()?;
    let (mut contexts, depth) = initial_contexts(problem, opts)?;

    let mut best: Option<(f64, PerLayerContexts, SvmModel)> = None;
    let learns_contexts =
        opts.cfg.mode.learns_geometric() || opts.cfg.mode.learns_semantic();

    for outer in 0..opts.cfg.outer_iters {
        // (a) fit the hinge head at fixed contexts
        let stack = forward_dataset(&problem.phi0s, &contexts, &depth)?;
        let maps = stack.final_maps();
        let svm = train_svms(maps, &problem.labels, &opts.svm)?;
        let objective = hinge_objective(&svm, maps, &problem.labels)?;
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "objective diverged during the classifier step of iteration {outer}"
            )));
        }
        log(&TrainLogRecord {
            iteration: outer,
            phase: "svm",
            objective,
            hinge_sum: hinge_sum(&svm, maps, &problem.labels)?,
            gradient_norm: None,
        });
        if best.as_ref().is_none_or(|(e, _, _)| objective < *e) {
            best = Some((objective, contexts.clone(), svm.clone()));
        }

        if !learns_contexts {
            // nothing else can change; further outer iterations are no-ops
            break;
        }

        // (b) context gradient steps at fixed classifier
        let mut last_norm = None;
        for _ in 0..opts.cfg.context_steps_per_outer {
            let stack = forward_dataset(&problem.phi0s, &contexts, &depth)?;
            let maps = stack.final_maps();
            let e_here = hinge_objective(&svm, maps, &problem.labels)?;
            let grad_final = grad_wrt_final_map(&svm, maps, &problem.labels)?;
            let bundle = backprop_contexts(&stack, &contexts, &grad_final, &depth, e_here)?;
            last_norm = Some(bundle.global_norm());
            apply_gradient_step(&mut contexts, &bundle, &opts.cfg)?;
        }
        let stack = forward_dataset(&problem.phi0s, &contexts, &depth)?;
        let maps = stack.final_maps();
        let objective = hinge_objective(&svm, maps, &problem.labels)?;
        if !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "objective diverged during the context step of iteration {outer}"
            )));
        }
        log(&TrainLogRecord {
            iteration: outer,
            phase: "context",
            objective,
            hinge_sum: hinge_sum(&svm, maps, &problem.labels)?,
            gradient_norm: last_norm,
        });
        if best.as_ref().is_none_or(|(e, _, _)| objective < *e) {
            best = Some((objective, contexts.clone(), svm.clone()));
        }
    }

    let (best_objective, contexts, svm) = best.expect("at least one outer iteration ran");
    Ok(TrainedCore {
        contexts,
        svm,
        best_objective,
        effective_depth: depth,
        semantic_source: if opts.cfg.mode.has_semantic_level() {
            Some(opts.semantic_source)
        } else {
            None
        },
    })
}

/// Loss used by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckLoss {
    /// The trained hinge objective (the real training loss).
    Hinge,
    /// Smooth diagnostic: half the squared norm of the final maps.
    Smooth,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub max_rel_error_context: f64,
    pub max_rel_error_svm: f64,
    pub checked_context_entries: usize,
    pub checked_svm_coordinates: usize,
    pub skipped_margin_ties: usize,
    pub threshold: f64,
    pub passed: bool,
}

const FD_STEP: f64 = 1e-5;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compare the analytic context (and hinge-mode classifier) gradients against
/// central finite differences on a small instance. The report always comes
/// back; `passed` reflects the loss-specific threshold.
pub fn gradcheck(
    problem: &TrainingProblem,
    opts: &TrainOptions,
    loss: GradcheckLoss,
    seed: u64,
) -> Result<GradcheckReport> {
    let (contexts, depth) = initial_contexts(problem, opts)?;
    let stack = forward_dataset(&problem.phi0s, &contexts, &depth)?;
    let maps = stack.final_maps();
    let svm = match loss {
        GradcheckLoss::Hinge => {
            // A converged hinge solution puts its support vectors exactly on
            // the margin kink, where every finite-difference probe flips an
            // indicator and gets excluded. Shrinking the trained weights
            // moves the evaluation point to a generic position.
            let mut svm = train_svms(maps, &problem.labels, &opts.svm)?;
            for w in &mut svm.weights {
                for v in w.iter_mut() {
                    *v *= 0.9;
                }
            }
            svm
        }
        GradcheckLoss::Smooth => SvmModel::zero(
            problem.labels.classes(),
            maps.cols(),
            opts.svm.c.clone(),
            opts.svm.pos_weight.clone(),
        ),
    };

    // loss + active hinge set at given contexts (the active set guards FD
    // evaluations against indicator flips)
    let evaluate = |ctx: &PerLayerContexts| -> Result<(f64, Vec<bool>)> {
        let stack = forward_dataset(&problem.phi0s, ctx, &depth)?;
        let maps = stack.final_maps();
        match loss {
            GradcheckLoss::Hinge => {
                let e = hinge_objective(&svm, maps, &problem.labels)?;
                Ok((e, active_set(&svm, maps, &problem.labels)))
            }
            GradcheckLoss::Smooth => {
                let e = 0.5 * maps.data().iter().map(|v| v * v).sum::<f64>();
                Ok((e, Vec::new()))
            }
        }
    };

    let grad_final = match loss {
        GradcheckLoss::Hinge => grad_wrt_final_map(&svm, maps, &problem.labels)?,
        GradcheckLoss::Smooth => maps.clone(),
    };
    let (base_loss, base_active) = evaluate(&contexts)?;
    let bundle = backprop_contexts(&stack, &contexts, &grad_final, &depth, base_loss)?;

    let mut max_rel_context = 0.0_f64;
    let mut checked_context = 0usize;
    let mut skipped = 0usize;

    let mut check_entry = |ctx: &PerLayerContexts,
                           place: ContextPlace,
                           i: usize,
                           j: usize,
                           analytic: f64|
     -> Result<()> {
        let mut plus = ctx.clone();
        let mut minus = ctx.clone();
        place.entry_mut(&mut plus, i, j, FD_STEP);
        place.entry_mut(&mut minus, i, j, -FD_STEP);
        let (e_plus, act_plus) = evaluate(&plus)?;
        let (e_minus, act_minus) = evaluate(&minus)?;
        if loss == GradcheckLoss::Hinge && (act_plus != base_active || act_minus != base_active) {
            skipped += 1;
            return Ok(());
        }
        let numeric = (e_plus - e_minus) / (2.0 * FD_STEP);
        max_rel_context = max_rel_context.max(rel_error(analytic, numeric));
        checked_context += 1;
        Ok(())
    };

    for t in 0..depth.geo_layers {
        for c in 0..contexts.direction_count() {
            let mask = &contexts.geometric_masks[c];
            for i in 0..mask.rows() {
                for j in 0..mask.cols() {
                    if mask.get(i, j) {
                        check_entry(
                            &contexts,
                            ContextPlace::Geometric { layer: t, dir: c },
                            i,
                            j,
                            bundle.geometric[t][c].get(i, j),
                        )?;
                    }
                }
            }
        }
    }
    if let Some(mask) = contexts.semantic_mask.as_ref() {
        for t in 0..depth.sem_layers {
            for i in 0..mask.rows() {
                for j in 0..mask.cols() {
                    if mask.get(i, j) {
                        check_entry(
                            &contexts,
                            ContextPlace::Semantic { layer: t },
                            i,
                            j,
                            bundle.semantic[t].get(i, j),
                        )?;
                    }
                }
            }
        }
    }

    // hinge mode also spot-checks a seeded 10% of the classifier weights
    let mut max_rel_svm = 0.0_f64;
    let mut checked_svm = 0usize;
    if loss == GradcheckLoss::Hinge {
        let d = svm.map_width();
        let total = svm.classes() * (d + 1);
        let sample_size = total.div_ceil(10);
        let mut coords: Vec<usize> = (0..total).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..sample_size {
            let j = i + rng.random_range(0..total - i);
            coords.swap(i, j);
        }
        let analytic_svm = svm_weight_gradients(&svm, maps, &problem.labels);
        for &coord in &coords[..sample_size] {
            let (k, idx) = (coord / (d + 1), coord % (d + 1));
            let eval_w = |delta: f64| -> Result<(f64, Vec<bool>)> {
                let mut perturbed = svm.clone();
                perturbed.weights[k][idx] += delta;
                let e = hinge_objective(&perturbed, maps, &problem.labels)?;
                Ok((e, active_set(&perturbed, maps, &problem.labels)))
            };
            let (e_plus, act_plus) = eval_w(FD_STEP)?;
            let (e_minus, act_minus) = eval_w(-FD_STEP)?;
            if act_plus != base_active || act_minus != base_active {
                skipped += 1;
                continue;
            }
            let numeric = (e_plus - e_minus) / (2.0 * FD_STEP);
            max_rel_svm = max_rel_svm.max(rel_error(analytic_svm[k][idx], numeric));
            checked_svm += 1;
        }
    }

    let threshold = match loss {
        GradcheckLoss::Hinge => 1e-4,
        GradcheckLoss::Smooth => 1e-7,
    };
    Ok(GradcheckReport {
        loss: match loss {
            GradcheckLoss::Hinge => "hinge".to_string(),
            GradcheckLoss::Smooth => "smooth".to_string(),
        },
        max_rel_error_context: max_rel_context,
        max_rel_error_svm: max_rel_svm,
        checked_context_entries: checked_context,
        checked_svm_coordinates: checked_svm,
        skipped_margin_ties: skipped,
        threshold,
        passed: max_rel_context <= threshold && max_rel_svm <= threshold,
    })
}

#[derive(Clone, Copy)]
enum ContextPlace {
    Geometric { layer: usize, dir: usize },
    Semantic { layer: usize },
}

impl ContextPlace {
    fn entry_mut(&self, ctx: &mut PerLayerContexts, i: usize, j: usize, delta: f64) {
        match *self {
            ContextPlace::Geometric { layer, dir } => {
                let m = &mut ctx.geometric[layer][dir];
                let v = m.get(i, j);
                m.set(i, j, v + delta);
            }
            ContextPlace::Semantic { layer } => {
                let m = &mut ctx.semantic[layer];
                let v = m.get(i, j);
                m.set(i, j, v + delta);
            }
        }
    }
}

fn active_set(model: &SvmModel, maps: &Matrix, labels: &LabelMatrix) -> Vec<bool> {
    let d = model.map_width();
    let mut out = Vec::with_capacity(maps.rows() * model.classes());
    for p in 0..maps.rows() {
        for k in 0..model.classes() {
            let y = labels.sign(p, k);
            let w = &model.weights[k];
            let score = crate::linalg::dot(&w[..d], maps.row(p)) + w[d];
            out.push(1.0 - y * score > 0.0);
        }
    }
    out
}

/// Analytic gradient of the hinge objective in the classifier weights,
/// including the bias coordinate (which the regularizer leaves out).
fn svm_weight_gradients(model: &SvmModel, maps: &Matrix, labels: &LabelMatrix) -> Vec<Vec<f64>> {
    let d = model.map_width();
    let mut grads: Vec<Vec<f64>> = model
        .weights
        .iter()
        .map(|w| {
            let mut g = w.clone();
            g[d] = 0.0; // bias is unregularized
            g
        })
        .collect();
    for p in 0..maps.rows() {
        for k in 0..model.classes() {
            let y = labels.sign(p, k);
            let w = &model.weights[k];
            let score = crate::linalg::dot(&w[..d], maps.row(p)) + w[d];
            if 1.0 - y * score > 0.0 {
                let coeff = -model.effective_c(k, y) * y;
                for (g, x) in grads[k][..d].iter_mut().zip(maps.row(p)) {
                    *g += coeff * x;
                }
                grads[k][d] += coeff;
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::GridSpec;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(11);
        let mut next = move || {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(11);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| next()).collect()).unwrap()
    }

    fn toy_labels(signs: &[i8]) -> LabelMatrix {
        let truth = BoolMatrix::from_fn(signs.len(), 1, |p, _| signs[p] > 0);
        LabelMatrix::from_bool(&truth)
    }

    fn toy_problem(images: usize, seed: u64) -> TrainingProblem {
        let grid = GridSpec::new(2, 2).unwrap();
        let n = grid.cell_count();
        let phi0s: Vec<Matrix> = (0..images)
            .map(|p| {
                let m = seeded(n, 3, seed + p as u64);
                // shift positive so histogram-style invariants hold elsewhere
                Matrix::from_vec(
                    n,
                    3,
                    m.data().iter().map(|v| v.abs() + 0.05).collect(),
                )
                .unwrap()
            })
            .collect();
        let signs: Vec<i8> = (0..images).map(|p| if p % 2 == 0 { 1 } else { -1 }).collect();
        TrainingProblem {
            phi0s,
            labels: toy_labels(&signs),
            image_ids: (0..images).map(|p| format!("img{p}")).collect(),
            link_pairs: Vec::new(),
        }
    }

    fn toy_options(mode: TrainMode, seed: u64) -> TrainOptions {
        let grid = GridSpec::new(2, 2).unwrap();
        TrainOptions {
            depth: DepthConfig {
                geo_layers: 1,
                sem_layers: 1,
                gamma1: 1.0,
                gamma2: 1.0,
            },
            geometric: GeometricContext::build(&grid, 1.0).unwrap(),
            semantic_source: SemanticSource::Knn {
                k: 2,
                similarity: Similarity::Cosine,
            },
            svm: SvmTrainParams::uniform(1, 1.0, 400, 1e-9),
            cfg: TrainConfig {
                outer_iters: 3,
                context_lr: 0.05,
                context_steps_per_outer: 2,
                grad_clip: None,
                seed,
                mode,
                renormalize_rows: false,
            },
        }
    }

    #[test]
    fn final_map_gradient_zero_when_margins_clear() {
        let maps = Matrix::from_rows(vec![vec![2.0], vec![-2.0]]).unwrap();
        let labels = toy_labels(&[1, -1]);
        let model = SvmModel {
            weights: vec![vec![1.0, 0.0]],
            c_k: vec![1.0],
            c_pos: vec![1.0],
        };
        let g = grad_wrt_final_map(&model, &maps, &labels).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn final_map_gradient_hand_case_and_sign_flip() {
        // single class, C=1, Y=+1, w=(1,0), bias 0, map (0.5, 3): margin 0.5
        let maps = Matrix::from_rows(vec![vec![0.5, 3.0]]).unwrap();
        let model = SvmModel {
            weights: vec![vec![1.0, 0.0, 0.0]],
            c_k: vec![1.0],
            c_pos: vec![1.0],
        };
        let labels = toy_labels(&[1]);
        let g = grad_wrt_final_map(&model, &maps, &labels).unwrap();
        assert_eq!(g.row(0), &[-1.0, 0.0]);

        // central finite difference on the objective confirms the entry
        let h = 1e-6;
        let at = |d0: f64| {
            let m = Matrix::from_rows(vec![vec![0.5 + d0, 3.0]]).unwrap();
            hinge_objective(&model, &m, &labels).unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        assert!((numeric - (-1.0)).abs() < 1e-6);

        let flipped = toy_labels(&[-1]);
        let gf = grad_wrt_final_map(&model, &maps, &flipped).unwrap();
        assert_eq!(gf.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn zero_final_gradient_gives_zero_bundle() {
        let problem = toy_problem(4, 3);
        let opts = toy_options(TrainMode::Dhcn, 3);
        let (contexts, depth) = initial_contexts(&problem, &opts).unwrap();
        let stack = forward_dataset(&problem.phi0s, &contexts, &depth).unwrap();
        let zero = Matrix::zeros(stack.final_maps().rows(), stack.final_maps().cols());
        let bundle = backprop_contexts(&stack, &contexts, &zero, &depth, 0.0).unwrap();
        assert_eq!(bundle.global_norm(), 0.0);
    }

    #[test]
    fn single_direction_gradients_match_finite_differences() {
        // n=2 cells, one direction, one layer, no semantic level; the loss is
        // the hinge objective of a fixed classifier over the pooled maps
        let phi0 = Matrix::from_rows(vec![vec![0.8, 0.1], vec![0.2, 0.5]]).unwrap();
        let p = Matrix::from_rows(vec![vec![0.0, 1.0], vec![0.4, 0.0]]).unwrap();
        let mask = BoolMatrix::from_fn(2, 2, |i, j| p.get(i, j) != 0.0);
        let contexts = PerLayerContexts {
            geometric: vec![vec![p]],
            geometric_masks: vec![mask.clone()],
            semantic: Vec::new(),
            semantic_mask: None,
        };
        let depth = DepthConfig {
            geo_layers: 1,
            sem_layers: 0,
            gamma1: 0.9,
            gamma2: 1.0,
        };
        let labels = toy_labels(&[1]);
        // pooled map width is d0 + C * d0 = 4, plus the bias coordinate
        let model = SvmModel {
            weights: vec![vec![0.6, -0.3, 0.2, 0.4, 0.0]],
            c_k: vec![1.0],
            c_pos: vec![1.0],
        };

        let evaluate = |ctx: &PerLayerContexts| {
            let stack = forward_dataset(std::slice::from_ref(&phi0), ctx, &depth).unwrap();
            hinge_objective(&model, stack.final_maps(), &labels).unwrap()
        };
        let stack = forward_dataset(std::slice::from_ref(&phi0), &contexts, &depth).unwrap();
        let grad_final =
            grad_wrt_final_map(&model, stack.final_maps(), &labels).unwrap();
        let bundle =
            backprop_contexts(&stack, &contexts, &grad_final, &depth, 0.0).unwrap();

        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                if !mask.get(i, j) {
                    assert_eq!(bundle.geometric[0][0].get(i, j), 0.0);
                    continue;
                }
                let mut plus = contexts.clone();
                let v = plus.geometric[0][0].get(i, j);
                plus.geometric[0][0].set(i, j, v + h);
                let mut minus = contexts.clone();
                minus.geometric[0][0].set(i, j, v - h);
                let numeric = (evaluate(&plus) - evaluate(&minus)) / (2.0 * h);
                let analytic = bundle.geometric[0][0].get(i, j);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom <= 1e-6,
                    "entry ({i},{j}): analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn full_architecture_gradcheck_hinge_and_smooth() {
        let problem = toy_problem(6, 17);
        let opts = toy_options(TrainMode::Dhcn, 17);
        let smooth = gradcheck(&problem, &opts, GradcheckLoss::Smooth, 7).unwrap();
        assert!(
            smooth.max_rel_error_context <= 1e-7,
            "smooth check failed: {smooth:?}"
        );
        let hinge = gradcheck(&problem, &opts, GradcheckLoss::Hinge, 7).unwrap();
        assert!(hinge.passed, "hinge check failed: {hinge:?}");
        assert!(hinge.checked_svm_coordinates > 0);
    }

    #[test]
    fn gradcheck_zero_features_all_zero() {
        let grid = GridSpec::new(2, 2).unwrap();
        let problem = TrainingProblem {
            phi0s: (0..4).map(|_| Matrix::zeros(grid.cell_count(), 3)).collect(),
            labels: toy_labels(&[1, -1, 1, -1]),
            image_ids: (0..4).map(|p| format!("img{p}")).collect(),
            link_pairs: Vec::new(),
        };
        let opts = toy_options(TrainMode::Dhcn, 5);
        let (contexts, depth) = initial_contexts(&problem, &opts).unwrap();
        let stack = forward_dataset(&problem.phi0s, &contexts, &depth).unwrap();
        let maps = stack.final_maps();
        let grad_final = maps.clone(); // smooth loss gradient, identically zero
        let bundle = backprop_contexts(&stack, &contexts, &grad_final, &depth, 0.0).unwrap();
        assert_eq!(bundle.global_norm(), 0.0);
    }

    #[test]
    fn cf_mode_equals_training_on_initial_pooled_maps() {
        let problem = toy_problem(6, 29);
        let opts = toy_options(TrainMode::Cf, 29);
        let trained = train(&problem, &opts, |_| {}).unwrap();

        // direct classifier fit on the pooled initial maps
        let mut pooled = Matrix::zeros(problem.phi0s.len(), problem.phi0s[0].cols());
        for (p, phi0) in problem.phi0s.iter().enumerate() {
            pooled
                .row_mut(p)
                .copy_from_slice(&crate::network::pool(phi0));
        }
        let svm = train_svms(&pooled, &problem.labels, &opts.svm).unwrap();
        let direct = hinge_objective(&svm, &pooled, &problem.labels).unwrap();
        assert_eq!(trained.best_objective, direct);
    }

    #[test]
    fn dfcn_mode_keeps_contexts_bit_identical() {
        let problem = toy_problem(6, 31);
        let opts = toy_options(TrainMode::Dfcn, 31);
        let (initial, depth) = initial_contexts(&problem, &opts).unwrap();
        let trained = train(&problem, &opts, |_| {}).unwrap();
        assert_eq!(depth.sem_layers, 0);
        assert_eq!(initial.geometric.len(), trained.contexts.geometric.len());
        for (a, b) in initial.geometric.iter().zip(&trained.contexts.geometric) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn training_preserves_supports() {
        let problem = toy_problem(6, 37);
        let opts = toy_options(TrainMode::Dhcn, 37);
        let trained = train(&problem, &opts, |_| {}).unwrap();
        for layer in &trained.contexts.geometric {
            for (c, p) in layer.iter().enumerate() {
                let mask = &trained.contexts.geometric_masks[c];
                for i in 0..p.rows() {
                    for j in 0..p.cols() {
                        if !mask.get(i, j) {
                            assert_eq!(p.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
        let mask = trained.contexts.semantic_mask.as_ref().unwrap();
        for p in &trained.contexts.semantic {
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    if !mask.get(i, j) {
                        assert_eq!(p.get(i, j), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn training_log_and_monotone_svm_half_step() {
        let problem = toy_problem(6, 41);
        let opts = toy_options(TrainMode::Dhcn, 41);
        let mut records = Vec::new();
        let _ = train(&problem, &opts, |r| records.push(r.clone())).unwrap();
        assert!(records.len() >= 2);
        // every svm half-step is no worse than the preceding context half-step
        for pair in records.windows(2) {
            if pair[1].phase == "svm" && pair[0].phase == "context" {
                assert!(pair[1].objective <= pair[0].objective + 1e-9);
            }
        }
    }
}
