//! Command-line surface: train / predict / evaluate / gradcheck / inspect.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or I/O problems, 3 numeric
//! failures.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::context::Similarity;
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::model::{load_model, save_model};
use crate::network::DepthConfig;
use crate::pipeline::{
    evaluate_predictions, predict, train_model, InitialMapChoice, Predictions, TrainSpec,
};
use crate::train::{gradcheck, GradcheckLoss, TrainConfig, TrainMode};

#[derive(Parser)]
#[command(
    name = "dhcn",
    version,
    about = "Bi-level context-aware kernel networks for multi-label image annotation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Score a manifest with a trained model
    Predict(PredictArgs),
    /// Compare a predictions file against manifest ground truth
    Evaluate(EvaluateArgs),
    /// Check analytic context gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Summarize a model file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SharedModelArgs {
    /// Training mode: cf, dfcn, dlcn or dhcn
    #[arg(long, default_value = "dhcn")]
    mode: String,
    /// Disk radius (in cell units) of the geometric neighborhoods
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Neighbor count of the semantic kNN support
    #[arg(long, default_value_t = 10)]
    semantic_k: usize,
    /// Build the semantic support from the manifest's semantic_links
    #[arg(long, default_value_t = false)]
    semantic_links: bool,
    /// Similarity for the semantic kNN: cosine or dot
    #[arg(long, default_value = "cosine")]
    similarity: String,
    /// Geometric context layers
    #[arg(long, default_value_t = 2)]
    geo_layers: usize,
    /// Semantic context layers
    #[arg(long, default_value_t = 2)]
    sem_layers: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma1: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma2: f64,
    /// Initial cell map: linear or hi-kpca
    #[arg(long, default_value = "linear")]
    init_map: String,
    /// Retained components of the hi-kpca map
    #[arg(long, default_value_t = 64)]
    kpca_dim: usize,
    /// Landmark sample size for hi-kpca
    #[arg(long, default_value_t = 256)]
    landmarks: usize,
    /// Per-class hinge penalty C
    #[arg(long, default_value_t = 1.0)]
    svm_c: f64,
    /// Scale each class's positive-example penalty by #neg/#pos
    #[arg(long, default_value_t = false)]
    balance_classes: bool,
    /// Maximum dual coordinate descent passes
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Dual-variable change tolerance for the classifier solver
    #[arg(long, default_value_t = 1e-8)]
    svm_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SharedModelArgs {
    fn to_spec(&self, cfg_overrides: Option<&TrainArgs>) -> Result<TrainSpec> {
        let mode = TrainMode::parse(&self.mode)?;
        let init_map = match self.init_map.as_str() {
            "linear" => InitialMapChoice::Linear,
            "hi-kpca" => InitialMapChoice::HiKpca {
                dim: self.kpca_dim,
                landmark_count: self.landmarks,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown init map '{other}' (expected linear or hi-kpca)"
                )))
            }
        };
        let mut cfg = TrainConfig {
            seed: self.seed,
            mode,
            ..TrainConfig::default()
        };
        if let Some(t) = cfg_overrides {
            cfg.outer_iters = t.outer_iters;
            cfg.context_lr = t.lr;
            cfg.context_steps_per_outer = t.context_steps;
            cfg.grad_clip = t.grad_clip;
            cfg.renormalize_rows = t.renormalize_rows;
        }
        Ok(TrainSpec {
            depth: DepthConfig {
                geo_layers: self.geo_layers,
                sem_layers: self.sem_layers,
                gamma1: self.gamma1,
                gamma2: self.gamma2,
            },
            radius: self.radius,
            semantic_k: self.semantic_k,
            similarity: Similarity::parse(&self.similarity)?,
            use_links: self.semantic_links,
            initial_map: init_map,
            svm_c: self.svm_c,
            balance_classes: self.balance_classes,
            svm_epochs: self.epochs,
            svm_tol: self.svm_tol,
            cfg,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON)
    manifest: PathBuf,
    #[command(flatten)]
    shared: SharedModelArgs,
    /// Alternating optimization rounds
    #[arg(long, default_value_t = 100)]
    outer_iters: usize,
    /// Context gradient-descent learning rate
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Gradient steps per outer round
    #[arg(long, default_value_t = 1)]
    context_steps: usize,
    /// Clip the global context-gradient norm to this value
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Clamp negatives and re-normalize context rows after each update
    #[arg(long, default_value_t = false)]
    renormalize_rows: bool,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Suppress the line-delimited training log on stdout
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset manifest (JSON)
    manifest: PathBuf,
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Write predictions here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest with ground-truth labels
    manifest: PathBuf,
    /// Predictions file produced by `predict`
    #[arg(long)]
    predictions: PathBuf,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Dataset manifest (small instances recommended)
    manifest: PathBuf,
    #[command(flatten)]
    shared: SharedModelArgs,
    /// Use the smooth diagnostic loss instead of the trained hinge loss
    #[arg(long, default_value_t = false)]
    smooth: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Model file
    model: PathBuf,
    /// How many of the strongest context links to list per level
    #[arg(long, default_value_t = 10)]
    top: usize,
}

/// Entry point used by `main` and by tests; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/usage text
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let spec = args.shared.to_spec(Some(&args))?;
    let quiet = args.quiet;
    let model = train_model(&dataset, &spec, |record| {
        if !quiet {
            if let Ok(line) = serde_json::to_string(record) {
                println!("{line}");
            }
        }
    })?;
    save_model(&model, &args.out)?;
    eprintln!(
        "trained mode={} objective={:.6} -> {}",
        model.mode.name(),
        model.provenance.final_objective,
        args.out.display()
    );
    Ok(())
}

fn write_or_print(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let dataset = load_dataset(&args.manifest)?;
    let predictions = predict(&model, &dataset)?;
    let text = serde_json::to_string_pretty(&predictions)
        .map_err(|e| Error::Validation(format!("prediction serialization failed: {e}")))?;
    write_or_print(&text, args.out.as_ref())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let text = std::fs::read_to_string(&args.predictions).map_err(|source| Error::Io {
        path: args.predictions.display().to_string(),
        source,
    })?;
    let predictions: Predictions = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.predictions.display().to_string(),
        message: e.to_string(),
    })?;
    let report = evaluate_predictions(&predictions, &dataset)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("report serialization failed: {e}")))?;
    write_or_print(&text, args.out.as_ref())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let dataset = load_dataset(&args.manifest)?;
    let spec = args.shared.to_spec(None)?;
    let initial_map =
        crate::pipeline::build_initial_map(&dataset, spec.initial_map, spec.cfg.seed)?;
    let problem = crate::pipeline::training_problem(&dataset, &initial_map)?;
    let opts = crate::pipeline::train_options(&dataset, &spec)?;
    let loss = if args.smooth {
        GradcheckLoss::Smooth
    } else {
        GradcheckLoss::Hinge
    };
    let report = gradcheck(&problem, &opts, loss, spec.cfg.seed)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("report serialization failed: {e}")))?;
    println!("{text}");
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    println!("mode: {}", model.mode.name());
    println!(
        "grid: {}x{} ({} cells), radius {}",
        model.grid.grid_rows,
        model.grid.grid_cols,
        model.grid.cell_count(),
        model.radius
    );
    println!(
        "depth: {} geometric + {} semantic layers, gamma1 {}, gamma2 {}",
        model.depth.geo_layers, model.depth.sem_layers, model.depth.gamma1, model.depth.gamma2
    );
    println!(
        "initial map: {} (width {})",
        match model.initial_map {
            crate::features::InitialMap::Linear { .. } => "linear",
            crate::features::InitialMap::HiKpca { .. } => "hi-kpca",
        },
        model.initial_map.output_dim()
    );
    println!(
        "concepts: {} [{}]",
        model.concepts.len(),
        model.concepts.join(", ")
    );
    println!(
        "training: seed {}, final objective {:.6}",
        model.provenance.seed, model.provenance.final_objective
    );

    let direction_names = ["top", "bottom", "left", "right"];
    for (t, layer) in model.contexts.geometric.iter().enumerate() {
        for (c, p) in layer.iter().enumerate() {
            let mut entries: Vec<(f64, usize, usize)> = Vec::new();
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    if p.get(i, j) != 0.0 {
                        entries.push((p.get(i, j).abs(), i, j));
                    }
                }
            }
            entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            let shown: Vec<String> = entries
                .iter()
                .take(args.top)
                .map(|(w, i, j)| format!("{i}->{j}:{w:.4}"))
                .collect();
            println!(
                "geometric layer {t} {}: {} links, strongest [{}]",
                direction_names.get(c).copied().unwrap_or("?"),
                entries.len(),
                shown.join(" ")
            );
        }
    }
    for (t, p) in model.contexts.semantic.iter().enumerate() {
        let mut entries: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                if p.get(i, j) != 0.0 {
                    entries.push((p.get(i, j).abs(), i, j));
                }
            }
        }
        entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let shown: Vec<String> = entries
            .iter()
            .take(args.top)
            .map(|(w, i, j)| {
                let from = model
                    .semantic_image_ids
                    .get(*i)
                    .map(String::as_str)
                    .unwrap_or("?");
                let to = model
                    .semantic_image_ids
                    .get(*j)
                    .map(String::as_str)
                    .unwrap_or("?");
                format!("{from}->{to}:{w:.4}")
            })
            .collect();
        println!(
            "semantic layer {t}: {} links, strongest [{}]",
            entries.len(),
            shown.join(" ")
        );
    }
    Ok(())
}
