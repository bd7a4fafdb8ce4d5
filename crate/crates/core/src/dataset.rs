//! Dataset ingestion: a JSON manifest describing the grid, concepts and
//! images, plus one plain-text feature file per image (one grid cell per
//! row, row-major order, whitespace or comma separated values).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::GridSpec;
use crate::error::{Error, Result};
use crate::linalg::{BoolMatrix, Matrix};
use crate::svm::LabelMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: String,
    pub feature_file: String,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_links: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub features_are_histograms: bool,
    pub concepts: Vec<String>,
    pub images: Vec<ManifestImage>,
}

/// One image: its id and the n x d0 cell feature rows.
#[derive(Debug, Clone)]
pub struct GridImage {
    pub id: String,
    pub features: Matrix,
}

/// Fully validated in-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: GridSpec,
    pub feature_dim: usize,
    pub features_are_histograms: bool,
    pub concepts: Vec<String>,
    pub images: Vec<GridImage>,
    pub labels: LabelMatrix,
    pub truth: BoolMatrix,
    /// Directed semantic link pairs as image indices, manifest order.
    pub link_pairs: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|im| im.id.clone()).collect()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse one feature file into an n x d matrix.
fn parse_feature_file(path: &Path, expected_rows: usize, expected_dim: usize) -> Result<Matrix> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut row = Vec::with_capacity(expected_dim);
        for token in trimmed.split(|c: char| c.is_whitespace() || c == ',') {
            if token.is_empty() {
                continue;
            }
            let value: f64 = token.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                message: format!("line {}: '{}' is not a number", line_no + 1, token),
            })?;
            row.push(value);
        }
        if row.len() != expected_dim {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!(
                    "line {}: expected {} values, found {}",
                    line_no + 1,
                    expected_dim,
                    row.len()
                ),
            });
        }
        rows.push(row);
    }
    if rows.len() != expected_rows {
        return Err(Error::Validation(format!(
            "{}: expected {} rows (grid cells), found {}",
            path.display(),
            expected_rows,
            rows.len()
        )));
    }
    Matrix::from_rows(rows).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn parse_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Load and validate a dataset. Feature-file paths resolve relative to the
/// manifest's directory. When the manifest flags histogram features, entries
/// must be nonnegative and every cell row is L1-normalized here, once.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = parse_manifest(manifest_path)?;
    let grid = GridSpec::new(manifest.grid_rows, manifest.grid_cols)?;
    if manifest.feature_dim == 0 {
        return Err(Error::Validation("feature_dim must be positive".to_string()));
    }
    let mut concept_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, name) in manifest.concepts.iter().enumerate() {
        if concept_index.insert(name.as_str(), k).is_some() {
            return Err(Error::Validation(format!("duplicate concept '{name}'")));
        }
    }

    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let n = grid.cell_count();

    let mut id_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (p, image) in manifest.images.iter().enumerate() {
        if id_index.insert(image.id.as_str(), p).is_some() {
            return Err(Error::Validation(format!(
                "duplicate image id '{}'",
                image.id
            )));
        }
    }

    let mut images = Vec::with_capacity(manifest.images.len());
    let mut truth = BoolMatrix::falses(manifest.images.len(), manifest.concepts.len());
    let mut link_pairs = Vec::new();

    for (p, entry) in manifest.images.iter().enumerate() {
        let mut features =
            parse_feature_file(&base.join(&entry.feature_file), n, manifest.feature_dim)?;
        if manifest.features_are_histograms {
            for i in 0..features.rows() {
                let row = features.row_mut(i);
                if let Some(bad) = row.iter().find(|v| **v < 0.0) {
                    return Err(Error::Validation(format!(
                        "{}: histogram features must be nonnegative, found {}",
                        entry.feature_file, bad
                    )));
                }
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
        for label in &entry.labels {
            let k = *concept_index.get(label.as_str()).ok_or_else(|| {
                Error::Validation(format!(
                    "image '{}' references undeclared concept '{}'",
                    entry.id, label
                ))
            })?;
            truth.set(p, k, true);
        }
        if let Some(links) = &entry.semantic_links {
            for target in links {
                let q = *id_index.get(target.as_str()).ok_or_else(|| {
                    Error::Validation(format!(
                        "image '{}' links to unknown image id '{}'",
                        entry.id, target
                    ))
                })?;
                link_pairs.push((p, q));
            }
        }
        images.push(GridImage {
            id: entry.id.clone(),
            features,
        });
    }

    Ok(Dataset {
        grid,
        feature_dim: manifest.feature_dim,
        features_are_histograms: manifest.features_are_histograms,
        concepts: manifest.concepts,
        labels: LabelMatrix::from_bool(&truth),
        truth,
        images,
        link_pairs,
    })
}
