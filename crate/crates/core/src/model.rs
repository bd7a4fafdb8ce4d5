//! The persisted model artifact: one self-contained JSON document with every
//! matrix embedded as base64 little-endian f64 bytes, so save/load round
//! trips are bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::GridSpec;
use crate::error::{Error, Result};
use crate::features::InitialMap;
use crate::network::{DepthConfig, PerLayerContexts};
use crate::svm::SvmModel;
use crate::train::{SemanticSource, TrainConfig, TrainMode};

pub const FORMAT_VERSION: u32 = 1;
pub const MATRIX_ENCODING: &str = "f64-le+base64";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config: TrainConfig,
    pub svm_c: f64,
    pub balance_classes: bool,
    pub svm_epochs: usize,
    pub svm_tol: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DhcnModel {
    pub format_version: u32,
    pub matrix_encoding: String,
    pub mode: TrainMode,
    pub depth: DepthConfig,
    pub grid: GridSpec,
    pub radius: f64,
    pub concepts: Vec<String>,
    pub initial_map: InitialMap,
    pub contexts: PerLayerContexts,
    /// How the semantic support was built (absent for modes without the
    /// semantic level).
    pub semantic_source: Option<SemanticSource>,
    /// Image-id order the semantic matrices index.
    pub semantic_image_ids: Vec<String>,
    pub svm: SvmModel,
    pub provenance: Provenance,
}

pub fn save_model(model: &DhcnModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Validation(format!("model serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<DhcnModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let model: DhcnModel = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if model.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "model format version {} is not supported (expected {})",
            model.format_version, FORMAT_VERSION
        )));
    }
    if model.matrix_encoding != MATRIX_ENCODING {
        return Err(Error::Validation(format!(
            "unknown matrix encoding '{}'",
            model.matrix_encoding
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::GeometricContext;
    use crate::linalg::Matrix;

    fn toy_model() -> DhcnModel {
        let grid = GridSpec::new(2, 2).unwrap();
        let geometric = GeometricContext::build(&grid, 1.0).unwrap();
        let depth = DepthConfig {
            geo_layers: 1,
            sem_layers: 0,
            gamma1: 1.0,
            gamma2: 1.0,
        };
        let contexts = PerLayerContexts::from_initial(&geometric, None, &depth);
        DhcnModel {
            format_version: FORMAT_VERSION,
            matrix_encoding: MATRIX_ENCODING.to_string(),
            mode: TrainMode::Dfcn,
            depth,
            grid,
            radius: 1.0,
            concepts: vec!["cat".to_string()],
            initial_map: InitialMap::Linear { feature_dim: 3 },
            contexts,
            semantic_source: None,
            semantic_image_ids: vec!["a".to_string(), "b".to_string()],
            svm: SvmModel {
                weights: vec![vec![0.25, -0.5, 1.0 / 3.0, 0.125]],
                c_k: vec![1.0],
                c_pos: vec![1.0],
            },
            provenance: Provenance {
                seed: 7,
                config: TrainConfig::default(),
                svm_c: 1.0,
                balance_classes: false,
                svm_epochs: 100,
                svm_tol: 1e-6,
                final_objective: 0.123456789012345,
            },
        }
    }

    #[test]
    fn round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = toy_model();
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model.svm, back.svm);
        assert_eq!(model.concepts, back.concepts);
        assert_eq!(model.semantic_image_ids, back.semantic_image_ids);
        for (a, b) in model
            .contexts
            .geometric
            .iter()
            .flatten()
            .zip(back.contexts.geometric.iter().flatten())
        {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(
            model.provenance.final_objective.to_bits(),
            back.provenance.final_objective.to_bits()
        );
        // saving the reload reproduces the bytes
        let path2 = dir.path().join("model2.json");
        save_model(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bumped_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = toy_model();
        model.format_version = FORMAT_VERSION + 1;
        save_model(&model, &path).unwrap();
        let err = load_model(&path).unwrap_err().to_string();
        assert!(err.contains("format version"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&toy_model(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn matrix_payloads_survive_bitwise() {
        let m = Matrix::from_rows(vec![vec![0.1 + 0.2, f64::MIN_POSITIVE, -0.0]]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: Matrix = serde_json::from_str(&text).unwrap();
        for (a, b) in m.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
