//! Shared test support: a deterministic RNG and a synthetic multi-label
//! dataset whose labels are carried by where symbol mass sits on the grid.
//!
//! Layout (4x4 grid, 9 feature dims):
//!   dims 0..3  - symbols, one per concept; each image carries the same total
//!                symbol mass whether or not the concept is present, so
//!                position-blind pooling is uninformative. A present concept
//!                concentrates its symbol in a concept-specific quadrant
//!                (reachable through the directional supports); an absent one
//!                scatters it outside. A corrupted present placement scatters
//!                too, making those positives positionally invisible.
//!   dims 3..6  - weak per-concept signatures with overlapping present/absent
//!                levels; noisy evidence any linear readout can use.
//!   dims 6..9  - cluster channel: the label subset (x, y, z) encoded as the
//!                XOR corner (x^y, y^z, x^y^z). The encoding is bijective, so
//!                image-level kNN clusters label subsets cleanly, yet every
//!                single concept has exactly zero affine correlation with the
//!                corner coordinates (each bit is a 2+-variable XOR), so a
//!                position-blind linear classifier gains nothing from it.

// each test binary uses its own subset of this module
#![allow(dead_code)]

use std::path::Path;

use dhcn::context::GridSpec;
use dhcn::dataset::{Dataset, GridImage};
use dhcn::linalg::{BoolMatrix, Matrix};
use dhcn::svm::LabelMatrix;

/// SplitMix64; deterministic across platforms, no dependencies.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub const GRID_ROWS: usize = 4;
pub const GRID_COLS: usize = 4;
pub const CONCEPTS: usize = 3;
pub const FEATURE_DIM: usize = 9;

/// Quadrant cells (row-major indices) owned by each concept.
fn region(concept: usize) -> Vec<usize> {
    let (rows, cols) = match concept {
        0 => (0..2, 0..2),  // top-left
        1 => (2..4, 2..4),  // bottom-right
        _ => (0..2, 2..4),  // top-right
    };
    let mut cells = Vec::new();
    for r in rows {
        for c in cols.clone() {
            cells.push(r * GRID_COLS + c);
        }
    }
    cells
}

pub struct SyntheticConfig {
    pub images: usize,
    /// Probability that a present concept's placement is scrambled.
    pub corruption: f64,
    /// Offset between the present and absent signature-level ranges; both
    /// ranges have width 1 - gap, so larger gaps mean cleaner signatures.
    pub signature_gap: f64,
    /// Image-id prefix; train and test splits must not share ids.
    pub id_prefix: &'static str,
    pub seed: u64,
}

pub fn planted_dataset(cfg: &SyntheticConfig) -> Dataset {
    let mut rng = TestRng::new(cfg.seed);
    let grid = GridSpec::new(GRID_ROWS, GRID_COLS).unwrap();
    let n = grid.cell_count();
    let mut truth = BoolMatrix::falses(cfg.images, CONCEPTS);
    let mut images = Vec::with_capacity(cfg.images);

    for p in 0..cfg.images {
        let mut features = Matrix::zeros(n, FEATURE_DIM);
        // background noise everywhere
        for i in 0..n {
            for f in 0..FEATURE_DIM {
                features.set(i, f, rng.range(0.0, 0.05));
            }
        }
        let mut bits = [false; CONCEPTS];
        for k in 0..CONCEPTS {
            let present = rng.uniform() < 0.5;
            bits[k] = present;
            truth.set(p, k, present);
            let corrupted = present && rng.uniform() < cfg.corruption;

            // four units of symbol mass either inside the concept's region
            // (clean positives) or scattered outside it
            let cells: Vec<usize> = if present && !corrupted {
                region(k)
            } else {
                let mut outside: Vec<usize> =
                    (0..n).filter(|cell| !region(k).contains(cell)).collect();
                rng.shuffle(&mut outside);
                outside.truncate(4);
                outside
            };
            for &cell in &cells {
                let v = features.get(cell, k);
                features.set(cell, k, v + 1.0 * rng.range(0.9, 1.1));
            }

            // weak position-blind signature: overlapping level distributions
            let level = if present {
                rng.range(cfg.signature_gap, 1.0)
            } else {
                rng.range(0.0, 1.0 - cfg.signature_gap)
            };
            let per_cell = level / n as f64;
            for i in 0..n {
                let f = CONCEPTS + k;
                let v = features.get(i, f);
                features.set(i, f, v + per_cell * rng.range(0.8, 1.2));
            }
        }

        // cluster channel: XOR corner of the label subset
        let (x, y, z) = (bits[0], bits[1], bits[2]);
        let corner = [x ^ y, y ^ z, x ^ y ^ z];
        for (d, &bit) in corner.iter().enumerate() {
            if bit {
                let per_cell = 3.0 / n as f64;
                for i in 0..n {
                    let f = 2 * CONCEPTS + d;
                    let v = features.get(i, f);
                    features.set(i, f, v + per_cell * rng.range(0.9, 1.1));
                }
            }
        }
        images.push(GridImage {
            id: format!("{}{p:03}", cfg.id_prefix),
            features,
        });
    }

    Dataset {
        grid,
        feature_dim: FEATURE_DIM,
        features_are_histograms: false,
        concepts: (0..CONCEPTS).map(|k| format!("concept{k}")).collect(),
        labels: LabelMatrix::from_bool(&truth),
        truth,
        images,
        link_pairs: Vec::new(),
    }
}

/// Brute-force average precision: enumerate the image permutations, keep the
/// unique one that orders the concept's scores non-increasingly with the
/// lower-index tie rule, and read the metric off that explicit ranking.
pub fn ap_permutation_oracle(scores: &Matrix, truth: &BoolMatrix, k: usize) -> f64 {
    fn visit(items: &mut Vec<usize>, start: usize, out: &mut Vec<Vec<usize>>) {
        if start == items.len() {
            out.push(items.clone());
            return;
        }
        for i in start..items.len() {
            items.swap(start, i);
            visit(items, start + 1, out);
            items.swap(start, i);
        }
    }
    let n = scores.rows();
    let mut all = Vec::new();
    visit(&mut (0..n).collect(), 0, &mut all);
    let valid: Vec<&Vec<usize>> = all
        .iter()
        .filter(|perm| {
            perm.windows(2).all(|w| {
                let (a, b) = (w[0], w[1]);
                let (sa, sb) = (scores.get(a, k), scores.get(b, k));
                sa > sb || (sa == sb && a < b)
            })
        })
        .collect();
    assert_eq!(valid.len(), 1, "tie rule must make the ranking unique");
    let positives = (0..n).filter(|&p| truth.get(p, k)).count();
    let mut hits = 0;
    let mut total = 0.0;
    for (rank, &p) in valid[0].iter().enumerate() {
        if truth.get(p, k) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / positives as f64
}

/// Write a dataset to disk as a manifest plus one feature file per image.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> std::path::PathBuf {
    let images: Vec<serde_json::Value> = dataset
        .images
        .iter()
        .enumerate()
        .map(|(p, image)| {
            let labels: Vec<String> = dataset
                .concepts
                .iter()
                .enumerate()
                .filter(|(k, _)| dataset.truth.get(p, *k))
                .map(|(_, name)| name.clone())
                .collect();
            let links: Vec<String> = dataset
                .link_pairs
                .iter()
                .filter(|(from, _)| *from == p)
                .map(|(_, to)| dataset.images[*to].id.clone())
                .collect();
            if links.is_empty() {
                serde_json::json!({
                    "id": image.id,
                    "feature_file": format!("{}.txt", image.id),
                    "labels": labels,
                })
            } else {
                serde_json::json!({
                    "id": image.id,
                    "feature_file": format!("{}.txt", image.id),
                    "labels": labels,
                    "semantic_links": links,
                })
            }
        })
        .collect();
    let manifest = serde_json::json!({
        "grid_rows": dataset.grid.grid_rows,
        "grid_cols": dataset.grid.grid_cols,
        "feature_dim": dataset.feature_dim,
        "features_are_histograms": dataset.features_are_histograms,
        "concepts": dataset.concepts,
        "images": images,
    });
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .unwrap();
    for image in &dataset.images {
        let mut text = String::new();
        for i in 0..image.features.rows() {
            let row: Vec<String> = image
                .features
                .row(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        std::fs::write(dir.join(format!("{}.txt", image.id)), text).unwrap();
    }
    manifest_path
}
