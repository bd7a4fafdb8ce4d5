//! Annotation quality metrics: mean F1 at the sample and concept levels and
//! mean average precision over concepts.
//!
//! Conventions: F1 between two empty label sets is 1 (0 when exactly one is
//! empty, which the count formula already yields), and concepts without any
//! positive image are skipped by mAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{BoolMatrix, Matrix};

/// Full evaluation record emitted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mf_s: f64,
    pub mf_c: f64,
    pub map: f64,
    pub per_concept: Vec<ConceptReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptReport {
    pub concept: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent for concepts with no positive image (skipped by mAP).
    pub average_precision: Option<f64>,
}

fn check_shapes(pred: &BoolMatrix, truth: &BoolMatrix, op: &'static str) -> Result<()> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(Error::ShapeMismatch {
            op,
            left_rows: pred.rows(),
            left_cols: pred.cols(),
            right_rows: truth.rows(),
            right_cols: truth.cols(),
        });
    }
    Ok(())
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0 // both sets empty
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Mean F1 over images between predicted and true label sets.
pub fn mf_sample(pred: &BoolMatrix, truth: &BoolMatrix) -> Result<f64> {
    check_shapes(pred, truth, "mf_sample")?;
    if pred.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in 0..pred.rows() {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for k in 0..pred.cols() {
            match (pred.get(p, k), truth.get(p, k)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += f1_from_counts(tp, fp, fn_);
    }
    Ok(total / pred.rows() as f64)
}

/// Mean F1 over concepts across images.
pub fn mf_concept(pred: &BoolMatrix, truth: &BoolMatrix) -> Result<f64> {
    check_shapes(pred, truth, "mf_concept")?;
    if pred.cols() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for k in 0..pred.cols() {
        let (_, _, f1) = concept_counts(pred, truth, k);
        total += f1;
    }
    Ok(total / pred.cols() as f64)
}

fn concept_counts(pred: &BoolMatrix, truth: &BoolMatrix, k: usize) -> (f64, f64, f64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for p in 0..pred.rows() {
        match (pred.get(p, k), truth.get(p, k)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        if fn_ == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        if fp == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (precision, recall, f1_from_counts(tp, fp, fn_))
}

/// Ranking of image indices for one concept: descending score, ties broken by
/// the lower image index.
fn ranking(scores: &Matrix, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.rows()).collect();
    order.sort_by(|&a, &b| {
        scores
            .get(b, k)
            .partial_cmp(&scores.get(a, k))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Average precision of one concept, None when it has no positive image.
pub fn average_precision(scores: &Matrix, truth: &BoolMatrix, k: usize) -> Option<f64> {
    let positives = (0..truth.rows()).filter(|&p| truth.get(p, k)).count();
    if positives == 0 {
        return None;
    }
    let order = ranking(scores, k);
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &p) in order.iter().enumerate() {
        if truth.get(p, k) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Mean over concepts with at least one positive of the per-concept average
/// precision; errors when no concept has a positive image.
pub fn mean_average_precision(scores: &Matrix, truth: &BoolMatrix) -> Result<f64> {
    if scores.rows() != truth.rows() || scores.cols() != truth.cols() {
        return Err(Error::ShapeMismatch {
            op: "mean_average_precision",
            left_rows: scores.rows(),
            left_cols: scores.cols(),
            right_rows: truth.rows(),
            right_cols: truth.cols(),
        });
    }
    let values: Vec<f64> = (0..scores.cols())
        .filter_map(|k| average_precision(scores, truth, k))
        .collect();
    if values.is_empty() {
        return Err(Error::Validation(
            "mAP undefined: no concept has a positive image".to_string(),
        ));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Full report for a prediction run.
pub fn evaluate(
    concepts: &[String],
    scores: &Matrix,
    pred: &BoolMatrix,
    truth: &BoolMatrix,
) -> Result<EvalReport> {
    let mf_s = mf_sample(pred, truth)?;
    let mf_c = mf_concept(pred, truth)?;
    let map = mean_average_precision(scores, truth)?;
    let per_concept = concepts
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (precision, recall, f1) = concept_counts(pred, truth, k);
            ConceptReport {
                concept: name.clone(),
                precision,
                recall,
                f1,
                average_precision: average_precision(scores, truth, k),
            }
        })
        .collect();
    Ok(EvalReport {
        mf_s,
        mf_c,
        map,
        per_concept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boolmat(rows: Vec<Vec<bool>>) -> BoolMatrix {
        BoolMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = boolmat(vec![vec![true, false], vec![false, true]]);
        assert_eq!(mf_sample(&truth, &truth).unwrap(), 1.0);
        assert_eq!(mf_concept(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn mf_sample_hand_example() {
        // image 1: truth {A,B}, pred {A} -> 2/3; image 2: truth {A}, pred {A,B} -> 2/3
        let truth = boolmat(vec![vec![true, true], vec![true, false]]);
        let pred = boolmat(vec![vec![true, false], vec![true, true]]);
        let v = mf_sample(&pred, &truth).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mf_sample_all_empty_predictions() {
        let truth = boolmat(vec![vec![true], vec![true]]);
        let pred = boolmat(vec![vec![false], vec![false]]);
        assert_eq!(mf_sample(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn mf_concept_hand_example() {
        // concept 0: TP=1, FP=1, FN=1 -> 0.5; concept 1 perfect -> 1.0
        let truth = boolmat(vec![
            vec![true, true],
            vec![true, false],
            vec![false, true],
        ]);
        let pred = boolmat(vec![
            vec![true, true],
            vec![false, false],
            vec![true, true],
        ]);
        let v = mf_concept(&pred, &truth).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn absent_never_predicted_concept_counts_as_one() {
        let truth = boolmat(vec![vec![true, false], vec![true, false]]);
        let pred = boolmat(vec![vec![true, false], vec![true, false]]);
        assert_eq!(mf_concept(&pred, &truth).unwrap(), 1.0);
    }

    #[test]
    fn map_perfect_ranking_is_one() {
        let truth = boolmat(vec![vec![true], vec![true], vec![false], vec![false]]);
        let scores = Matrix::from_rows(vec![vec![0.9], vec![0.8], vec![0.2], vec![0.1]]).unwrap();
        assert_eq!(mean_average_precision(&scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn map_hand_example() {
        // scores 0.9(+), 0.8(-), 0.7(+) -> AP = (1/1 + 2/3)/2 = 5/6
        let truth = boolmat(vec![vec![true], vec![false], vec![true]]);
        let scores = Matrix::from_rows(vec![vec![0.9], vec![0.8], vec![0.7]]).unwrap();
        let v = mean_average_precision(&scores, &truth).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn map_without_positives_is_an_error() {
        let truth = boolmat(vec![vec![false], vec![false]]);
        let scores = Matrix::zeros(2, 1);
        let err = mean_average_precision(&scores, &truth).unwrap_err().to_string();
        assert!(err.contains("mAP undefined"), "{err}");
    }

    /// Brute-force oracle: find the unique image permutation that sorts the
    /// concept's scores non-increasingly with index tie-break, then read the
    /// average precision off that explicit ranking.
    fn ap_by_permutations(scores: &Matrix, truth: &BoolMatrix, k: usize) -> f64 {
        let n = scores.rows();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut valid: Vec<Vec<usize>> = Vec::new();
        permutations(&mut indices, 0, &mut |perm| {
            let ordered = perm.windows(2).all(|w| {
                let (a, b) = (w[0], w[1]);
                let (sa, sb) = (scores.get(a, k), scores.get(b, k));
                sa > sb || (sa == sb && a < b)
            });
            if ordered {
                valid.push(perm.to_vec());
            }
        });
        assert_eq!(valid.len(), 1, "tie rule must make the ranking unique");
        let order = &valid[0];
        let mut hits = 0;
        let mut total = 0.0;
        let positives = (0..n).filter(|&p| truth.get(p, k)).count();
        for (rank, &p) in order.iter().enumerate() {
            if truth.get(p, k) {
                hits += 1;
                total += hits as f64 / (rank + 1) as f64;
            }
        }
        total / positives as f64
    }

    fn permutations(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
        if start == items.len() {
            visit(items);
            return;
        }
        for i in start..items.len() {
            items.swap(start, i);
            permutations(items, start + 1, visit);
            items.swap(start, i);
        }
    }

    #[test]
    fn map_matches_permutation_oracle() {
        let mut state = 424242u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..20 {
            let scores =
                Matrix::from_vec(4, 2, (0..8).map(|_| (next() * 10.0).round() / 10.0).collect())
                    .unwrap();
            let truth = BoolMatrix::from_fn(4, 2, |_, _| next() > 0.5);
            for k in 0..2 {
                if (0..4).any(|p| truth.get(p, k)) {
                    let fast = average_precision(&scores, &truth, k).unwrap();
                    let slow = ap_by_permutations(&scores, &truth, k);
                    assert_eq!(fast, slow, "trial {trial} concept {k}");
                }
            }
        }
    }

    #[test]
    fn metrics_invariant_under_image_permutation() {
        let truth = boolmat(vec![
            vec![true, false],
            vec![false, true],
            vec![true, true],
        ]);
        let pred = boolmat(vec![
            vec![true, true],
            vec![false, true],
            vec![false, true],
        ]);
        let scores = Matrix::from_rows(vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.5, 0.7],
        ])
        .unwrap();
        let perm = [2usize, 0, 1];
        let permute_bool = |m: &BoolMatrix| BoolMatrix::from_fn(3, 2, |i, j| m.get(perm[i], j));
        let mut pscores = Matrix::zeros(3, 2);
        for i in 0..3 {
            pscores.row_mut(i).copy_from_slice(scores.row(perm[i]));
        }
        assert_eq!(
            mf_sample(&pred, &truth).unwrap(),
            mf_sample(&permute_bool(&pred), &permute_bool(&truth)).unwrap()
        );
        assert_eq!(
            mf_concept(&pred, &truth).unwrap(),
            mf_concept(&permute_bool(&pred), &permute_bool(&truth)).unwrap()
        );
        assert_eq!(
            mean_average_precision(&scores, &truth).unwrap(),
            mean_average_precision(&pscores, &permute_bool(&truth)).unwrap()
        );
    }

    #[test]
    fn map_invariant_under_monotone_transform() {
        let truth = boolmat(vec![vec![true], vec![false], vec![true], vec![false]]);
        let scores = Matrix::from_rows(vec![vec![0.4], vec![0.3], vec![0.9], vec![0.1]]).unwrap();
        let transformed = Matrix::from_vec(
            4,
            1,
            scores.data().iter().map(|v| (3.0 * v).exp()).collect(),
        )
        .unwrap();
        assert_eq!(
            mean_average_precision(&scores, &truth).unwrap(),
            mean_average_precision(&transformed, &truth).unwrap()
        );
    }
}
