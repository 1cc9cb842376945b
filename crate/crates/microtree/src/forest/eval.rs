//! Classifier evaluation: AUC, walk-forward cross-validation, calibration
//! curves and threshold metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

use super::{train, ForestConfig};

/// One calibration-curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub mean_predicted: f64,
    pub observed_frequency: f64,
    pub count: usize,
}

/// Threshold-based classification metrics at 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision_up: f64,
    pub precision_down: f64,
    pub recall_up: f64,
    pub recall_down: f64,
    /// Macro-averaged F1 over the two classes.
    pub f1_score: f64,
}

/// Walk-forward cross-validation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub cv_fold_aucs: Vec<f64>,
    pub cv_mean_auc: f64,
    pub cv_std: f64,
}

/// Full evaluation record written by the training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_roc: f64,
    pub accuracy: f64,
    pub precision_up: f64,
    pub precision_down: f64,
    pub recall_up: f64,
    pub recall_down: f64,
    pub f1_score: f64,
    pub cv_mean_auc: f64,
    pub cv_std: f64,
    pub cv_fold_aucs: Vec<f64>,
    pub calibration_points: Vec<CalibrationPoint>,
}

impl EvalReport {
    pub fn assemble(
        holdout_auc: f64,
        metrics: ClassificationMetrics,
        cv: CvResult,
        calibration_points: Vec<CalibrationPoint>,
    ) -> Self {
        Self {
            auc_roc: holdout_auc,
            accuracy: metrics.accuracy,
            precision_up: metrics.precision_up,
            precision_down: metrics.precision_down,
            recall_up: metrics.recall_up,
            recall_down: metrics.recall_down,
            f1_score: metrics.f1_score,
            cv_mean_auc: cv.cv_mean_auc,
            cv_std: cv.cv_std,
            cv_fold_aucs: cv.cv_fold_aucs,
            calibration_points,
        }
    }
}

/// Mann–Whitney AUC: the probability a random positive outscores a random
/// negative, ties counted one half (average ranks).
pub fn evaluate_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Tied group spans ranks i+1 ..= j+1; everyone gets the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// ROC curve points as `(fpr, tpr, threshold)`, from the most permissive
/// threshold to the strictest. TPR is non-decreasing in FPR.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    // Anchor: nothing classified positive. Finite threshold keeps the CSV
    // output parseable.
    let max_score = scores[order[0]];
    let mut points = vec![(0.0, 0.0, max_score + 1.0)];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / n_neg, tp / n_pos, thr));
    }
    Ok(points)
}

/// Equal-width calibration bins over [0, 1]; empty bins are omitted.
pub fn calibration_curve(
    scores: &[f64],
    labels: &[u8],
    n_bins: usize,
) -> Result<Vec<CalibrationPoint>> {
    if n_bins < 2 {
        return Err(Error::Config("calibration needs n_bins >= 2".into()));
    }
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for (&s, &l) in scores.iter().zip(labels) {
        let clamped = s.clamp(0.0, 1.0);
        let bin = ((clamped * n_bins as f64) as usize).min(n_bins - 1);
        sums[bin].0 += clamped;
        sums[bin].1 += l as f64;
        sums[bin].2 += 1;
    }
    Ok(sums
        .into_iter()
        .filter(|&(_, _, c)| c > 0)
        .map(|(s, pos, c)| CalibrationPoint {
            mean_predicted: s / c as f64,
            observed_frequency: pos / c as f64,
            count: c,
        })
        .collect())
}

/// Accuracy, per-class precision/recall and macro F1 at threshold 0.5.
pub fn classification_metrics(scores: &[f64], labels: &[u8]) -> ClassificationMetrics {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut tn = 0.0;
    let mut fn_ = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > 0.5, l == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let total = tp + fp + tn + fn_;
    let safe = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let precision_up = safe(tp, tp + fp);
    let recall_up = safe(tp, tp + fn_);
    let precision_down = safe(tn, tn + fn_);
    let recall_down = safe(tn, tn + fp);
    let f1_up = safe(2.0 * precision_up * recall_up, precision_up + recall_up);
    let f1_down = safe(
        2.0 * precision_down * recall_down,
        precision_down + recall_down,
    );
    ClassificationMetrics {
        accuracy: safe(tp + tn, total),
        precision_up,
        precision_down,
        recall_up,
        recall_down,
        f1_score: 0.5 * (f1_up + f1_down),
    }
}

/// Chronological walk-forward cross-validation.
///
/// The rows are split into `n_folds + 1` contiguous blocks; fold `k`
/// trains on blocks `0..=k` and scores block `k + 1`, so every test block
/// lies strictly after its training data and there are exactly `n_folds`
/// fold AUCs. Nothing is shuffled.
pub fn cross_validate(
    matrix: &FeatureMatrix,
    config: &ForestConfig,
    n_folds: usize,
) -> Result<CvResult> {
    if n_folds < 2 {
        return Err(Error::Config("cross-validation needs n_folds >= 2".into()));
    }
    let n = matrix.len();
    let n_blocks = n_folds + 1;
    if n < n_blocks * config.min_samples_leaf.max(2) {
        return Err(Error::InsufficientData {
            needed: n_blocks * config.min_samples_leaf.max(2),
            got: n,
        });
    }
    let boundary = |i: usize| i * n / n_blocks;

    let mut fold_aucs = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let train_end = boundary(fold + 1);
        let test_end = boundary(fold + 2);
        let train_slice = matrix.slice(0..train_end);
        let test_slice = matrix.slice(train_end..test_end);
        let forest = train(&train_slice, config)?;
        let scores = forest.predict_matrix(&test_slice)?;
        fold_aucs.push(evaluate_auc(&scores, &test_slice.labels())?);
    }

    let mean = fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64;
    let std = if fold_aucs.len() < 2 {
        0.0
    } else {
        let ss: f64 = fold_aucs.iter().map(|a| (a - mean) * (a - mean)).sum();
        (ss / (fold_aucs.len() - 1) as f64).sqrt()
    };
    Ok(CvResult {
        cv_fold_aucs: fold_aucs,
        cv_mean_auc: mean,
        cv_std: std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn auc_perfect_and_inverted_and_tied() {
        assert_eq!(evaluate_auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(evaluate_auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert_eq!(
            evaluate_auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap(),
            0.5
        );
    }

    #[test]
    fn auc_known_mixed_case() {
        // Classic four-point case: one inversion among 2x2 pairs -> 0.75.
        let auc = evaluate_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            evaluate_auc(&[0.3, 0.4], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_invariant_under_increasing_transform() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = (0..500).map(|_| rng.gen::<bool>() as u8).collect();
        let base = evaluate_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        let transformed = evaluate_auc(&warped, &labels).unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }

    #[test]
    fn roc_tpr_monotone_in_fpr() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..300).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| u8::from(rng.gen::<f64>() < s))
            .collect();
        let points = roc_points(&scores, &labels).unwrap();
        for w in points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        let last = points.last().unwrap();
        assert_eq!((last.0, last.1), (1.0, 1.0));
    }

    #[test]
    fn calibration_on_perfectly_calibrated_scores() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 100_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<u8> = scores
            .iter()
            .map(|&s| u8::from(rng.gen::<f64>() < s))
            .collect();
        let points = calibration_curve(&scores, &labels, 10).unwrap();
        assert_eq!(points.len(), 10);
        for p in &points {
            assert!(
                (p.observed_frequency - p.mean_predicted).abs() < 0.02,
                "bin at {} observed {}",
                p.mean_predicted,
                p.observed_frequency
            );
        }
    }

    #[test]
    fn calibration_single_bin_case() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [1, 0, 1, 0];
        let points = calibration_curve(&scores, &labels, 10).unwrap();
        assert_eq!(points.len(), 1);
        assert!((points[0].mean_predicted - 0.5).abs() < 1e-12);
        assert!((points[0].observed_frequency - 0.5).abs() < 1e-12);
        assert_eq!(points[0].count, 4);
    }

    #[test]
    fn calibration_degenerate_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let labels = vec![1u8; 1000];
        for p in calibration_curve(&scores, &labels, 10).unwrap() {
            assert_eq!(p.observed_frequency, 1.0);
        }
    }

    #[test]
    fn calibration_needs_two_bins() {
        assert!(matches!(
            calibration_curve(&[0.5], &[1], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn metrics_on_a_known_confusion_table() {
        // scores -> predictions (1, 0, 1, 0); labels (1, 1, 0, 0):
        // tp=1 fn=1 fp=1 tn=1 -> everything 0.5.
        let m = classification_metrics(&[0.9, 0.2, 0.8, 0.1], &[1, 1, 0, 0]);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision_up, 0.5);
        assert_eq!(m.recall_up, 0.5);
        assert_eq!(m.f1_score, 0.5);
    }

    #[test]
    fn walk_forward_cv_fold_count_and_signal() {
        use crate::features::build_features;
        use crate::market_data::{synthesize_bars, GeneratorConfig};
        let cfg = GeneratorConfig {
            n_bars: 6_000,
            ofi_signal_strength: 0.8,
            ..GeneratorConfig::default()
        };
        let series = synthesize_bars(&cfg, 21).unwrap();
        let matrix = build_features(&series).unwrap();
        let fc = ForestConfig {
            n_trees: 40,
            ..ForestConfig::default()
        };
        let cv = cross_validate(&matrix, &fc, 5).unwrap();
        assert_eq!(cv.cv_fold_aucs.len(), 5);
        assert!(cv.cv_std >= 0.0);
        assert!(
            cv.cv_mean_auc > 0.75,
            "planted signal CV AUC only {}",
            cv.cv_mean_auc
        );

        // Shuffling the labels destroys the signal.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut rows = matrix.rows().to_vec();
        let mut labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.gen_range(0..=i));
        }
        for (row, label) in rows.iter_mut().zip(labels) {
            row.label = label;
        }
        let shuffled = FeatureMatrix::from_rows(rows);
        let cv0 = cross_validate(&shuffled, &fc, 5).unwrap();
        assert!(
            (0.45..=0.55).contains(&cv0.cv_mean_auc),
            "shuffled-label CV AUC {}",
            cv0.cv_mean_auc
        );
    }

    #[test]
    fn cv_guards() {
        use crate::forest::tests_support::tiny_matrix;
        let matrix = tiny_matrix(30);
        assert!(matches!(
            cross_validate(&matrix, &ForestConfig::default(), 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cross_validate(&matrix, &ForestConfig::default(), 5),
            Err(Error::InsufficientData { .. })
        ));
    }
}
