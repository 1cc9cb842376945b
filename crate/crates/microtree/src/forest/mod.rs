//! From-scratch random-forest binary classifier.
//!
//! Trees are grown on bootstrap samples by recursive Gini-minimizing
//! splits over a random feature subset per node; the ensemble probability
//! is the mean of leaf up-fractions (not a majority vote), which is what
//! the downstream risk-neutral calibration needs. Training is reproducible:
//! each tree draws from an RNG stream derived from `(seed, tree index)`,
//! so parallel and serial training produce identical forests.

mod decision;
pub mod eval;

pub use decision::DecisionTree;
pub use eval::{
    calibration_curve, classification_metrics, cross_validate, evaluate_auc, roc_points,
    CalibrationPoint, ClassificationMetrics, CvResult, EvalReport,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_NAMES, N_FEATURES};

/// Model-file schema version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Random-forest hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    #[serde(default = "default_n_trees")]
    pub n_trees: usize,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_min_samples_leaf")]
    pub min_samples_leaf: usize,
    /// Random candidate features per split; default ceil(sqrt(17)) = 5.
    #[serde(default = "default_features_per_split")]
    pub features_per_split: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_trees() -> usize {
    300
}
fn default_max_depth() -> usize {
    12
}
fn default_min_samples_leaf() -> usize {
    20
}
fn default_features_per_split() -> usize {
    5
}
fn default_bootstrap() -> bool {
    true
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: default_n_trees(),
            max_depth: default_max_depth(),
            min_samples_leaf: default_min_samples_leaf(),
            features_per_split: default_features_per_split(),
            bootstrap: default_bootstrap(),
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if self.features_per_split < 1 || self.features_per_split > N_FEATURES {
            return Err(Error::Config(format!(
                "features_per_split must lie in [1, {N_FEATURES}] (got {})",
                self.features_per_split
            )));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::Config("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trained ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub config: ForestConfig,
    /// Rows the forest was trained on.
    pub n_samples: usize,
    /// Fraction of label-1 rows in the training data.
    pub class_balance: f64,
    pub trees: Vec<DecisionTree>,
}

/// Trains a forest. Deterministic given `(matrix, config.seed)`.
pub fn train(matrix: &FeatureMatrix, config: &ForestConfig) -> Result<Forest> {
    config.validate()?;
    let rows = matrix.rows();
    if rows.len() < 2 * config.min_samples_leaf {
        return Err(Error::InsufficientData {
            needed: 2 * config.min_samples_leaf,
            got: rows.len(),
        });
    }
    let pos = rows.iter().filter(|r| r.label == 1).count();
    if pos == 0 || pos == rows.len() {
        return Err(Error::DegenerateTraining(format!(
            "all {} training labels are {}",
            rows.len(),
            if pos == 0 { 0 } else { 1 }
        )));
    }

    let trees: Vec<DecisionTree> = (0..config.n_trees)
        .into_par_iter()
        .map(|tree_idx| {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(tree_idx as u64 + 1);
            decision::grow_tree(rows, N_FEATURES, config, &mut rng)
        })
        .collect();

    Ok(Forest {
        format_version: MODEL_FORMAT_VERSION,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        config: config.clone(),
        n_samples: rows.len(),
        class_balance: pos as f64 / rows.len() as f64,
        trees,
    })
}

impl Forest {
    /// Up-move probability for one feature vector: mean of leaf
    /// up-fractions over all trees, always in [0, 1].
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != N_FEATURES {
            return Err(Error::Shape {
                expected: N_FEATURES,
                got: x.len(),
            });
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite feature value {bad}")));
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    /// Probabilities for every row of a matrix.
    pub fn predict_matrix(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        matrix
            .rows()
            .par_iter()
            .map(|r| self.predict_proba(&r.predictors))
            .collect()
    }

    /// Mean decrease in Gini impurity per feature, normalized to sum to 1.
    /// A forest with no splits at all reports the uniform distribution.
    pub fn feature_importance(&self) -> Vec<(String, f64)> {
        let mut totals = vec![0.0; N_FEATURES];
        for tree in &self.trees {
            for (t, d) in totals.iter_mut().zip(tree.gini_decreases(N_FEATURES)) {
                *t += d;
            }
        }
        let sum: f64 = totals.iter().sum();
        if sum <= 0.0 {
            totals = vec![1.0 / N_FEATURES as f64; N_FEATURES];
        } else {
            for t in &mut totals {
                *t /= sum;
            }
        }
        self.feature_names
            .iter()
            .cloned()
            .zip(totals)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let forest: Forest = serde_json::from_str(json)?;
        if forest.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Validation {
                row: None,
                msg: format!(
                    "unsupported model format version {} (expected {})",
                    forest.format_version, MODEL_FORMAT_VERSION
                ),
            });
        }
        if forest.trees.is_empty() {
            return Err(Error::Validation {
                row: None,
                msg: "model has no trees".into(),
            });
        }
        for (i, tree) in forest.trees.iter().enumerate() {
            if !tree.check(N_FEATURES) {
                return Err(Error::Validation {
                    row: None,
                    msg: format!("tree {i} fails structural checks"),
                });
            }
        }
        Ok(forest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("cannot open model file {}: {e}", path.display()))
        })?;
        Self::from_json(&json)
    }

    /// Assembles a forest from raw trees, bypassing training (tests and
    /// tooling; invariants are still checked).
    pub fn from_trees(trees: Vec<DecisionTree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Config("a forest needs at least one tree".into()));
        }
        for tree in &trees {
            if !tree.check(N_FEATURES) {
                return Err(Error::Validation {
                    row: None,
                    msg: "tree fails structural checks".into(),
                });
            }
        }
        Ok(Forest {
            format_version: MODEL_FORMAT_VERSION,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            config: ForestConfig::default(),
            n_samples: 0,
            class_balance: 0.5,
            trees,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{col, FeatureRow};
    use chrono::NaiveDate;

    /// Toy matrix: label = 1 iff feature `f` is positive, other features
    /// are deterministic low-information noise.
    fn separable_matrix(n: usize, f: usize) -> FeatureMatrix {
        let base = NaiveDate::from_ymd_opt(2024, 1, 2)
            .unwrap()
            .and_hms_opt(9, 30, 0)
            .unwrap();
        let rows = (0..n)
            .map(|i| {
                let x_f = if i % 2 == 0 { 1.0 } else { -1.0 } * (1.0 + (i % 7) as f64);
                let mut predictors = [0.0; N_FEATURES];
                for (j, p) in predictors.iter_mut().enumerate() {
                    *p = ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.5;
                }
                predictors[f] = x_f;
                FeatureRow {
                    timestamp: base + chrono::Duration::minutes(i as i64),
                    predictors,
                    label: u8::from(x_f > 0.0),
                    next_return: if x_f > 0.0 { 1e-4 } else { -1e-4 },
                }
            })
            .collect();
        FeatureMatrix::from_rows(rows)
    }

    fn small_config() -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            max_depth: 8,
            min_samples_leaf: 5,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn separable_data_fits_nearly_perfectly() {
        let matrix = separable_matrix(1_000, 0);
        let forest = train(&matrix, &small_config()).unwrap();
        let correct = matrix
            .rows()
            .iter()
            .filter(|r| {
                let p = forest.predict_proba(&r.predictors).unwrap();
                (p > 0.5) == (r.label == 1)
            })
            .count();
        assert!(correct as f64 / matrix.len() as f64 >= 0.99);
    }

    #[test]
    fn same_seed_same_predictions() {
        let matrix = separable_matrix(600, 3);
        let probe = separable_matrix(40, 3);
        let a = train(&matrix, &small_config()).unwrap();
        let b = train(&matrix, &small_config()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        for row in probe.rows() {
            assert_eq!(
                a.predict_proba(&row.predictors).unwrap(),
                b.predict_proba(&row.predictors).unwrap()
            );
        }
    }

    #[test]
    fn depth_zero_forest_outputs_base_rate() {
        let matrix = separable_matrix(200, 0);
        let up_frac = matrix.labels().iter().filter(|&&l| l == 1).count() as f64 / 200.0;
        let config = ForestConfig {
            n_trees: 1,
            max_depth: 0,
            bootstrap: false,
            ..ForestConfig::default()
        };
        let forest = train(&matrix, &config).unwrap();
        for row in matrix.rows().iter().take(10) {
            let p = forest.predict_proba(&row.predictors).unwrap();
            assert!((p - up_frac).abs() < 1e-12);
        }
    }

    #[test]
    fn two_tree_mean() {
        let forest =
            Forest::from_trees(vec![DecisionTree::leaf(1.0), DecisionTree::leaf(0.0)]).unwrap();
        let x = [0.0; N_FEATURES];
        assert_eq!(forest.predict_proba(&x).unwrap(), 0.5);
    }

    #[test]
    fn pure_leaf_forest_is_certain() {
        let forest = Forest::from_trees(vec![DecisionTree::leaf(1.0)]).unwrap();
        assert_eq!(forest.predict_proba(&[0.0; N_FEATURES]).unwrap(), 1.0);
    }

    #[test]
    fn shape_and_domain_guards() {
        let forest = Forest::from_trees(vec![DecisionTree::leaf(0.5)]).unwrap();
        assert!(matches!(
            forest.predict_proba(&[0.0; 3]),
            Err(Error::Shape { expected: 17, got: 3 })
        ));
        let mut x = [0.0; N_FEATURES];
        x[4] = f64::NAN;
        assert!(matches!(forest.predict_proba(&x), Err(Error::Domain(_))));
    }

    #[test]
    fn single_class_labels_rejected() {
        let mut matrix = separable_matrix(100, 0);
        let rows: Vec<FeatureRow> = matrix
            .rows()
            .iter()
            .map(|r| FeatureRow {
                label: 1,
                ..r.clone()
            })
            .collect();
        matrix = FeatureMatrix::from_rows(rows);
        assert!(matches!(
            train(&matrix, &small_config()),
            Err(Error::DegenerateTraining(_))
        ));
    }

    #[test]
    fn too_few_rows_rejected() {
        let matrix = separable_matrix(10, 0);
        assert!(matches!(
            train(&matrix, &ForestConfig::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn importance_sums_to_one_and_finds_the_feature() {
        let matrix = separable_matrix(1_000, col::OFI);
        let forest = train(&matrix, &small_config()).unwrap();
        let importances = forest.feature_importance();
        let total: f64 = importances.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(importances.iter().all(|(_, w)| *w >= 0.0));
        let (name, weight) = importances
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(name, "ofi");
        assert!(*weight > 0.9, "dominant importance only {weight}");
    }

    #[test]
    fn no_split_forest_reports_uniform_importance() {
        let matrix = separable_matrix(200, 0);
        let config = ForestConfig {
            n_trees: 3,
            max_depth: 0,
            ..ForestConfig::default()
        };
        let forest = train(&matrix, &config).unwrap();
        let importances = forest.feature_importance();
        for (_, w) in &importances {
            assert!((w - 1.0 / N_FEATURES as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_trees_leave_probability_unchanged() {
        let matrix = separable_matrix(400, 2);
        let forest = train(&matrix, &small_config()).unwrap();
        let mut doubled = forest.clone();
        doubled.trees.extend(forest.trees.clone());
        for row in matrix.rows().iter().take(20) {
            let a = forest.predict_proba(&row.predictors).unwrap();
            let b = doubled.predict_proba(&row.predictors).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let matrix = separable_matrix(300, 1);
        let forest = train(&matrix, &small_config()).unwrap();
        let json = forest.to_json().unwrap();
        let reloaded = Forest::from_json(&json).unwrap();
        assert_eq!(forest, reloaded);
        for row in matrix.rows().iter().take(10) {
            assert_eq!(
                forest.predict_proba(&row.predictors).unwrap(),
                reloaded.predict_proba(&row.predictors).unwrap()
            );
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let matrix = separable_matrix(300, 1);
        let forest = train(&matrix, &small_config()).unwrap();
        let json = forest
            .to_json()
            .unwrap()
            .replace("\"format_version\":1", "\"format_version\":99");
        assert!(Forest::from_json(&json).is_err());
    }

    #[test]
    fn planted_signal_probe_leans_up() {
        use crate::features::build_features;
        use crate::market_data::{synthesize_bars, GeneratorConfig};
        let cfg = GeneratorConfig {
            n_bars: 6_000,
            ofi_signal_strength: 0.8,
            ..GeneratorConfig::default()
        };
        let series = synthesize_bars(&cfg, 3).unwrap();
        let matrix = build_features(&series).unwrap();
        let forest = train(
            &matrix,
            &ForestConfig {
                n_trees: 60,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        // Probe: the row with the strongest positive order-flow imbalance.
        let row = matrix
            .rows()
            .iter()
            .max_by(|a, b| {
                a.predictors[col::OFI]
                    .partial_cmp(&b.predictors[col::OFI])
                    .unwrap()
            })
            .unwrap();
        let p = forest.predict_proba(&row.predictors).unwrap();
        assert!(p > 0.5, "strong positive OFI probe got p = {p}");
    }
}
