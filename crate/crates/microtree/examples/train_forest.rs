//! Train the random forest on planted-signal data, evaluate it
//! out-of-sample and rank feature importances.
//!
//! ```bash
//! cargo run --release --example train_forest
//! ```

use microtree::features::build_features;
use microtree::forest::{
    calibration_curve, classification_metrics, cross_validate, evaluate_auc, train, ForestConfig,
};
use microtree::market_data::{synthesize_bars, GeneratorConfig};

fn main() -> microtree::Result<()> {
    let generator = GeneratorConfig {
        n_bars: 8_000,
        ofi_signal_strength: 0.8,
        ..GeneratorConfig::default()
    };
    let series = synthesize_bars(&generator, 3)?;
    let matrix = build_features(&series)?;
    let config = ForestConfig {
        n_trees: 60,
        seed: 3,
        ..ForestConfig::default()
    };

    println!(
        "training on {} rows x {} features ({} trees, depth <= {})",
        matrix.len(),
        matrix.feature_names().len(),
        config.n_trees,
        config.max_depth
    );

    // Walk-forward cross-validation: train on the past, score the future.
    let cv = cross_validate(&matrix, &config, 5)?;
    println!("\nwalk-forward CV AUC per fold:");
    for (fold, auc) in cv.cv_fold_aucs.iter().enumerate() {
        println!("  fold {fold}: {auc:.4}");
    }
    println!("  mean {:.4} +/- {:.4}", cv.cv_mean_auc, cv.cv_std);

    // Chronological 80/20 holdout for threshold metrics and calibration.
    let split = matrix.len() * 4 / 5;
    let forest = train(&matrix.slice(0..split), &config)?;
    let test = matrix.slice(split..matrix.len());
    let scores = forest.predict_matrix(&test)?;
    let labels = test.labels();
    let metrics = classification_metrics(&scores, &labels);
    println!(
        "\nholdout: AUC {:.4}, accuracy {:.4}, F1 {:.4}",
        evaluate_auc(&scores, &labels)?,
        metrics.accuracy,
        metrics.f1_score
    );

    println!("\ncalibration curve (10 bins):");
    for p in calibration_curve(&scores, &labels, 10)? {
        println!(
            "  predicted {:.3} -> observed {:.3} (n = {})",
            p.mean_predicted, p.observed_frequency, p.count
        );
    }

    let full = train(&matrix, &config)?;
    let mut importances = full.feature_importance();
    importances.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("\ntop feature importances:");
    for (name, weight) in importances.iter().take(6) {
        println!("  {name:<18} {:.1}%", 100.0 * weight);
    }
    Ok(())
}
