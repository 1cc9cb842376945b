//! The whole pipeline in one run: synthesize bars, build features, train,
//! calibrate, construct the tree, price and emit report data — with every
//! artifact written to a temporary directory.
//!
//! ```bash
//! cargo run --release --example full_pipeline
//! ```

use microtree::pipeline::{self, PipelineConfig, PipelinePaths, PriceMethod};

fn main() -> microtree::Result<()> {
    let dir = std::env::temp_dir().join("microtree_pipeline");
    std::fs::create_dir_all(&dir)?;

    let mut config = PipelineConfig::with_defaults();
    config.seed = 7;
    config.paths = PipelinePaths::in_dir(&dir);
    config.generator.n_bars = 8_000;
    config.generator.ofi_signal_strength = 0.8;
    config.forest.n_trees = 60;

    let series = pipeline::cmd_synth(&config)?;
    println!("[1/7] synth      {} bars -> {}", series.len(), config.paths.bars.display());

    let matrix = pipeline::cmd_features(&config)?;
    println!("[2/7] features   {} rows -> {}", matrix.len(), config.paths.features.display());

    let report = pipeline::cmd_train(&config)?;
    println!(
        "[3/7] train      holdout AUC {:.4}, CV AUC {:.4} +/- {:.4}",
        report.eval.auc_roc, report.eval.cv_mean_auc, report.eval.cv_std
    );
    let top = report
        .importances
        .iter()
        .max_by(|a, b| a.importance.partial_cmp(&b.importance).unwrap())
        .unwrap();
    println!(
        "                 top feature: {} at {:.1}%",
        top.feature,
        100.0 * top.importance
    );

    let table = pipeline::cmd_calibrate(&config)?;
    println!(
        "[4/7] calibrate  {} states, mean |p_rf - p_mmm| = {:.4}",
        table.n_states(),
        table.mean_abs_prob_difference()
    );

    let tree = pipeline::cmd_build_tree(&config)?;
    println!(
        "[5/7] build-tree {} nodes, martingale residual {:.2e}",
        tree.node_count(),
        tree.max_local_martingale_error()
    );

    let value = pipeline::cmd_price(&config, PriceMethod::Compare)?;
    let bench = value["benchmark"]["price"].as_f64().unwrap();
    println!("[6/7] price      Black-Scholes benchmark {bench:.4}");
    for entry in value["comparisons"].as_array().unwrap() {
        println!(
            "                 {:<5} {:.4} ({:+.2}% vs benchmark)",
            entry["method"].as_str().unwrap(),
            entry["price"].as_f64().unwrap(),
            100.0 * entry["relative_difference"].as_f64().unwrap_or(f64::NAN)
        );
    }

    let files = pipeline::cmd_report(&config)?;
    println!("[7/7] report     {} figure-data CSVs in {}", files.len(), config.paths.report_dir.display());

    println!("\nall artifacts under {}", dir.display());
    Ok(())
}
