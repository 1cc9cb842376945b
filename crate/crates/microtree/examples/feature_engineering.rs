//! Build the 17-column feature matrix from synthetic bars and look at a
//! single labelled row.
//!
//! ```bash
//! cargo run --example feature_engineering
//! ```

use microtree::features::{build_features, FEATURE_NAMES};
use microtree::market_data::{synthesize_bars, GeneratorConfig};

fn main() -> microtree::Result<()> {
    let config = GeneratorConfig {
        n_bars: 2_000,
        ofi_signal_strength: 0.7,
        ..GeneratorConfig::default()
    };
    let series = synthesize_bars(&config, 7)?;
    let matrix = build_features(&series)?;
    println!(
        "{} bars -> {} labelled rows ({} warmup bars, last bar unlabelled, zero moves dropped)",
        series.len(),
        matrix.len(),
        microtree::features::WARMUP
    );

    let row = &matrix.rows()[100];
    println!("\nrow at {}:", row.timestamp);
    for (name, value) in FEATURE_NAMES.iter().zip(row.predictors.iter()) {
        println!("  {name:<18} {value:>14.6}");
    }
    println!(
        "  label = {} (next log return {:+.3e})",
        row.label, row.next_return
    );

    let up = matrix.labels().iter().filter(|&&l| l == 1).count();
    println!(
        "\nlabel balance: {} up / {} down ({:.1}% up)",
        up,
        matrix.len() - up,
        100.0 * up as f64 / matrix.len() as f64
    );

    let path = std::env::temp_dir().join("microtree_features.csv");
    matrix.write_csv_path(&path)?;
    println!("audit CSV -> {}", path.display());
    Ok(())
}
