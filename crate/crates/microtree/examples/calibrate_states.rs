//! Calibrate the arbitrage-free state table: bin forest probabilities,
//! match conditional moments, rescale to the tree step and apply the
//! minimal-martingale adjustment.
//!
//! ```bash
//! cargo run --release --example calibrate_states
//! ```

use microtree::calibration::{calibrate_all, CalibrationParams};
use microtree::features::build_features;
use microtree::forest::{train, ForestConfig};
use microtree::market_data::{synthesize_bars, GeneratorConfig};

fn main() -> microtree::Result<()> {
    let generator = GeneratorConfig {
        n_bars: 8_000,
        ofi_signal_strength: 0.7,
        ..GeneratorConfig::default()
    };
    let series = synthesize_bars(&generator, 11)?;
    let matrix = build_features(&series)?;
    let forest = train(
        &matrix,
        &ForestConfig {
            n_trees: 60,
            seed: 11,
            ..ForestConfig::default()
        },
    )?;
    let probs = forest.predict_matrix(&matrix)?;

    let params = CalibrationParams::default(); // 20 bins, 3-day tree step
    let table = calibrate_all(&probs, &matrix.next_returns(), &params)?;
    table.check_invariants()?;

    println!(
        "calibrated {} states at dt_tree = {:.6} years (scaling ratio {:.1})",
        table.n_states(),
        table.dt_tree,
        table.dt_tree / table.dt_minute
    );
    println!("\n id   p_rf    p_mmm   u         d         vol/step  KL       n");
    for s in &table.states {
        println!(
            " {:>2}   {:.3}   {:.3}   {:.5}   {:.5}   {:.5}   {:>7.4}  {}{}",
            s.state_id,
            s.p_rf,
            s.p_mmm,
            s.u,
            s.d,
            s.implied_vol,
            s.kl,
            s.n_samples,
            if s.pooled { " (pooled)" } else { "" }
        );
    }
    println!(
        "\nmean |p_rf - p_mmm| = {:.4} (the cost of making the forest's \
         probabilities arbitrage-free)",
        table.mean_abs_prob_difference()
    );

    let fwd = (table.r * table.dt_tree).exp();
    let worst = table
        .states
        .iter()
        .map(|s| (s.p_mmm * s.u + (1.0 - s.p_mmm) * s.d - fwd).abs())
        .fold(0.0f64, f64::max);
    println!("worst martingale residual across states: {worst:.2e}");
    Ok(())
}
