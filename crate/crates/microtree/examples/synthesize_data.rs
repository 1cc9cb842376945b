//! Generate a synthetic minute-bar series and inspect its summary
//! statistics and stylized facts.
//!
//! ```bash
//! cargo run --example synthesize_data
//! ```

use microtree::market_data::{minute_of_day, summarize, synthesize_bars, GeneratorConfig};

fn main() -> microtree::Result<()> {
    let config = GeneratorConfig {
        n_bars: 20_000,
        ofi_signal_strength: 0.6,
        ..GeneratorConfig::default()
    };
    let series = synthesize_bars(&config, 42)?;
    println!(
        "generated {} bars for {} ({} .. {})",
        series.len(),
        series.symbol,
        series.bars().first().unwrap().timestamp,
        series.bars().last().unwrap().timestamp
    );

    let stats = summarize(&series)?;
    println!("\nsummary statistics:");
    println!(
        "  close        mean {:>12.4}  std {:>12.4}  [{:.2}, {:.2}]",
        stats.close.mean, stats.close.std, stats.close.min, stats.close.max
    );
    println!(
        "  volume       mean {:>12.0}  std {:>12.0}  [{}, {}]",
        stats.volume.mean, stats.volume.std, stats.volume.min, stats.volume.max
    );
    println!(
        "  log returns  mean {:>12.2e}  std {:>12.2e}  skew {:+.3}  excess kurtosis {:.2}",
        stats.log_returns.stats.mean,
        stats.log_returns.stats.std,
        stats.log_returns.skewness.unwrap_or(f64::NAN),
        stats.log_returns.excess_kurtosis.unwrap_or(f64::NAN),
    );
    println!(
        "  spread proxy mean {:>12.2e}  p25 {:>10.2e}  p75 {:>10.2e}",
        stats.spread_proxy.mean, stats.spread_proxy.p25, stats.spread_proxy.p75
    );

    // The intraday volume U-shape: open and close vs midday.
    let mut open = (0.0, 0u64);
    let mut midday = (0.0, 0u64);
    let mut close = (0.0, 0u64);
    for bar in series.bars() {
        let m = minute_of_day(bar.timestamp);
        let slot = match m {
            570..=599 => &mut open,
            720..=749 => &mut midday,
            930..=959 => &mut close,
            _ => continue,
        };
        slot.0 += bar.volume as f64;
        slot.1 += 1;
    }
    println!("\nintraday volume profile (mean shares/minute):");
    println!("  first 30 min {:>10.0}", open.0 / open.1 as f64);
    println!("  midday       {:>10.0}", midday.0 / midday.1 as f64);
    println!("  last 30 min  {:>10.0}", close.0 / close.1 as f64);

    Ok(())
}
