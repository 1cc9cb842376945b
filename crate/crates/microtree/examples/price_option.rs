//! Price one option four ways: state tree, Monte Carlo, CRR lattice and
//! Black-Scholes, then compare.
//!
//! ```bash
//! cargo run --release --example price_option
//! ```

use microtree::calibration::StateTable;
use microtree::pricing::{
    black_scholes, compare_report, price_crr, price_monte_carlo, price_tree, Method, OptionKind,
    OptionSpec,
};
use microtree::tree::{build_tree, TransitionRule, TreeBuildConfig};

fn main() -> microtree::Result<()> {
    let n_steps = 10usize;
    let maturity = 30.0 / 365.0;
    let dt = maturity / n_steps as f64;
    let (s0, strike, rate, vol) = (600.0, 600.0, 0.05, 0.243);
    let spec = OptionSpec::new(OptionKind::Call, strike, maturity, rate)?;

    // A 20-state table whose per-step volatility matches the benchmark vol.
    let sigma_step = vol * dt.sqrt();
    let table = StateTable::uniform(20, sigma_step, rate, dt)?;
    let mut config = TreeBuildConfig::new(n_steps, rate, dt);
    config.rule = TransitionRule { epsilon: 0.05 };
    let tree = build_tree(s0, &table, &config)?;

    let results = vec![
        price_tree(&tree, &spec)?,
        price_monte_carlo(&table, s0, &spec, n_steps, 200_000, 1, 0.5, config.rule)?,
        price_crr(s0, &spec, vol, n_steps)?,
        black_scholes(s0, &spec, vol)?,
    ];
    for r in &results {
        println!(
            "{:<14} {:>9.4}{}",
            format!("{:?}", r.method),
            r.price,
            r.std_error
                .map(|se| format!("  (+/- {se:.4})"))
                .unwrap_or_default()
        );
    }

    let report = compare_report(&results, Method::BlackScholes)?;
    println!("\nagainst the Black-Scholes benchmark {:.4}:", report.benchmark.price);
    for entry in &report.comparisons {
        println!(
            "  {:<14} diff {:+.4} ({:+.2}%)",
            format!("{:?}", entry.method),
            entry.absolute_difference,
            100.0 * entry.relative_difference.unwrap_or(f64::NAN)
        );
    }

    // A strike ladder: calls fall, puts rise, parity holds on the tree.
    println!("\nstrike ladder on the state tree:");
    println!("  K        call      put       parity residual");
    for i in 0..5 {
        let k = 560.0 + 20.0 * i as f64;
        let c = price_tree(&tree, &OptionSpec::new(OptionKind::Call, k, maturity, rate)?)?.price;
        let p = price_tree(&tree, &OptionSpec::new(OptionKind::Put, k, maturity, rate)?)?.price;
        let residual = c - p - (s0 - k * (-rate * maturity).exp());
        println!("  {k:<7.0}  {c:>8.4}  {p:>8.4}  {residual:+.2e}");
    }
    Ok(())
}
