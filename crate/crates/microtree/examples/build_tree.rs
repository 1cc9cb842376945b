//! Construct the non-recombining pricing tree, verify its martingale
//! invariants and demonstrate per-level state aggregation.
//!
//! ```bash
//! cargo run --example build_tree
//! ```

use microtree::calibration::StateTable;
use microtree::tree::{build_tree, AggregationConfig, TransitionRule, TreeBuildConfig};

fn main() -> microtree::Result<()> {
    let table = StateTable::uniform(20, 0.02, 0.05, 0.008219)?;

    // Exact tree: 2^(N+1) - 1 nodes.
    let mut config = TreeBuildConfig::new(10, table.r, table.dt_tree);
    config.root_p_hint = 0.55;
    config.rule = TransitionRule { epsilon: 0.05 };
    let tree = build_tree(600.0, &table, &config)?;
    println!(
        "exact tree: {} nodes over {} steps (built in {:.4}s)",
        tree.node_count(),
        tree.n_steps,
        tree.build_seconds
    );
    println!(
        "  local martingale residual  {:.2e}",
        tree.max_local_martingale_error()
    );
    println!(
        "  discounted forward error   {:.2e}",
        tree.discounted_forward_error()
    );
    let terminal_prices: Vec<f64> = tree.terminal().iter().map(|n| n.price).collect();
    println!(
        "  terminal price range       [{:.2}, {:.2}] over {} leaves",
        terminal_prices.iter().cloned().fold(f64::MAX, f64::min),
        terminal_prices.iter().cloned().fold(f64::MIN, f64::max),
        terminal_prices.len()
    );

    // Same dynamics with each level clustered to at most 24 nodes.
    config.aggregation = Some(AggregationConfig::new(24));
    let compact = build_tree(600.0, &table, &config)?;
    println!(
        "\naggregated tree: {} nodes ({} merges), levels capped at 24",
        compact.node_count(),
        compact.merges.len()
    );
    println!(
        "  discounted forward error   {:.2e} (expectation preserved by mass-weighted merging)",
        compact.discounted_forward_error()
    );

    let dump = std::env::temp_dir().join("microtree_tree.json");
    compact.save_dump(&dump)?;
    println!("  JSON dump -> {}", dump.display());
    Ok(())
}
