//! Acceptance suite: one test per release criterion, each printing a
//! single `[acceptance] ...: PASS/FAIL` line (run with `--nocapture` to
//! see them on success). Tolerances are pinned in code, not configurable.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use microtree::calibration::{
    calibrate_all, calibrate_state, kl_divergence_bernoulli, scale_factors, solve_factors,
    CalibrationParams, StateFactors, StateInput, StateTable,
};
use microtree::features::build_features;
use microtree::forest::{cross_validate, ForestConfig};
use microtree::market_data::{synthesize_bars, GeneratorConfig};
use microtree::pipeline::{self, PipelineConfig, PipelinePaths, PriceMethod};
use microtree::pricing::{
    black_scholes, price_crr, price_monte_carlo, price_tree, OptionKind, OptionSpec,
};
use microtree::tree::{build_tree, AggregationConfig, TransitionRule, TreeBuildConfig};

fn criterion(id: u32, name: &str, pass: bool, details: String) {
    println!(
        "[acceptance] C{id} {name}: {} ({details})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion C{id} {name} failed: {details}");
}

fn benchmark_call() -> OptionSpec {
    OptionSpec::new(OptionKind::Call, 600.0, 30.0 / 365.0, 0.05).unwrap()
}

/// C1 — the closed-form benchmark at the published parameter set:
/// S0 = K = 600, T = 30/365, r = 5%, sigma = 24.3%, target 17.87 +/- 0.02,
/// under a millisecond.
///
/// Note: an accurate closed form gives 17.8973 for these inputs, 0.0073
/// outside the stated band — the published $17.87 corresponds to an
/// unrounded volatility near 24.26%. The criterion is asserted exactly as
/// stated rather than widened to fit.
#[test]
fn c1_black_scholes_benchmark() {
    let spec = benchmark_call();
    let started = Instant::now();
    let result = black_scholes(600.0, &spec, 0.243).unwrap();
    let elapsed = started.elapsed();
    let in_band = (result.price - 17.87).abs() <= 0.02;
    let fast = elapsed < Duration::from_millis(1);
    criterion(
        1,
        "black-scholes benchmark",
        in_band && fast,
        format!(
            "price {:.6}, |diff from 17.87| = {:.4} (band 0.02), runtime {elapsed:?}",
            result.price,
            (result.price - 17.87).abs()
        ),
    );
}

/// C2 — exact node-count law 2^(N+1) - 1 for N in 1..=12, with N = 10
/// giving 2047 nodes, all under 5 seconds at N = 12.
#[test]
fn c2_node_count_law() {
    let table = StateTable::uniform(20, 0.02, 0.05, 0.008219).unwrap();
    let mut n10_nodes = 0usize;
    let started = Instant::now();
    let mut all_match = true;
    for n in 1..=12usize {
        let mut config = TreeBuildConfig::new(n, table.r, table.dt_tree);
        config.max_total_nodes = 1 << 22; // cap raised
        let tree = build_tree(600.0, &table, &config).unwrap();
        let expected = (1usize << (n + 1)) - 1;
        if tree.node_count() != expected {
            all_match = false;
        }
        if n == 10 {
            n10_nodes = tree.node_count();
        }
    }
    let elapsed = started.elapsed();
    criterion(
        2,
        "node-count law",
        all_match && n10_nodes == 2047 && elapsed < Duration::from_secs(5),
        format!("N=10 gives {n10_nodes} nodes, all N in 1..=12 checked in {elapsed:?}"),
    );
}

/// C3 — square-root-of-time rescaling between the stated steps lands
/// within 0.5% of sqrt(807.8) = 28.42.
#[test]
fn c3_scaling_factor() {
    let factors = StateFactors::solve(0.5, 0.0, 1e-4).unwrap();
    let scaled = scale_factors(&factors, 0.00001018, 0.008219).unwrap();
    let multiplier = (scaled.u.ln() - scaled.d.ln()) / (factors.u.ln() - factors.d.ln());
    let target = 807.8f64.sqrt();
    let rel = (multiplier / target - 1.0).abs();
    criterion(
        3,
        "square-root-of-time scaling",
        rel < 0.005,
        format!("sigma multiplier {multiplier:.4} vs {target:.4}, rel diff {rel:.2e}"),
    );
}

/// C4 — CRR with 1000 steps within 0.1% of the closed form on the
/// benchmark parameter set, under a second.
#[test]
fn c4_crr_convergence() {
    let spec = benchmark_call();
    let bs = black_scholes(600.0, &spec, 0.243).unwrap().price;
    let started = Instant::now();
    let crr = price_crr(600.0, &spec, 0.243, 1000).unwrap().price;
    let elapsed = started.elapsed();
    let rel = (crr - bs).abs() / bs;
    criterion(
        4,
        "CRR convergence",
        rel < 0.001 && elapsed < Duration::from_secs(1),
        format!("CRR(1000) {crr:.6} vs closed form {bs:.6}, rel err {rel:.2e}, {elapsed:?}"),
    );
}

/// C5 — closed-form factor solving reproduces 10,000 random moment pairs
/// to 1e-12 on back-substitution, under a second.
#[test]
fn c5_moment_round_trip() {
    let mut rng = ChaCha12Rng::seed_from_u64(505);
    let started = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let p = rng.gen_range(0.01..=0.99);
        let mu = rng.gen_range(-1e-3..=1e-3);
        let sigma = rng.gen_range(1e-5..=1e-2);
        let sigma2 = sigma * sigma;
        let (u, d) = solve_factors(p, mu, sigma2).unwrap();
        let mean = p * u.ln() + (1.0 - p) * d.ln();
        let var = p * u.ln().powi(2) + (1.0 - p) * d.ln().powi(2) - mean * mean;
        worst = worst.max((mean - mu).abs()).max((var - sigma2).abs());
    }
    let elapsed = started.elapsed();
    criterion(
        5,
        "moment round-trip",
        worst < 1e-12 && elapsed < Duration::from_secs(1),
        format!("worst back-substitution error {worst:.2e} over 10,000 draws, {elapsed:?}"),
    );
}

/// C6 — martingale identities on every constructed tree: local
/// `p*u + (1-p)*d = e^{r dt}` to 1e-10 at every node, and the discounted
/// terminal forward equal to the spot to relative 1e-8 without
/// aggregation.
#[test]
fn c6_martingale_invariants() {
    // A spread of tables: uniform, single-state, and one calibrated from
    // noisy data; trees with and without path dependence and aggregation.
    let mut tables = vec![
        StateTable::uniform(20, 0.02, 0.05, 0.008219).unwrap(),
        StateTable::single_state(1.03, 0.985, 0.03, 0.008219 * 0.03 / 0.05).unwrap(),
    ];
    {
        let mut rng = ChaCha12Rng::seed_from_u64(66);
        let n = 20_000;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let returns: Vec<f64> = probs
            .iter()
            .map(|&p| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                (p - 0.5) * 1e-4 + 8e-4 * z
            })
            .collect();
        tables.push(calibrate_all(&probs, &returns, &CalibrationParams::default()).unwrap());
    }

    let mut worst_local = 0.0f64;
    let mut worst_global = 0.0f64;
    let mut worst_aggregated = 0.0f64;
    for table in &tables {
        for epsilon in [0.0, 0.05] {
            let mut config = TreeBuildConfig::new(10, table.r, table.dt_tree);
            config.rule = TransitionRule { epsilon };
            config.root_p_hint = 0.55;
            let tree = build_tree(600.0, table, &config).unwrap();
            worst_local = worst_local.max(tree.max_local_martingale_error());
            worst_global = worst_global.max(tree.discounted_forward_error());

            config.aggregation = Some(AggregationConfig::new(24));
            let aggregated = build_tree(600.0, table, &config).unwrap();
            worst_local = worst_local.max(aggregated.max_local_martingale_error());
            worst_aggregated = worst_aggregated.max(aggregated.discounted_forward_error());
        }
    }
    criterion(
        6,
        "martingale invariants",
        worst_local < 1e-10 && worst_global < 1e-8 && worst_aggregated < 1e-4,
        format!(
            "local {worst_local:.2e} (tol 1e-10), global {worst_global:.2e} (tol 1e-8), \
             aggregated global {worst_aggregated:.2e} (tol 1e-4)"
        ),
    );
}

/// C7 — with the volatility term switched off, the calibration optimizer
/// matches a 1000-point brute-force KL grid on the same constraint family
/// for 100 random states.
#[test]
fn c7_mmm_optimality_vs_grid() {
    let mut rng = ChaCha12Rng::seed_from_u64(707);
    let (r, dt) = (0.05, 0.008219);
    let fwd = (r * dt as f64).exp();
    let mut worst_gap = 0.0f64;
    let mut localization_ok = true;
    let mut detail = String::new();
    for case in 0..100 {
        let p = rng.gen_range(0.02..=0.98);
        let sigma = rng.gen_range(0.005..=0.05);
        let mu = rng.gen_range(-0.02..=0.02);
        let input = StateInput {
            state_id: 0,
            p_rf: p,
            mu,
            sigma2: sigma * sigma,
            n_samples: 0,
            pooled: false,
        };
        let state = calibrate_state(&input, r, dt, 1.0, 0.0).unwrap();

        // Brute-force oracle over the same mean-preserving family.
        let kl_at = |a: f64| -> f64 {
            let d = ((mu - p * a) / (1.0 - p)).exp();
            let u = a.exp();
            if d > 0.0 && d < fwd && fwd < u {
                let pm = (fwd - d) / (u - d);
                if pm > 0.0 && pm < 1.0 {
                    return kl_divergence_bernoulli(pm, p);
                }
            }
            f64::INFINITY
        };
        let a_min = (r * dt).max((mu - (1.0 - p) * r * dt) / p);
        let lo = a_min + 1e-8;
        let hi = (mu + 6.0 * sigma).max(a_min + 6.0 * sigma);
        let step = (hi - lo) / 999.0;
        let mut best = f64::INFINITY;
        let mut best_a = lo;
        for i in 0..1000 {
            let a = lo + step * i as f64;
            let kl = kl_at(a);
            if kl < best {
                best = kl;
                best_a = a;
            }
        }
        worst_gap = worst_gap.max(state.kl - best);

        // Within grid resolution: either inside two cells of the grid
        // minimizer, or closer in objective than the grid can resolve
        // (its objective variation across one neighboring cell).
        let dist = (state.u.ln() - best_a).abs();
        let cell_variation = (kl_at(best_a + step) - best)
            .abs()
            .max((kl_at(best_a - step) - best).abs());
        if dist > 2.0 * step && state.kl > best + cell_variation + 1e-12 {
            localization_ok = false;
            detail = format!(
                "case {case}: ln(u) {:.6} vs grid {:.6} (step {step:.2e}), \
                 KL {:.3e} vs grid {:.3e}",
                state.u.ln(),
                best_a,
                state.kl,
                best
            );
        }
    }
    criterion(
        7,
        "MMM optimality vs grid oracle",
        worst_gap <= 1e-9 && localization_ok,
        format!(
            "worst KL excess over 1000-point grid {worst_gap:.2e}; localization {}",
            if localization_ok { "within grid resolution" } else { detail.as_str() }
        ),
    );
}

/// C8 — learnability: walk-forward CV AUC at least 0.80 on planted-signal
/// data with at least 20,000 rows, and 0.45..0.55 once labels are
/// shuffled; both inside two minutes.
#[test]
fn c8_forest_learnability() {
    let started = Instant::now();
    let generator = GeneratorConfig {
        n_bars: 21_000,
        ofi_signal_strength: 0.8,
        ..GeneratorConfig::default()
    };
    let series = synthesize_bars(&generator, 8).unwrap();
    let matrix = build_features(&series).unwrap();
    assert!(matrix.len() >= 20_000, "only {} rows", matrix.len());
    let config = ForestConfig {
        n_trees: 100,
        seed: 8,
        ..ForestConfig::default()
    };
    let cv = cross_validate(&matrix, &config, 5).unwrap();

    // Permutation control: shuffle the labels in place.
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let mut rows = matrix.rows().to_vec();
    let mut labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    for (row, label) in rows.iter_mut().zip(labels) {
        row.label = label;
    }
    let shuffled = microtree::features::FeatureMatrix::from_rows(rows);
    let cv0 = cross_validate(&shuffled, &config, 5).unwrap();

    let elapsed = started.elapsed();
    criterion(
        8,
        "forest learnability",
        cv.cv_mean_auc >= 0.80
            && (0.45..=0.55).contains(&cv0.cv_mean_auc)
            && elapsed < Duration::from_secs(120),
        format!(
            "planted-signal CV AUC {:.4}, shuffled {:.4}, {} rows, {elapsed:?}",
            cv.cv_mean_auc,
            cv0.cv_mean_auc,
            matrix.len()
        ),
    );
}

/// C9 — Monte Carlo with 200,000 paths agrees with backward induction on
/// the same state table to three standard errors, inside 30 seconds.
#[test]
fn c9_mc_tree_equivalence() {
    let started = Instant::now();
    let table = StateTable::uniform(20, 0.02, 0.05, 0.008219).unwrap();
    let maturity = 10.0 * table.dt_tree;
    let spec = OptionSpec::new(OptionKind::Call, 600.0, maturity, table.r).unwrap();
    let rule = TransitionRule { epsilon: 0.05 };
    let mut config = TreeBuildConfig::new(10, table.r, table.dt_tree);
    config.rule = rule;
    config.root_p_hint = 0.55;
    let tree = build_tree(600.0, &table, &config).unwrap();
    let exact = price_tree(&tree, &spec).unwrap().price;
    let mc = price_monte_carlo(&table, 600.0, &spec, 10, 200_000, 909, 0.55, rule).unwrap();
    let elapsed = started.elapsed();
    let se = mc.std_error.unwrap();
    let diff = (mc.price - exact).abs();
    criterion(
        9,
        "MC-tree equivalence",
        diff < 3.0 * se && elapsed < Duration::from_secs(30),
        format!(
            "tree {exact:.6}, MC {:.6} +/- {se:.6}, |diff| = {diff:.6} < 3 SE, {elapsed:?}",
            mc.price
        ),
    );
}

/// C10 — put-call parity to 1e-10 on a martingale tree, and call prices
/// inside [max(0, S0 - K e^{-rT}), S0] for every method over a 21-strike
/// grid (Monte Carlo gets a 3-standard-error sampling allowance).
#[test]
fn c10_parity_and_bounds() {
    let table = StateTable::uniform(20, 0.02, 0.05, 0.008219).unwrap();
    let n = 10usize;
    let maturity = n as f64 * table.dt_tree;
    let r = table.r;
    let s0 = 600.0;
    let mut config = TreeBuildConfig::new(n, r, table.dt_tree);
    config.rule = TransitionRule { epsilon: 0.03 };
    let tree = build_tree(s0, &table, &config).unwrap();

    let mut worst_parity = 0.0f64;
    let mut bounds_ok = true;
    let mut detail = String::new();
    for i in 0..21 {
        let strike = s0 * (0.85 + 0.015 * i as f64);
        let call = OptionSpec::new(OptionKind::Call, strike, maturity, r).unwrap();
        let put = OptionSpec::new(OptionKind::Put, strike, maturity, r).unwrap();

        let tree_call = price_tree(&tree, &call).unwrap().price;
        let tree_put = price_tree(&tree, &put).unwrap().price;
        let parity = s0 - strike * (-r * maturity).exp();
        worst_parity = worst_parity.max((tree_call - tree_put - parity).abs());

        let lower = (s0 - strike * (-r * maturity).exp()).max(0.0);
        let mut check = |name: &str, price: f64, slack: f64| {
            if price < lower - slack || price > s0 + slack {
                bounds_ok = false;
                detail = format!("{name} K={strike:.2}: {price} outside [{lower}, {s0}]");
            }
        };
        check("tree", tree_call, 1e-12);
        check(
            "bs",
            black_scholes(s0, &call, 0.243).unwrap().price,
            1e-12,
        );
        check("crr", price_crr(s0, &call, 0.243, n).unwrap().price, 1e-12);
        let mc = price_monte_carlo(&table, s0, &call, n, 20_000, 10, 0.5, config.rule).unwrap();
        check("mc", mc.price, 3.0 * mc.std_error.unwrap());
    }
    criterion(
        10,
        "parity and arbitrage bounds",
        worst_parity < 1e-10 && bounds_ok,
        format!(
            "worst parity residual {worst_parity:.2e}; bounds over 21 strikes {}",
            if bounds_ok { "hold" } else { detail.as_str() }.trim()
        ),
    );
}

/// C11 — the full synthetic pipeline under one fixed seed: synth, train,
/// calibrate, build, price, report; every invariant green in under five
/// minutes. This is the stand-in for the data-dependent headline numbers,
/// which are properties of a proprietary dataset and not reproducible.
#[test]
fn c11_end_to_end_pipeline() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::with_defaults();
    config.seed = 7;
    config.paths = PipelinePaths::in_dir(dir.path());
    config.generator.n_bars = 21_000;
    config.generator.ofi_signal_strength = 0.8;
    config.forest.n_trees = 100;

    pipeline::cmd_synth(&config).unwrap();
    pipeline::cmd_features(&config).unwrap();
    let report = pipeline::cmd_train(&config).unwrap();
    assert!(report.eval.cv_mean_auc >= 0.80, "cv auc {}", report.eval.cv_mean_auc);
    let importance_total: f64 = report.importances.iter().map(|e| e.importance).sum();
    assert_eq!(report.importances.len(), 17);
    assert!((importance_total - 1.0).abs() < 1e-9);

    let table = pipeline::cmd_calibrate(&config).unwrap();
    table.check_invariants().unwrap();
    let tree = pipeline::cmd_build_tree(&config).unwrap();
    assert_eq!(tree.node_count(), 2047);
    assert!(tree.max_local_martingale_error() < 1e-10);
    assert!(tree.discounted_forward_error() < 1e-8);

    let value = pipeline::cmd_price(&config, PriceMethod::Compare).unwrap();
    let results = value.get("results").unwrap().as_array().unwrap();
    let find = |m: &str| {
        results
            .iter()
            .find(|r| r.get("method").unwrap().as_str().unwrap() == m)
            .unwrap()
    };
    let tree_price = find("tree").get("price").unwrap().as_f64().unwrap();
    let mc_price = find("mc").get("price").unwrap().as_f64().unwrap();
    let mc_se = find("mc").get("std_error").unwrap().as_f64().unwrap();
    assert!(
        (tree_price - mc_price).abs() < 3.0 * mc_se,
        "tree {tree_price} vs MC {mc_price} +/- {mc_se}"
    );

    let written = pipeline::cmd_report(&config).unwrap();
    assert_eq!(written.len(), 7);
    for path in &written {
        assert!(path.exists());
    }

    let elapsed = started.elapsed();
    criterion(
        11,
        "end-to-end synthetic pipeline",
        elapsed < Duration::from_secs(300),
        format!(
            "CV AUC {:.4}, tree price {tree_price:.4}, MC {mc_price:.4} +/- {mc_se:.4}, \
             7 report files, {elapsed:?}",
            report.eval.cv_mean_auc
        ),
    );
}
