//! European option pricing: backward induction on the state tree, Monte
//! Carlo on the same calibrated dynamics, and CRR / Black-Scholes
//! benchmarks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::StateTable;
use crate::error::{Error, Result};
use crate::tree::{map_state, Move, MoveHistory, PricingTree, TransitionRule};

/// Hard cap on `paths * steps` for the Monte Carlo engine.
pub const MC_STEP_CAP: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
    Put,
}

/// European option terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub kind: OptionKind,
    pub strike: f64,
    /// Years to expiry.
    pub maturity: f64,
    /// Annualized continuously compounded risk-free rate.
    pub rate: f64,
}

impl OptionSpec {
    /// A zero strike is accepted as the degenerate forward contract.
    pub fn new(kind: OptionKind, strike: f64, maturity: f64, rate: f64) -> Result<Self> {
        if strike < 0.0 {
            return Err(Error::Domain(format!("strike must be >= 0 (got {strike})")));
        }
        if !(maturity > 0.0) {
            return Err(Error::Domain(format!(
                "maturity must be positive (got {maturity})"
            )));
        }
        Ok(Self {
            kind,
            strike,
            maturity,
            rate,
        })
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.maturity).exp()
    }
}

/// Terminal payoff at spot `s`.
pub fn payoff(spec: &OptionSpec, s: f64) -> f64 {
    match spec.kind {
        OptionKind::Call => (s - spec.strike).max(0.0),
        OptionKind::Put => (spec.strike - s).max(0.0),
    }
}

/// Which engine produced a price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tree,
    Mc,
    Crr,
    BlackScholes,
}

/// A priced option plus engine diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingResult {
    pub method: Method,
    pub price: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    /// Monte Carlo only: sample standard error of the estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub build_seconds: Option<f64>,
    pub pricing_seconds: f64,
}

impl PricingResult {
    fn bare(method: Method, price: f64, pricing_seconds: f64) -> Self {
        Self {
            method,
            price,
            n_steps: None,
            n_paths: None,
            std_error: None,
            node_count: None,
            build_seconds: None,
            pricing_seconds,
        }
    }
}

// ── Backward induction on the state tree ────────────────────────────────

/// Prices by discounted-expectation recursion from the terminal payoffs
/// to the root. The option maturity must agree with the tree horizon to
/// within half a step, and the discounting rate with the tree's rate.
pub fn price_tree(tree: &PricingTree, spec: &OptionSpec) -> Result<PricingResult> {
    let horizon = tree.n_steps as f64 * tree.dt;
    if (horizon - spec.maturity).abs() > tree.dt / 2.0 {
        return Err(Error::SpecMismatch(format!(
            "tree horizon {horizon} vs option maturity {} (more than half a step apart)",
            spec.maturity
        )));
    }
    if (spec.rate - tree.r).abs() > 1e-12 {
        return Err(Error::SpecMismatch(format!(
            "option rate {} differs from the tree's martingale rate {}",
            spec.rate, tree.r
        )));
    }
    let started = Instant::now();
    let disc = (-tree.r * tree.dt).exp();
    let mut values: Vec<f64> = tree.terminal().iter().map(|n| payoff(spec, n.price)).collect();
    for level in tree.levels[..tree.levels.len() - 1].iter().rev() {
        let mut next = Vec::with_capacity(level.len());
        for node in level {
            let up = values[node.up_child.expect("non-terminal node has children")];
            let down = values[node.down_child.expect("non-terminal node has children")];
            next.push(disc * (node.p_up * up + (1.0 - node.p_up) * down));
        }
        values = next;
    }
    Ok(PricingResult {
        method: Method::Tree,
        price: values[0],
        n_steps: Some(tree.n_steps),
        n_paths: None,
        std_error: None,
        node_count: Some(tree.node_count()),
        build_seconds: Some(tree.build_seconds),
        pricing_seconds: started.elapsed().as_secs_f64(),
    })
}

// ── CRR benchmark ───────────────────────────────────────────────────────

/// Classical recombining lattice with `u = e^{sigma sqrt(dt)}`, `d = 1/u`
/// and `p = (e^{r dt} - d)/(u - d)`.
pub fn price_crr(s0: f64, spec: &OptionSpec, sigma: f64, n_steps: usize) -> Result<PricingResult> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive (got {sigma})")));
    }
    if n_steps < 1 {
        return Err(Error::Config("CRR needs at least one step".into()));
    }
    if !(s0 > 0.0) {
        return Err(Error::Domain(format!("spot must be positive (got {s0})")));
    }
    let started = Instant::now();
    let dt = spec.maturity / n_steps as f64;
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let p = ((spec.rate * dt).exp() - d) / (u - d);
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ArbitrageViolation {
            state_id: None,
            msg: format!("CRR probability {p} outside (0, 1); vol too small for the rate"),
        });
    }
    let disc = (-spec.rate * dt).exp();

    // values[j] = option value with j down-moves so far.
    let n = n_steps as i32;
    let mut values: Vec<f64> = (0..=n)
        .map(|j| payoff(spec, s0 * u.powi(n - j) * d.powi(j)))
        .collect();
    for _ in 0..n_steps {
        for j in 0..values.len() - 1 {
            values[j] = disc * (p * values[j] + (1.0 - p) * values[j + 1]);
        }
        values.pop();
    }
    let mut result = PricingResult::bare(Method::Crr, values[0], started.elapsed().as_secs_f64());
    result.n_steps = Some(n_steps);
    Ok(result)
}

// ── Black-Scholes benchmark ─────────────────────────────────────────────

/// Cumulative standard normal via the Hart rational approximation
/// (double-precision branch), absolute error below 1e-14 — comfortably
/// inside the 1e-7 budget the closed form needs.
pub fn norm_cdf(x: f64) -> f64 {
    let z = x.abs();
    let c = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_475 {
            let num = (((((3.526_249_659_989_109e-2 * z + 0.700_383_064_443_688) * z
                + 6.373_962_203_531_650)
                * z
                + 33.912_866_078_383_00)
                * z
                + 112.079_291_497_871_0)
                * z
                + 221.213_596_169_931_0)
                * z
                + 220.206_867_912_376_0;
            let den = ((((((8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64) * z
                + 16.064_177_579_207_00)
                * z
                + 86.780_732_202_946_10)
                * z
                + 296.564_248_779_674_0)
                * z
                + 637.333_633_378_831_0)
                * z
                + 793.826_512_519_948_0)
                * z
                + 440.413_735_824_752_0;
            e * num / den
        } else {
            let b = z + 1.0 / (z + 2.0 / (z + 3.0 / (z + 4.0 / (z + 0.65))));
            e / (b * 2.506_628_274_631_000_5)
        }
    };
    if x <= 0.0 {
        c
    } else {
        1.0 - c
    }
}

/// Closed-form European price. A zero strike degenerates to the forward
/// contract: `s0` for a call, worthless for a put.
pub fn black_scholes(s0: f64, spec: &OptionSpec, sigma: f64) -> Result<PricingResult> {
    if !(s0 > 0.0) {
        return Err(Error::Domain(format!("spot must be positive (got {s0})")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive (got {sigma})")));
    }
    let started = Instant::now();
    let price = if spec.strike == 0.0 {
        match spec.kind {
            OptionKind::Call => s0,
            OptionKind::Put => 0.0,
        }
    } else {
        let sqrt_t = spec.maturity.sqrt();
        let d1 = ((s0 / spec.strike).ln() + (spec.rate + sigma * sigma / 2.0) * spec.maturity)
            / (sigma * sqrt_t);
        let d2 = d1 - sigma * sqrt_t;
        let df = spec.discount();
        match spec.kind {
            OptionKind::Call => s0 * norm_cdf(d1) - spec.strike * df * norm_cdf(d2),
            OptionKind::Put => spec.strike * df * norm_cdf(-d2) - s0 * norm_cdf(-d1),
        }
    };
    Ok(PricingResult::bare(
        Method::BlackScholes,
        price,
        started.elapsed().as_secs_f64(),
    ))
}

// ── Monte Carlo on the calibrated dynamics ──────────────────────────────

/// Simulates `n_paths` state-dependent binary paths using exactly the
/// tree builder's transition rule; moves are drawn with each state's
/// risk-neutral probability. Deterministic given `seed`: path `i` draws
/// from its own stream `(seed, i)`, so parallel equals serial.
#[allow(clippy::too_many_arguments)]
pub fn price_monte_carlo(
    table: &StateTable,
    s0: f64,
    spec: &OptionSpec,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    root_p_hint: f64,
    rule: TransitionRule,
) -> Result<PricingResult> {
    if n_paths < 100 {
        return Err(Error::Config(format!(
            "Monte Carlo needs at least 100 paths (got {n_paths})"
        )));
    }
    if n_steps < 1 {
        return Err(Error::Config("Monte Carlo needs at least one step".into()));
    }
    if !(s0 > 0.0) {
        return Err(Error::Domain(format!("spot must be positive (got {s0})")));
    }
    let work = n_paths as u64 * n_steps as u64;
    if work > MC_STEP_CAP {
        return Err(Error::ResourceLimit {
            what: "Monte Carlo paths x steps".into(),
            requested: work,
            limit: MC_STEP_CAP,
        });
    }
    let horizon = n_steps as f64 * table.dt_tree;
    if (horizon - spec.maturity).abs() > table.dt_tree / 2.0 {
        return Err(Error::SpecMismatch(format!(
            "simulation horizon {horizon} vs option maturity {} (more than half a step apart)",
            spec.maturity
        )));
    }
    if (spec.rate - table.r).abs() > 1e-12 {
        return Err(Error::SpecMismatch(format!(
            "option rate {} differs from the table's calibration rate {}",
            spec.rate, table.r
        )));
    }

    let started = Instant::now();
    let root_state = map_state(root_p_hint, table);
    let payoffs: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path_idx| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(path_idx as u64 + 1);
            let mut price = s0;
            let mut state_id = root_state;
            let mut history = MoveHistory::default();
            for _ in 0..n_steps {
                let state = table.state(state_id);
                let mv = if rng.gen::<f64>() < state.p_mmm {
                    price *= state.u;
                    Move::Up
                } else {
                    price *= state.d;
                    Move::Down
                };
                let (next_state, next_history) = rule.transition(state_id, &history, mv, table);
                state_id = next_state;
                history = next_history;
            }
            payoff(spec, price)
        })
        .collect();

    let disc = (-table.r * horizon).exp();
    let mean = payoffs.iter().sum::<f64>() / n_paths as f64;
    let var = payoffs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
        / (n_paths as f64 - 1.0);
    let std_error = disc * (var / n_paths as f64).sqrt();

    Ok(PricingResult {
        method: Method::Mc,
        price: disc * mean,
        n_steps: Some(n_steps),
        n_paths: Some(n_paths),
        std_error: Some(std_error),
        node_count: None,
        build_seconds: None,
        pricing_seconds: started.elapsed().as_secs_f64(),
    })
}

// ── Method comparison ───────────────────────────────────────────────────

/// One method measured against the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub method: Method,
    pub price: f64,
    pub absolute_difference: f64,
    /// `None` (JSON null) when the benchmark price is zero.
    pub relative_difference: Option<f64>,
}

/// Cross-method pricing comparison with timing diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub benchmark: PricingResult,
    pub comparisons: Vec<ComparisonEntry>,
    /// All inputs verbatim, for the record.
    pub results: Vec<PricingResult>,
}

/// Differences of every result against the one produced by
/// `benchmark_method` (first match wins).
pub fn compare_report(results: &[PricingResult], benchmark_method: Method) -> Result<ComparisonReport> {
    if results.len() < 2 {
        return Err(Error::Config(
            "comparison needs at least two pricing results".into(),
        ));
    }
    let benchmark = results
        .iter()
        .find(|r| r.method == benchmark_method)
        .ok_or_else(|| Error::Config(format!("no {benchmark_method:?} result to benchmark against")))?
        .clone();
    let comparisons = results
        .iter()
        .filter(|r| r.method != benchmark_method)
        .map(|r| ComparisonEntry {
            method: r.method,
            price: r.price,
            absolute_difference: r.price - benchmark.price,
            relative_difference: if benchmark.price != 0.0 {
                Some((r.price - benchmark.price) / benchmark.price)
            } else {
                None
            },
        })
        .collect();
    Ok(ComparisonReport {
        benchmark,
        comparisons,
        results: results.to_vec(),
    })
}
