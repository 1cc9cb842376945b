//! State calibration: from forest probabilities and realized returns to
//! arbitrage-free, moment-matched movement factors.
//!
//! The chain per state `s`:
//!
//! 1. rows are binned by predicted up-probability ([`bin_states`]);
//! 2. conditional per-minute moments `mu(s)`, `sigma2(s)` of the next-step
//!    log return are estimated per bin ([`conditional_moments`]);
//! 3. movement factors solve the two moment equations in closed form
//!    ([`solve_factors`]): `ln u = mu + sigma*sqrt((1-p)/p)`,
//!    `ln d = mu - sigma*sqrt(p/(1-p))` — substituting back reproduces both
//!    moments exactly;
//! 4. factors are rescaled from the per-minute grid to the tree step
//!    ([`scale_factors`]): drift linearly, volatility with the square root
//!    of the time ratio;
//! 5. the risk-neutral probability is fixed by the martingale condition
//!    `p*u + (1-p)*d = e^{r dt}` ([`mmm_probability`]), and
//!    [`calibrate_state`] searches the martingale-consistent `(u, d)`
//!    family for the best trade-off between staying close to the physical
//!    probability (Bernoulli KL) and matching the conditional variance.
//!
//! Every calibrated [`MarketState`] satisfies `0 < d < e^{r dt} < u` and
//! the martingale identity to 1e-12.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trading minutes per year used to annualize implied vols
/// (252 sessions x 390 minutes). The convention is configurable because
/// no single standard exists; this default treats only session minutes
/// as carrying variance.
pub const DEFAULT_MINUTES_PER_YEAR: f64 = 252.0 * 390.0;

/// One calibrated market state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub state_id: usize,
    /// Physical (forest) up-probability representative for the bin.
    pub p_rf: f64,
    /// Conditional mean log return per tree step.
    pub mu: f64,
    /// Conditional variance of the log return per tree step.
    pub sigma2: f64,
    pub u: f64,
    pub d: f64,
    /// Risk-neutral up-probability `(e^{r dt} - d) / (u - d)`.
    pub p_mmm: f64,
    /// Bernoulli KL divergence `D(p_mmm || p_rf)`.
    pub kl: f64,
    /// Per-step volatility of the calibrated binary move.
    pub implied_vol: f64,
    pub implied_vol_annualized: f64,
    pub n_samples: usize,
    /// True when the state inherited pooled global moments (sparse bin).
    pub pooled: bool,
    /// Achieved value of the calibration objective.
    pub objective: f64,
}

impl MarketState {
    /// Verifies the no-arbitrage bracket and the martingale identity.
    pub fn check_invariants(&self, r: f64, dt: f64) -> Result<()> {
        let fwd = (r * dt).exp();
        if !(0.0 < self.d && self.d < fwd && fwd < self.u) {
            return Err(Error::ArbitrageViolation {
                state_id: Some(self.state_id),
                msg: format!(
                    "bracket 0 < d < e^(r dt) < u violated: d={}, fwd={fwd}, u={}",
                    self.d, self.u
                ),
            });
        }
        let implied = (fwd - self.d) / (self.u - self.d);
        if (implied - self.p_mmm).abs() > 1e-12 {
            return Err(Error::Validation {
                row: None,
                msg: format!(
                    "state {}: stored p_mmm {} disagrees with (fwd-d)/(u-d) = {implied}",
                    self.state_id, self.p_mmm
                ),
            });
        }
        if self.kl < 0.0 {
            return Err(Error::Validation {
                row: None,
                msg: format!("state {}: negative KL {}", self.state_id, self.kl),
            });
        }
        Ok(())
    }
}

/// The calibrated state table plus the grid metadata it was built under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    pub states: Vec<MarketState>,
    pub n_bins: usize,
    pub bin_edges: Vec<f64>,
    /// Years per observation bar.
    pub dt_minute: f64,
    /// Years per tree step the factors are calibrated at.
    pub dt_tree: f64,
    /// Annualized continuously compounded risk-free rate.
    pub r: f64,
    pub w1: f64,
    pub w2: f64,
    pub minutes_per_year: f64,
    pub scaling_applied: bool,
}

impl StateTable {
    pub fn state(&self, id: usize) -> &MarketState {
        &self.states[id]
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Midpoint of the probability bin backing state `id`.
    pub fn bin_center(&self, id: usize) -> f64 {
        (self.bin_edges[id] + self.bin_edges[id + 1]) / 2.0
    }

    /// Mean of `|p_rf - p_mmm|` across states (reported, not asserted:
    /// its magnitude is data-dependent).
    pub fn mean_abs_prob_difference(&self) -> f64 {
        self.states
            .iter()
            .map(|s| (s.p_rf - s.p_mmm).abs())
            .sum::<f64>()
            / self.states.len() as f64
    }

    pub fn check_invariants(&self) -> Result<()> {
        for state in &self.states {
            state.check_invariants(self.r, self.dt_tree)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!(
                "cannot open state table {}: {e}",
                path.display()
            ))
        })?;
        let table: StateTable = serde_json::from_str(&json)?;
        table.check_invariants()?;
        Ok(table)
    }

    /// A demo table with `n_bins` states at the bin-center physical
    /// probabilities, a shared per-step volatility and zero drift. Handy
    /// for exercising the tree and Monte Carlo engines without running
    /// the data pipeline.
    pub fn uniform(n_bins: usize, sigma_step: f64, r: f64, dt: f64) -> Result<Self> {
        if n_bins < 1 {
            return Err(Error::Config("need at least one state".into()));
        }
        let states = (0..n_bins)
            .map(|i| {
                let p = (i as f64 + 0.5) / n_bins as f64;
                calibrate_state(
                    &StateInput {
                        state_id: i,
                        p_rf: p,
                        mu: 0.0,
                        sigma2: sigma_step * sigma_step,
                        n_samples: 0,
                        pooled: false,
                    },
                    r,
                    dt,
                    1.0,
                    1.0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let table = StateTable {
            states,
            n_bins,
            bin_edges: (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
            dt_minute: dt,
            dt_tree: dt,
            r,
            w1: 1.0,
            w2: 1.0,
            minutes_per_year: DEFAULT_MINUTES_PER_YEAR,
            scaling_applied: false,
        };
        table.check_invariants()?;
        Ok(table)
    }

    /// A one-state table with externally supplied factors. Used for
    /// benchmark comparisons (e.g. a CRR-parameter table) and tests.
    pub fn single_state(u: f64, d: f64, r: f64, dt: f64) -> Result<Self> {
        let p_mmm = mmm_probability(u, d, r, dt)?;
        if p_mmm <= 0.0 || p_mmm >= 1.0 {
            return Err(Error::ArbitrageViolation {
                state_id: Some(0),
                msg: "single-state table needs a strictly interior p_mmm".into(),
            });
        }
        let spread = (u / d).ln();
        let sigma2 = p_mmm * (1.0 - p_mmm) * spread * spread;
        let mu = p_mmm * u.ln() + (1.0 - p_mmm) * d.ln();
        let state = MarketState {
            state_id: 0,
            p_rf: p_mmm,
            mu,
            sigma2,
            u,
            d,
            p_mmm,
            kl: 0.0,
            implied_vol: sigma2.sqrt(),
            implied_vol_annualized: (sigma2 / dt).sqrt(),
            n_samples: 0,
            pooled: false,
            objective: 0.0,
        };
        Ok(StateTable {
            states: vec![state],
            n_bins: 1,
            bin_edges: vec![0.0, 1.0],
            dt_minute: dt,
            dt_tree: dt,
            r,
            w1: 1.0,
            w2: 1.0,
            minutes_per_year: DEFAULT_MINUTES_PER_YEAR,
            scaling_applied: false,
        })
    }
}

// ── Binning and moments ─────────────────────────────────────────────────

/// Assigns each probability to one of `n_bins` equal-width bins over
/// [0, 1]; `p = 1.0` falls in the top bin. Returns `(assignments, edges)`.
pub fn bin_states(probs: &[f64], n_bins: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if n_bins < 2 {
        return Err(Error::Config("state binning needs n_bins >= 2".into()));
    }
    let mut assignments = Vec::with_capacity(probs.len());
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        assignments.push(((p * n_bins as f64) as usize).min(n_bins - 1));
    }
    let edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    Ok((assignments, edges))
}

/// Per-state sample mean and unbiased variance of the next-step return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoments {
    pub mu: f64,
    /// Unbiased (n-1) variance; 0 when fewer than two samples.
    pub sigma2: f64,
    pub n: usize,
}

impl ConditionalMoments {
    /// Sparse or zero-variance states cannot back out factors on their own.
    pub fn is_degenerate(&self) -> bool {
        self.n <= 1 || self.sigma2 <= 0.0
    }
}

/// Groups `returns` by state assignment and computes per-state moments.
pub fn conditional_moments(
    returns: &[f64],
    assignments: &[usize],
    n_states: usize,
) -> Result<Vec<ConditionalMoments>> {
    if returns.len() != assignments.len() {
        return Err(Error::Shape {
            expected: assignments.len(),
            got: returns.len(),
        });
    }
    let mut sums = vec![(0.0f64, 0usize); n_states];
    for (&r, &s) in returns.iter().zip(assignments) {
        sums[s].0 += r;
        sums[s].1 += 1;
    }
    let mut out: Vec<ConditionalMoments> = sums
        .iter()
        .map(|&(sum, n)| ConditionalMoments {
            mu: if n > 0 { sum / n as f64 } else { 0.0 },
            sigma2: 0.0,
            n,
        })
        .collect();
    for (&r, &s) in returns.iter().zip(assignments) {
        let dev = r - out[s].mu;
        out[s].sigma2 += dev * dev;
    }
    for m in &mut out {
        m.sigma2 = if m.n > 1 {
            m.sigma2 / (m.n - 1) as f64
        } else {
            0.0
        };
    }
    Ok(out)
}

// ── Factor solving and scaling ──────────────────────────────────────────

/// Movement factors for one state before risk-neutral calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFactors {
    pub p_rf: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub u: f64,
    pub d: f64,
    /// Set once the factors have been rescaled to a different time step.
    pub scaled: bool,
}

/// Closed-form moment matching:
/// `ln u = mu + sigma*sqrt((1-p)/p)`, `ln d = mu - sigma*sqrt(p/(1-p))`.
///
/// Substituting back into the two moment equations reproduces `mu` and
/// `sigma2` identically: the probability-weighted mean telescopes and the
/// variance reduces to `p(1-p)(ln u - ln d)^2 = sigma2`.
pub fn solve_factors(p: f64, mu: f64, sigma2: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::DegenerateProbability(p));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateVolatility(sigma2));
    }
    let sigma = sigma2.sqrt();
    let ln_u = mu + sigma * ((1.0 - p) / p).sqrt();
    let ln_d = mu - sigma * (p / (1.0 - p)).sqrt();
    Ok((ln_u.exp(), ln_d.exp()))
}

impl StateFactors {
    pub fn solve(p_rf: f64, mu: f64, sigma2: f64) -> Result<Self> {
        let (u, d) = solve_factors(p_rf, mu, sigma2)?;
        Ok(Self {
            p_rf,
            mu,
            sigma2,
            u,
            d,
            scaled: false,
        })
    }
}

/// Rescales factors from one step length to another: drift scales with
/// the time ratio, volatility with its square root, and the factors are
/// re-solved at the new scale.
pub fn scale_factors(factors: &StateFactors, dt_from: f64, dt_to: f64) -> Result<StateFactors> {
    if !(dt_from > 0.0 && dt_to > 0.0) {
        return Err(Error::Domain(format!(
            "time steps must be positive (got {dt_from} -> {dt_to})"
        )));
    }
    let ratio = dt_to / dt_from;
    let mu = factors.mu * ratio;
    let sigma2 = factors.sigma2 * ratio;
    let (u, d) = solve_factors(factors.p_rf, mu, sigma2)?;
    Ok(StateFactors {
        p_rf: factors.p_rf,
        mu,
        sigma2,
        u,
        d,
        scaled: true,
    })
}

// ── Risk-neutral probability and KL ─────────────────────────────────────

/// `(e^{r dt} - d) / (u - d)` — the unique probability making the
/// discounted one-step price a martingale. Exactly 0 or 1 marks the
/// arbitrage boundary; a forward strictly outside `[d, u]` is an error.
pub fn mmm_probability(u: f64, d: f64, r: f64, dt: f64) -> Result<f64> {
    if !(u > d && d > 0.0) {
        return Err(Error::Domain(format!(
            "factors must satisfy u > d > 0 (got u={u}, d={d})"
        )));
    }
    let fwd = (r * dt).exp();
    if fwd < d || fwd > u {
        return Err(Error::ArbitrageViolation {
            state_id: None,
            msg: format!("forward {fwd} outside [d, u] = [{d}, {u}]"),
        });
    }
    Ok((fwd - d) / (u - d))
}

/// Bernoulli KL divergence `p ln(p/q) + (1-p) ln((1-p)/(1-q))` with the
/// convention `0 ln 0 = 0`. A boundary `q` with mismatched mass returns
/// `f64::INFINITY` rather than panicking.
pub fn kl_divergence_bernoulli(p: f64, q: f64) -> f64 {
    let term = |p_i: f64, q_i: f64| -> f64 {
        if p_i == 0.0 {
            0.0
        } else if q_i == 0.0 {
            f64::INFINITY
        } else {
            p_i * (p_i / q_i).ln()
        }
    };
    // Clamp away the -1e-17-style rounding residue near p == q.
    (term(p, q) + term(1.0 - p, 1.0 - q)).max(0.0)
}

// ── Per-state calibration ───────────────────────────────────────────────

/// Inputs to [`calibrate_state`].
#[derive(Debug, Clone, Copy)]
pub struct StateInput {
    pub state_id: usize,
    pub p_rf: f64,
    /// Conditional mean log return per tree step.
    pub mu: f64,
    /// Conditional variance per tree step.
    pub sigma2: f64,
    pub n_samples: usize,
    pub pooled: bool,
}

const GRID_POINTS: usize = 512;
const GOLDEN_TOL: f64 = 1e-10;

/// Calibrates one state onto the martingale constraint.
///
/// The moment-matched factors are always evaluated first; when their
/// implied risk-neutral probability already lies strictly inside (0, 1)
/// and no adjusted pair does better, they are returned unchanged. The
/// adjustment search runs over the one-parameter family
/// `ln u = a`, `ln d = (mu - p_rf * a) / (1 - p_rf)` — every member keeps
/// the physical-measure conditional mean at `mu`, and the family passes
/// exactly through the moment-matched point. For each feasible member the
/// martingale condition pins `p_mmm`, and the objective
/// `w1 * D_KL(p_mmm || p_rf) + w2 * ((sigma2_model - sigma2)/sigma2)^2`
/// is minimized by a coarse grid followed by golden-section refinement.
///
/// The search interval starts just above the feasibility threshold
/// `a_min = max(r dt, (mu - (1-p) r dt) / p)` — below it the family puts
/// the forward outside `(d, u)` — and extends to
/// `max(mu + 6 sigma, a_min + 6 sigma)`, so a feasible window exists even
/// when the scaled drift dwarfs the step volatility.
pub fn calibrate_state(
    input: &StateInput,
    r: f64,
    dt: f64,
    w1: f64,
    w2: f64,
) -> Result<MarketState> {
    if w1 < 0.0 || w2 < 0.0 || (w1 == 0.0 && w2 == 0.0) {
        return Err(Error::Config(
            "calibration weights must be non-negative and not both zero".into(),
        ));
    }
    if !(input.p_rf > 0.0 && input.p_rf < 1.0) {
        return Err(Error::DegenerateProbability(input.p_rf));
    }
    if !(input.sigma2 > 0.0) {
        return Err(Error::DegenerateVolatility(input.sigma2));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive (got {dt})")));
    }

    let p = input.p_rf;
    let mu = input.mu;
    let sigma2 = input.sigma2;
    let fwd = (r * dt).exp();
    let ln_fwd = r * dt;

    let objective = |u: f64, d: f64| -> Option<(f64, f64, f64)> {
        if !(d > 0.0 && d < fwd && fwd < u) {
            return None;
        }
        let p_mmm = (fwd - d) / (u - d);
        if !(p_mmm > 0.0 && p_mmm < 1.0) {
            return None;
        }
        let spread = (u / d).ln();
        let sigma2_model = p_mmm * (1.0 - p_mmm) * spread * spread;
        let cost = w1 * kl_divergence_bernoulli(p_mmm, p)
            + w2 * ((sigma2_model - sigma2) / sigma2).powi(2);
        Some((cost, p_mmm, sigma2_model))
    };

    // Mean-preserving down factor for a given ln u.
    let d_of = |a: f64| ((mu - p * a) / (1.0 - p)).exp();

    // Candidate 1: the moment-matched factors themselves.
    let (u_mm, d_mm) = solve_factors(p, mu, sigma2)?;
    let mm = objective(u_mm, d_mm).map(|(cost, p_mmm, s2)| (u_mm, d_mm, cost, p_mmm, s2));

    // Candidate 2: grid + golden-section over the constrained family.
    let sigma = sigma2.sqrt();
    let a_min = ln_fwd.max((mu - (1.0 - p) * ln_fwd) / p);
    let lo = a_min + 1e-8;
    let hi = (mu + 6.0 * sigma).max(a_min + 6.0 * sigma);
    let searched = if hi > lo {
        let eval = |a: f64| objective(a.exp(), d_of(a)).map(|(c, _, _)| c);
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..GRID_POINTS {
            let a = lo + step * i as f64;
            if let Some(cost) = eval(a) {
                if best.map_or(true, |(_, c)| cost < c) {
                    best = Some((i, cost));
                }
            }
        }
        best.and_then(|(i, _)| {
            let bracket_lo = lo + step * i.saturating_sub(1) as f64;
            let bracket_hi = lo + step * ((i + 1).min(GRID_POINTS - 1)) as f64;
            let a = golden_section(bracket_lo, bracket_hi, GOLDEN_TOL, |a| {
                eval(a).unwrap_or(f64::INFINITY)
            });
            let (u, d) = (a.exp(), d_of(a));
            objective(u, d).map(|(cost, p_mmm, s2)| (u, d, cost, p_mmm, s2))
        })
    } else {
        None
    };

    // Prefer the untouched moment-matched factors on (near-)ties.
    let chosen = match (mm, searched) {
        (Some(m), Some(s)) => {
            if m.2 <= s.2 + 1e-14 {
                Some(m)
            } else {
                Some(s)
            }
        }
        (Some(m), None) => Some(m),
        (None, s) => s,
    };

    let Some((u, d, cost, p_mmm, sigma2_model)) = chosen else {
        return Err(Error::CalibrationFailure {
            state_id: input.state_id,
            msg: format!(
                "no factors with p_mmm in (0,1): p_rf={p}, mu={mu}, sigma2={sigma2}, r*dt={ln_fwd}"
            ),
        });
    };

    Ok(MarketState {
        state_id: input.state_id,
        p_rf: p,
        mu,
        sigma2,
        u,
        d,
        p_mmm,
        kl: kl_divergence_bernoulli(p_mmm, p),
        implied_vol: sigma2_model.sqrt(),
        implied_vol_annualized: (sigma2_model / dt).sqrt(),
        n_samples: input.n_samples,
        pooled: input.pooled,
        objective: cost,
    })
}

/// Golden-section minimization on `[lo, hi]` to absolute tolerance `tol`.
fn golden_section(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    // Return the best point seen, not just the midpoint.
    if f(mid) <= f1.min(f2) {
        mid
    } else if f1 <= f2 {
        x1
    } else {
        x2
    }
}

// ── Whole-table calibration ─────────────────────────────────────────────

/// Parameters for [`calibrate_all`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub n_bins: usize,
    /// Annualized continuously compounded risk-free rate.
    pub r: f64,
    pub dt_minute: f64,
    pub dt_tree: f64,
    pub w1: f64,
    pub w2: f64,
    /// States with fewer samples inherit the pooled global moments.
    pub min_samples: usize,
    pub minutes_per_year: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self {
            n_bins: 20,
            r: 0.05,
            dt_minute: 1.0 / DEFAULT_MINUTES_PER_YEAR,
            dt_tree: (30.0 / 365.0) / 10.0,
            w1: 1.0,
            w2: 1.0,
            min_samples: 30,
            minutes_per_year: DEFAULT_MINUTES_PER_YEAR,
        }
    }
}

/// Runs the full per-state pipeline: bin, estimate moments, pool sparse
/// states, rescale to the tree step, calibrate.
///
/// `probs[i]` is the forest up-probability for row `i` and
/// `next_returns[i]` the realized next-step log return for the same row.
pub fn calibrate_all(
    probs: &[f64],
    next_returns: &[f64],
    params: &CalibrationParams,
) -> Result<StateTable> {
    if probs.len() != next_returns.len() {
        return Err(Error::Shape {
            expected: probs.len(),
            got: next_returns.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput("no rows to calibrate on".into()));
    }
    if !(params.dt_minute > 0.0 && params.dt_tree > 0.0) {
        return Err(Error::Config("time steps must be positive".into()));
    }

    let (assignments, bin_edges) = bin_states(probs, params.n_bins)?;
    let moments = conditional_moments(next_returns, &assignments, params.n_bins)?;

    // Pooled fallback moments over all rows.
    let pooled = conditional_moments(next_returns, &vec![0; next_returns.len()], 1)?[0];
    let any_self_sufficient = moments
        .iter()
        .any(|m| m.n >= params.min_samples && !m.is_degenerate());
    if !any_self_sufficient && pooled.is_degenerate() {
        return Err(Error::GlobalCalibration(format!(
            "every state is sparse and the pooled moments are degenerate \
             (n={}, sigma2={})",
            pooled.n, pooled.sigma2
        )));
    }

    // Representative physical probability per state: the mean predicted
    // probability inside the bin; empty bins fall back to the bin center.
    let mut prob_sums = vec![(0.0f64, 0usize); params.n_bins];
    for (&p, &s) in probs.iter().zip(&assignments) {
        prob_sums[s].0 += p;
        prob_sums[s].1 += 1;
    }

    let ratio = params.dt_tree / params.dt_minute;
    let mut states = Vec::with_capacity(params.n_bins);
    for (state_id, m) in moments.iter().enumerate() {
        let sparse = m.n < params.min_samples || m.is_degenerate();
        let (mu_min, sigma2_min, pooled_flag) = if sparse {
            if pooled.is_degenerate() {
                return Err(Error::GlobalCalibration(
                    "pooled fallback moments are degenerate".into(),
                ));
            }
            (pooled.mu, pooled.sigma2, true)
        } else {
            (m.mu, m.sigma2, false)
        };
        let p_rf = if prob_sums[state_id].1 > 0 {
            prob_sums[state_id].0 / prob_sums[state_id].1 as f64
        } else {
            (bin_edges[state_id] + bin_edges[state_id + 1]) / 2.0
        }
        .clamp(1e-6, 1.0 - 1e-6);

        let input = StateInput {
            state_id,
            p_rf,
            mu: mu_min * ratio,
            sigma2: sigma2_min * ratio,
            n_samples: m.n,
            pooled: pooled_flag,
        };
        states.push(calibrate_state(
            &input,
            params.r,
            params.dt_tree,
            params.w1,
            params.w2,
        )?);
    }

    let table = StateTable {
        states,
        n_bins: params.n_bins,
        bin_edges,
        dt_minute: params.dt_minute,
        dt_tree: params.dt_tree,
        r: params.r,
        w1: params.w1,
        w2: params.w2,
        minutes_per_year: params.minutes_per_year,
        scaling_applied: true,
    };
    table.check_invariants()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_states_examples() {
        let (a, edges) = bin_states(&[0.025, 1.0, 0.31, 0.35], 20).unwrap();
        assert_eq!(a, vec![0, 19, 6, 7]);
        assert_eq!(edges.len(), 21);
        assert!(matches!(bin_states(&[0.5], 1), Err(Error::Config(_))));
        assert!(matches!(bin_states(&[1.5], 20), Err(Error::Domain(_))));
    }

    #[test]
    fn bin_counts_concentrate_for_uniform_probs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let probs: Vec<f64> = (0..20_000).map(|_| rng.gen::<f64>()).collect();
        let (a, _) = bin_states(&probs, 20).unwrap();
        let mut counts = vec![0usize; 20];
        for s in a {
            counts[s] += 1;
        }
        let bound = 5.0 * 1000.0f64.sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 1000.0).abs() < bound,
                "bin {i} count {c} outside 1000 +/- {bound}"
            );
        }
    }

    #[test]
    fn moments_two_point_case() {
        let m = conditional_moments(&[0.001, -0.001], &[0, 0], 1).unwrap();
        assert!((m[0].mu - 0.0).abs() < 1e-18);
        assert!((m[0].sigma2 - 2e-6).abs() < 1e-18);
        assert_eq!(m[0].n, 2);
    }

    #[test]
    fn moments_constant_returns_degenerate() {
        let m = conditional_moments(&[0.002; 5], &[0; 5], 1).unwrap();
        assert_eq!(m[0].sigma2, 0.0);
        assert!(m[0].is_degenerate());
    }

    #[test]
    fn moments_recover_planted_state_drift() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(6);
        let drifts = [-3e-4, 0.0, 5e-4];
        let sigma = 1e-3;
        let mut returns = Vec::new();
        let mut states = Vec::new();
        for _ in 0..30_000 {
            let s = rng.gen_range(0..3usize);
            let z: f64 = {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            };
            returns.push(drifts[s] + sigma * z);
            states.push(s);
        }
        let moments = conditional_moments(&returns, &states, 3).unwrap();
        for (s, m) in moments.iter().enumerate() {
            let se = sigma / (m.n as f64).sqrt();
            assert!(
                (m.mu - drifts[s]).abs() < 3.0 * se,
                "state {s}: mu {} vs planted {}",
                m.mu,
                drifts[s]
            );
        }
    }

    #[test]
    fn solve_factors_symmetric_case() {
        let (u, d) = solve_factors(0.5, 0.0, 1e-4).unwrap();
        assert!((u - (0.01f64).exp()).abs() < 1e-15);
        assert!((d - (-0.01f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn solve_factors_asymmetric_closed_form() {
        // p = 0.8, mu = 0, sigma = 0.01: ln u = 0.005, ln d = -0.02;
        // mean 0.8*0.005 + 0.2*(-0.02) = 0, variance
        // 0.8*25e-6 + 0.2*4e-4 = 1e-4.
        let (u, d) = solve_factors(0.8, 0.0, 1e-4).unwrap();
        assert!((u.ln() - 0.005).abs() < 1e-15);
        assert!((d.ln() + 0.02).abs() < 1e-15);

        let (u, d) = solve_factors(0.5, 0.001, 1e-4).unwrap();
        assert!((u.ln() - 0.011).abs() < 1e-15);
        assert!((d.ln() + 0.009).abs() < 1e-15);
    }

    #[test]
    fn solve_factors_round_trip_and_guards() {
        let cases = [(0.3, 2e-4, 4e-6), (0.9, -1e-4, 1e-6), (0.05, 0.0, 2.5e-7)];
        for &(p, mu, s2) in &cases {
            let (u, d) = solve_factors(p, mu, s2).unwrap();
            let mean = p * u.ln() + (1.0 - p) * d.ln();
            let var = p * u.ln().powi(2) + (1.0 - p) * d.ln().powi(2) - mean * mean;
            assert!((mean - mu).abs() < 1e-12);
            assert!((var - s2).abs() < 1e-12);
            assert!(u > d);
        }
        assert!(matches!(
            solve_factors(0.0, 0.0, 1e-4),
            Err(Error::DegenerateProbability(_))
        ));
        assert!(matches!(
            solve_factors(1.0, 0.0, 1e-4),
            Err(Error::DegenerateProbability(_))
        ));
        assert!(matches!(
            solve_factors(0.5, 0.0, 0.0),
            Err(Error::DegenerateVolatility(_))
        ));
    }

    #[test]
    fn scaling_matches_square_root_of_time() {
        let f = StateFactors::solve(0.5, 0.0, 1e-4).unwrap();
        let dt_from = 0.00001018;
        let dt_to = 0.008219;
        let scaled = scale_factors(&f, dt_from, dt_to).unwrap();
        let mult = (scaled.u.ln() - scaled.d.ln()) / (f.u.ln() - f.d.ln());
        let expected = (807.8f64).sqrt();
        assert!(
            (mult / expected - 1.0).abs() < 0.005,
            "sigma multiplier {mult} vs {expected}"
        );
        assert!(scaled.scaled);
    }

    #[test]
    fn scaling_identity_and_round_trip() {
        let f = StateFactors::solve(0.7, 3e-4, 2e-6).unwrap();
        let same = scale_factors(&f, 0.001, 0.001).unwrap();
        assert!((same.u - f.u).abs() < 1e-12);
        assert!((same.d - f.d).abs() < 1e-12);

        let fwd = scale_factors(&f, 0.001, 0.08).unwrap();
        let back = scale_factors(&fwd, 0.08, 0.001).unwrap();
        assert!((back.u - f.u).abs() < 1e-10);
        assert!((back.d - f.d).abs() < 1e-10);

        assert!(scale_factors(&f, 0.0, 0.1).is_err());
    }

    #[test]
    fn mmm_probability_examples() {
        let p = mmm_probability(1.25, 0.8, 0.0, 1.0).unwrap();
        assert!((p - 0.2 / 0.45).abs() < 1e-12);

        // Log-symmetric factors around the forward, c = 1.01.
        let c: f64 = 1.01;
        let p = mmm_probability(c, 1.0 / c, 0.0, 1.0).unwrap();
        assert!((p - 0.497512).abs() < 1e-6);

        // Boundary: d equals the forward exactly.
        let p = mmm_probability(1.1, 1.0, 0.0, 0.25).unwrap();
        assert_eq!(p, 0.0);

        assert!(matches!(
            mmm_probability(1.1, 1.05, 0.0, 1.0),
            Err(Error::ArbitrageViolation { .. })
        ));
        assert!(matches!(
            mmm_probability(0.9, 1.1, 0.0, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence_bernoulli(0.37, 0.37), 0.0);
        let v = kl_divergence_bernoulli(0.5, 0.25);
        assert!((v - 0.143841).abs() < 1e-6);
        let v = kl_divergence_bernoulli(0.0, 0.5);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_divergence_bernoulli(0.5, 0.0).is_infinite());
        assert!(kl_divergence_bernoulli(0.5, 1.0).is_infinite());
        assert_eq!(kl_divergence_bernoulli(0.0, 0.0), 0.0);
    }

    fn plain_input(p_rf: f64, mu: f64, sigma2: f64) -> StateInput {
        StateInput {
            state_id: 0,
            p_rf,
            mu,
            sigma2,
            n_samples: 100,
            pooled: false,
        }
    }

    /// Drift making the moment-matched factors already martingale-exact.
    fn martingale_consistent_mu(p: f64, sigma: f64, r: f64, dt: f64) -> f64 {
        let a = ((1.0 - p) / p).sqrt();
        let b = (p / (1.0 - p)).sqrt();
        r * dt - (p * (sigma * a).exp() + (1.0 - p) * (-sigma * b).exp()).ln()
    }

    #[test]
    fn consistent_state_returns_unchanged_factors() {
        let (p, sigma, r, dt) = (0.65, 0.02, 0.05, 0.008219);
        let mu = martingale_consistent_mu(p, sigma, r, dt);
        let state = calibrate_state(&plain_input(p, mu, sigma * sigma), r, dt, 1.0, 1.0).unwrap();
        let (u_mm, d_mm) = solve_factors(p, mu, sigma * sigma).unwrap();
        assert_eq!(state.u, u_mm);
        assert_eq!(state.d, d_mm);
        assert!((state.p_mmm - p).abs() < 1e-9);
        assert!(state.objective < 1e-12, "objective {}", state.objective);
        state.check_invariants(r, dt).unwrap();
    }

    #[test]
    fn vol_only_objective_matches_variance() {
        // w1 = 0: the minimizer must match sigma2_model to sigma2.
        let cases = [(0.3, 0.0, 0.02), (0.55, 5e-4, 0.015), (0.8, -2e-4, 0.03)];
        for &(p, mu, sigma) in &cases {
            let state =
                calibrate_state(&plain_input(p, mu, sigma * sigma), 0.05, 0.008219, 0.0, 1.0)
                    .unwrap();
            let rel = (state.implied_vol.powi(2) - sigma * sigma).abs() / (sigma * sigma);
            assert!(
                rel < 1e-6,
                "p={p}: variance mismatch {rel} (implied vol {})",
                state.implied_vol
            );
        }
    }

    #[test]
    fn kl_only_objective_matches_grid_oracle() {
        // w2 = 0: compare against a brute-force 1000-point grid on the
        // same constrained family.
        let (p, mu, sigma, r, dt) = (0.25, 1e-4, 0.018, 0.05, 0.008219);
        let state = calibrate_state(&plain_input(p, mu, sigma * sigma), r, dt, 1.0, 0.0).unwrap();

        let fwd = (r * dt).exp();
        let a_min = (r * dt).max((mu - (1.0 - p) * r * dt) / p);
        let lo = a_min + 1e-8;
        let hi = (mu + 6.0 * sigma).max(a_min + 6.0 * sigma);
        let mut best = f64::INFINITY;
        let n = 1000;
        for i in 0..n {
            let a = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let d = ((mu - p * a) / (1.0 - p)).exp();
            let u = a.exp();
            if d > 0.0 && d < fwd && fwd < u {
                let pm = (fwd - d) / (u - d);
                if pm > 0.0 && pm < 1.0 {
                    best = best.min(kl_divergence_bernoulli(pm, p));
                }
            }
        }
        assert!(
            state.kl <= best + 1e-9,
            "optimizer KL {} worse than grid {best}",
            state.kl
        );
    }

    #[test]
    fn extreme_drift_still_calibrates_at_the_boundary() {
        // A drift wildly inconsistent with the risk-free forward forces an
        // extreme (but valid) risk-neutral probability: the search window
        // is anchored at the feasibility threshold, so a solution exists.
        let input = plain_input(0.5, 0.5, 1e-10);
        let state = calibrate_state(&input, 0.0, 0.008219, 1.0, 1.0).unwrap();
        state.check_invariants(0.0, 0.008219).unwrap();
        assert!(state.p_mmm > 0.0 && state.p_mmm < 1.0);
        // Against p_rf = 0.5 the divergence tops out at ln 2; a drastic
        // measure change should land near that ceiling.
        assert!(state.kl > 0.5, "measure change should be drastic: {}", state.kl);
    }

    #[test]
    fn weight_guards() {
        let input = plain_input(0.5, 0.0, 1e-4);
        assert!(matches!(
            calibrate_state(&input, 0.0, 0.01, 0.0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            calibrate_state(&input, 0.0, 0.01, -1.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kl_tracks_probability_distance_across_states() {
        // Same dynamics, sweeping p_rf: larger |p_rf - p_mmm| must come
        // with larger KL (positive Spearman correlation).
        let (mu, sigma, r, dt) = (0.0, 0.02, 0.05, 0.008219);
        let mut pairs = Vec::new();
        for i in 1..=19 {
            let p = i as f64 / 20.0;
            let state =
                calibrate_state(&plain_input(p, mu, sigma * sigma), r, dt, 1.0, 1.0).unwrap();
            pairs.push(((state.p_rf - state.p_mmm).abs(), state.kl));
        }
        let rho = spearman(&pairs);
        assert!(rho > 0.0, "Spearman correlation {rho} not positive");
    }

    fn spearman(pairs: &[(f64, f64)]) -> f64 {
        let rank = |values: Vec<f64>| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..values.len()).collect();
            idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
            let mut out = vec![0.0; values.len()];
            for (r, &i) in idx.iter().enumerate() {
                out[i] = r as f64;
            }
            out
        };
        let xs = rank(pairs.iter().map(|p| p.0).collect());
        let ys = rank(pairs.iter().map(|p| p.1).collect());
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn calibrate_all_produces_valid_bracketed_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(10);
        let n = 20_000;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let returns: Vec<f64> = probs
            .iter()
            .map(|&p| {
                let z: f64 = {
                    let u1: f64 = 1.0 - rng.gen::<f64>();
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                };
                (p - 0.5) * 4e-4 + 8e-4 * z
            })
            .collect();
        let params = CalibrationParams::default();
        let table = calibrate_all(&probs, &returns, &params).unwrap();
        assert_eq!(table.n_states(), 20);
        let fwd = (params.r * params.dt_tree).exp();
        for s in &table.states {
            assert!(0.0 < s.d && s.d < fwd && fwd < s.u, "state {}", s.state_id);
            let lhs = s.p_mmm * s.u + (1.0 - s.p_mmm) * s.d;
            assert!((lhs - fwd).abs() < 1e-12);
        }
        assert!(table.mean_abs_prob_difference() >= 0.0);
    }

    #[test]
    fn calibrate_all_forced_pooling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let n = 2_000;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let returns: Vec<f64> = (0..n).map(|_| 1e-3 * (rng.gen::<f64>() - 0.5)).collect();
        let params = CalibrationParams {
            min_samples: usize::MAX,
            ..CalibrationParams::default()
        };
        let table = calibrate_all(&probs, &returns, &params).unwrap();
        assert!(table.states.iter().all(|s| s.pooled));
        // Pooled moments mean identical (mu, sigma2) everywhere.
        let first = &table.states[0];
        for s in &table.states[1..] {
            assert_eq!(s.mu, first.mu);
            assert_eq!(s.sigma2, first.sigma2);
        }
    }

    #[test]
    fn calibrate_all_rejects_degenerate_pool() {
        let probs = vec![0.4; 500];
        let returns = vec![0.0; 500]; // zero variance everywhere
        let err = calibrate_all(&probs, &returns, &CalibrationParams::default()).unwrap_err();
        assert!(matches!(err, Error::GlobalCalibration(_)), "{err}");
    }

    #[test]
    fn state_table_json_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(14);
        let n = 5_000;
        let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let returns: Vec<f64> = (0..n).map(|_| 1.5e-3 * (rng.gen::<f64>() - 0.5)).collect();
        let table = calibrate_all(&probs, &returns, &CalibrationParams::default()).unwrap();
        let json = table.to_json().unwrap();
        let reloaded: StateTable = serde_json::from_str(&json).unwrap();
        assert_eq!(table, reloaded);
    }

    #[test]
    fn single_state_table_is_consistent() {
        let table = StateTable::single_state(1.02, 0.985, 0.05, 0.01).unwrap();
        table.check_invariants().unwrap();
        assert_eq!(table.n_states(), 1);
    }
}
