//! File-based pipeline orchestration behind the `microtree` binary.
//!
//! Each stage reads its inputs from disk, writes one inspectable artifact
//! and returns the in-memory result: bars CSV → features CSV → model JSON
//! + evaluation JSON → state-table JSON → tree JSON → pricing JSON →
//! figure-data CSVs. Every stage is deterministic under the configured
//! seed, so artifacts are reproducible byte for byte (pricing reports
//! aside, which embed wall-clock timings).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate_all, CalibrationParams, StateTable, DEFAULT_MINUTES_PER_YEAR,
};
use crate::error::{Error, Result};
use crate::features::{build_features, FeatureMatrix, FeatureRow, col};
use crate::forest::{
    calibration_curve, classification_metrics, cross_validate, evaluate_auc, roc_points, train,
    EvalReport, Forest, ForestConfig,
};
use crate::market_data::{
    load_bars_path, summarize, BarSeries, GeneratorConfig, SummaryStats,
};
use crate::pricing::{
    black_scholes, compare_report, price_crr, price_monte_carlo, price_tree, Method, OptionKind,
    OptionSpec, PricingResult,
};
use crate::tree::{
    build_tree, AggregationConfig, PricingTree, TransitionRule, TreeBuildConfig, DEFAULT_NODE_CAP,
};

// ── Configuration ───────────────────────────────────────────────────────

/// Artifact locations. Relative paths resolve against the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    pub bars: PathBuf,
    pub summary: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub eval_report: PathBuf,
    pub state_table: PathBuf,
    pub tree: PathBuf,
    pub price_report: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PipelinePaths {
    fn default() -> Self {
        Self {
            bars: "bars.csv".into(),
            summary: "summary.json".into(),
            features: "features.csv".into(),
            model: "model.json".into(),
            eval_report: "eval_report.json".into(),
            state_table: "state_table.json".into(),
            tree: "tree.json".into(),
            price_report: "price_report.json".into(),
            report_dir: "report".into(),
        }
    }
}

impl PipelinePaths {
    /// All artifacts rooted in one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let defaults = Self::default();
        Self {
            bars: dir.join(defaults.bars),
            summary: dir.join(defaults.summary),
            features: dir.join(defaults.features),
            model: dir.join(defaults.model),
            eval_report: dir.join(defaults.eval_report),
            state_table: dir.join(defaults.state_table),
            tree: dir.join(defaults.tree),
            price_report: dir.join(defaults.price_report),
            report_dir: dir.join(defaults.report_dir),
        }
    }
}

/// Calibration knobs exposed to the CLI (time steps are derived from the
/// option terms and tree depth at run time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub n_bins: usize,
    pub w1: f64,
    pub w2: f64,
    pub min_samples: usize,
    pub minutes_per_year: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            n_bins: 20,
            w1: 1.0,
            w2: 1.0,
            min_samples: 30,
            minutes_per_year: DEFAULT_MINUTES_PER_YEAR,
        }
    }
}

/// Tree-construction knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeSettings {
    pub steps: usize,
    pub root_p_hint: f64,
    /// Momentum nudge of the child state hint; 0 = state frozen per path.
    pub epsilon: f64,
    /// Per-level node cap; `None` disables aggregation.
    pub aggregate_max_nodes: Option<usize>,
    pub w_price: f64,
    pub w_hist: f64,
    pub max_total_nodes: u64,
}

impl Default for TreeSettings {
    fn default() -> Self {
        Self {
            steps: 10,
            root_p_hint: 0.5,
            epsilon: 0.0,
            aggregate_max_nodes: None,
            w_price: 1.0,
            w_hist: 0.1,
            max_total_nodes: DEFAULT_NODE_CAP,
        }
    }
}

/// Option terms for the pricing commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptionSettings {
    pub kind: OptionKind,
    pub spot: f64,
    pub strike: f64,
    /// Calendar days to expiry; maturity in years is `days / 365`.
    pub days: f64,
    pub rate: f64,
    /// Annualized volatility for the CRR / Black-Scholes benchmarks.
    pub vol: f64,
}

impl Default for OptionSettings {
    fn default() -> Self {
        Self {
            kind: OptionKind::Call,
            spot: 600.0,
            strike: 600.0,
            days: 30.0,
            rate: 0.05,
            vol: 0.243,
        }
    }
}

impl OptionSettings {
    pub fn maturity(&self) -> f64 {
        self.days / 365.0
    }

    pub fn spec(&self) -> Result<OptionSpec> {
        OptionSpec::new(self.kind, self.strike, self.maturity(), self.rate)
    }
}

/// The one declarative configuration driving every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    /// Global seed: the generator, the forest, label shuffling and Monte
    /// Carlo all derive their streams from it.
    pub seed: u64,
    pub paths: PipelinePaths,
    pub generator: GeneratorConfig,
    pub forest: ForestConfig,
    pub calibration: CalibrationSettings,
    pub tree: TreeSettings,
    pub option: OptionSettings,
    pub cv_folds: usize,
    pub holdout_fraction: f64,
    pub calibration_curve_bins: usize,
    pub mc_paths: usize,
    /// Destroys the label signal before training (permutation control).
    pub shuffle_labels: bool,
}

impl PipelineConfig {
    pub fn with_defaults() -> Self {
        Self {
            cv_folds: 5,
            holdout_fraction: 0.2,
            calibration_curve_bins: 10,
            mc_paths: 200_000,
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("cannot open config {}: {e}", path.display()))
        })?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        config.fill_zero_defaults();
        Ok(config)
    }

    /// TOML `default` gives zero for missing numeric fields on nested
    /// structs created via `Default::default()`; normalize the handful of
    /// fields where zero is not a usable value.
    fn fill_zero_defaults(&mut self) {
        if self.cv_folds == 0 {
            self.cv_folds = 5;
        }
        if self.holdout_fraction <= 0.0 {
            self.holdout_fraction = 0.2;
        }
        if self.calibration_curve_bins == 0 {
            self.calibration_curve_bins = 10;
        }
        if self.mc_paths == 0 {
            self.mc_paths = 200_000;
        }
    }

    /// Forest configuration with the global seed applied.
    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            seed: self.seed,
            ..self.forest.clone()
        }
    }

    /// Time steps implied by the option terms and the tree depth.
    pub fn calibration_params(&self) -> CalibrationParams {
        CalibrationParams {
            n_bins: self.calibration.n_bins,
            r: self.option.rate,
            dt_minute: 1.0 / self.calibration.minutes_per_year,
            dt_tree: self.option.maturity() / self.tree.steps as f64,
            w1: self.calibration.w1,
            w2: self.calibration.w2,
            min_samples: self.calibration.min_samples,
            minutes_per_year: self.calibration.minutes_per_year,
        }
    }

    pub fn tree_build_config(&self) -> TreeBuildConfig {
        TreeBuildConfig {
            n_steps: self.tree.steps,
            r: self.option.rate,
            dt: self.option.maturity() / self.tree.steps as f64,
            root_p_hint: self.tree.root_p_hint,
            rule: TransitionRule {
                epsilon: self.tree.epsilon,
            },
            aggregation: self.tree.aggregate_max_nodes.map(|max| AggregationConfig {
                max_nodes_per_level: max,
                w_price: self.tree.w_price,
                w_hist: self.tree.w_hist,
            }),
            max_total_nodes: self.tree.max_total_nodes,
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

// ── Commands ────────────────────────────────────────────────────────────

/// Generates synthetic bars and writes the canonical CSV.
pub fn cmd_synth(config: &PipelineConfig) -> Result<BarSeries> {
    let series = crate::market_data::synthesize_bars(&config.generator, config.seed)?;
    ensure_parent(&config.paths.bars)?;
    series.write_csv_path(&config.paths.bars)?;
    Ok(series)
}

/// Validates an external bar CSV, writes it back in canonical form and
/// emits the summary-statistics JSON.
pub fn cmd_ingest(
    config: &PipelineConfig,
    input: &Path,
    symbol: &str,
) -> Result<(BarSeries, SummaryStats)> {
    let series = load_bars_path(input, symbol)?;
    let stats = summarize(&series)?;
    ensure_parent(&config.paths.bars)?;
    series.write_csv_path(&config.paths.bars)?;
    ensure_parent(&config.paths.summary)?;
    std::fs::write(
        &config.paths.summary,
        serde_json::to_string_pretty(&stats)?,
    )?;
    Ok((series, stats))
}

/// Builds the feature matrix from the bar artifact and writes the audit
/// CSV.
pub fn cmd_features(config: &PipelineConfig) -> Result<FeatureMatrix> {
    let series = load_bars_path(&config.paths.bars, "bars")?;
    let matrix = build_features(&series)?;
    ensure_parent(&config.paths.features)?;
    matrix.write_csv_path(&config.paths.features)?;
    Ok(matrix)
}

/// One feature's share of the total impurity decrease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub feature: String,
    pub importance: f64,
}

/// Model evaluation artifact: held-out metrics, walk-forward CV and the
/// final model's importances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(flatten)]
    pub eval: EvalReport,
    pub importances: Vec<ImportanceEntry>,
    pub n_samples: usize,
    pub class_balance: f64,
    pub shuffled_labels: bool,
}

/// Trains the forest: walk-forward CV on the full matrix, threshold and
/// calibration metrics on a chronological holdout, final model on all
/// rows. Writes the model file and the evaluation report.
pub fn cmd_train(config: &PipelineConfig) -> Result<TrainReport> {
    let series = load_bars_path(&config.paths.bars, "bars")?;
    let mut matrix = build_features(&series)?;
    if config.shuffle_labels {
        matrix = shuffle_labels(&matrix, config.seed);
    }
    let forest_config = config.forest_config();

    let cv = cross_validate(&matrix, &forest_config, config.cv_folds)?;

    let split = ((matrix.len() as f64) * (1.0 - config.holdout_fraction)).round() as usize;
    if split == 0 || split >= matrix.len() {
        return Err(Error::InsufficientData {
            needed: 10,
            got: matrix.len(),
        });
    }
    let train_slice = matrix.slice(0..split);
    let test_slice = matrix.slice(split..matrix.len());
    let holdout_forest = train(&train_slice, &forest_config)?;
    let scores = holdout_forest.predict_matrix(&test_slice)?;
    let labels = test_slice.labels();
    let holdout_auc = evaluate_auc(&scores, &labels)?;
    let metrics = classification_metrics(&scores, &labels);
    let calibration_points =
        calibration_curve(&scores, &labels, config.calibration_curve_bins)?;

    let final_forest = train(&matrix, &forest_config)?;
    ensure_parent(&config.paths.model)?;
    final_forest.save(&config.paths.model)?;

    let importances = final_forest
        .feature_importance()
        .into_iter()
        .map(|(feature, importance)| ImportanceEntry {
            feature,
            importance,
        })
        .collect();

    let report = TrainReport {
        eval: EvalReport::assemble(holdout_auc, metrics, cv, calibration_points),
        importances,
        n_samples: matrix.len(),
        class_balance: final_forest.class_balance,
        shuffled_labels: config.shuffle_labels,
    };
    ensure_parent(&config.paths.eval_report)?;
    std::fs::write(
        &config.paths.eval_report,
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Fisher–Yates permutation of the labels only; features stay in place.
fn shuffle_labels(matrix: &FeatureMatrix, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // keep clear of the per-tree streams
    let mut rows: Vec<FeatureRow> = matrix.rows().to_vec();
    let mut labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    for (row, label) in rows.iter_mut().zip(labels) {
        row.label = label;
    }
    FeatureMatrix::from_rows(rows)
}

/// Calibrates the state table from the bars and the trained model.
pub fn cmd_calibrate(config: &PipelineConfig) -> Result<StateTable> {
    let series = load_bars_path(&config.paths.bars, "bars")?;
    let matrix = build_features(&series)?;
    let forest = Forest::load(&config.paths.model)?;
    let probs = forest.predict_matrix(&matrix)?;
    let table = calibrate_all(&probs, &matrix.next_returns(), &config.calibration_params())?;
    ensure_parent(&config.paths.state_table)?;
    table.save(&config.paths.state_table)?;
    Ok(table)
}

/// Builds the pricing tree from the state-table artifact and dumps it.
pub fn cmd_build_tree(config: &PipelineConfig) -> Result<PricingTree> {
    let table = StateTable::load(&config.paths.state_table)?;
    let tree = build_tree(config.option.spot, &table, &config.tree_build_config())?;
    ensure_parent(&config.paths.tree)?;
    tree.save_dump(&config.paths.tree)?;
    Ok(tree)
}

/// Pricing engine selector for [`cmd_price`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceMethod {
    Bs,
    Crr,
    Tree,
    Mc,
    /// Tree and Monte Carlo against the Black-Scholes benchmark.
    Compare,
}

/// Prices the configured option and writes the pricing report JSON.
pub fn cmd_price(config: &PipelineConfig, method: PriceMethod) -> Result<serde_json::Value> {
    let spec = config.option.spec()?;
    let opt = &config.option;
    let value = match method {
        PriceMethod::Bs => serde_json::to_value(black_scholes(opt.spot, &spec, opt.vol)?)?,
        PriceMethod::Crr => {
            serde_json::to_value(price_crr(opt.spot, &spec, opt.vol, config.tree.steps)?)?
        }
        PriceMethod::Tree => {
            let table = StateTable::load(&config.paths.state_table)?;
            let tree = build_tree(opt.spot, &table, &config.tree_build_config())?;
            serde_json::to_value(price_tree(&tree, &spec)?)?
        }
        PriceMethod::Mc => {
            let table = StateTable::load(&config.paths.state_table)?;
            serde_json::to_value(price_monte_carlo(
                &table,
                opt.spot,
                &spec,
                config.tree.steps,
                config.mc_paths,
                config.seed,
                config.tree.root_p_hint,
                TransitionRule {
                    epsilon: config.tree.epsilon,
                },
            )?)?
        }
        PriceMethod::Compare => {
            let table = StateTable::load(&config.paths.state_table)?;
            let tree = build_tree(opt.spot, &table, &config.tree_build_config())?;
            let results: Vec<PricingResult> = vec![
                price_tree(&tree, &spec)?,
                price_monte_carlo(
                    &table,
                    opt.spot,
                    &spec,
                    config.tree.steps,
                    config.mc_paths,
                    config.seed,
                    config.tree.root_p_hint,
                    TransitionRule {
                        epsilon: config.tree.epsilon,
                    },
                )?,
                black_scholes(opt.spot, &spec, opt.vol)?,
            ];
            serde_json::to_value(compare_report(&results, Method::BlackScholes)?)?
        }
    };
    ensure_parent(&config.paths.price_report)?;
    std::fs::write(
        &config.paths.price_report,
        serde_json::to_string_pretty(&value)?,
    )?;
    Ok(value)
}

/// Emits the figure-data bundle: one CSV per panel (no rendering).
///
/// Files written into `paths.report_dir`:
/// `returns_hist.csv`, `volume_profile.csv`, `ofi_hist.csv`, `roc.csv`,
/// `calibration.csv`, `factors.csv`, `kl_divergence.csv`.
pub fn cmd_report(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    for (path, what) in [
        (&config.paths.bars, "bar CSV (run `synth` or `ingest`)"),
        (&config.paths.model, "model JSON (run `train`)"),
        (&config.paths.state_table, "state table JSON (run `calibrate`)"),
    ] {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} not found at {}",
                what,
                path.display()
            )));
        }
    }

    let series = load_bars_path(&config.paths.bars, "bars")?;
    let matrix = build_features(&series)?;
    let forest = Forest::load(&config.paths.model)?;
    let table = StateTable::load(&config.paths.state_table)?;
    let scores = forest.predict_matrix(&matrix)?;
    let labels = matrix.labels();

    let dir = &config.paths.report_dir;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    // Panel: return histogram against a fitted normal.
    {
        let returns = series.log_returns();
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let sd = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let lo = mean - 5.0 * sd;
        let hi = mean + 5.0 * sd;
        let bins = 81usize;
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &r in &returns {
            if r >= lo && r < hi {
                counts[((r - lo) / width) as usize] += 1;
            }
        }
        let path = dir.join("returns_hist.csv");
        let mut out = String::from("bin_center,count,normal_count\n");
        for (i, &count) in counts.iter().enumerate() {
            let center = lo + (i as f64 + 0.5) * width;
            let z = (center - mean) / sd;
            let normal = n * width * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            out.push_str(&format!("{center},{count},{normal}\n"));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    // Panel: intraday volume profile.
    {
        let mut sums: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
        for bar in series.bars() {
            let entry = sums
                .entry(crate::market_data::minute_of_day(bar.timestamp))
                .or_insert((0.0, 0));
            entry.0 += bar.volume as f64;
            entry.1 += 1;
        }
        let path = dir.join("volume_profile.csv");
        let mut out = String::from("minute_of_day,mean_volume\n");
        for (minute, (sum, count)) in sums {
            out.push_str(&format!("{minute},{}\n", sum / count as f64));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    // Panel: OFI histogram.
    {
        let ofi: Vec<f64> = matrix.rows().iter().map(|r| r.predictors[col::OFI]).collect();
        let max_abs = ofi.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        let bins = 51usize;
        let width = 2.0 * max_abs / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in &ofi {
            let idx = (((v + max_abs) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let path = dir.join("ofi_hist.csv");
        let mut out = String::from("bin_center,count\n");
        for (i, &count) in counts.iter().enumerate() {
            let center = -max_abs + (i as f64 + 0.5) * width;
            out.push_str(&format!("{center},{count}\n"));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    // Panel: ROC curve.
    {
        let points = roc_points(&scores, &labels)?;
        let path = dir.join("roc.csv");
        let mut out = String::from("fpr,tpr,threshold\n");
        for (fpr, tpr, thr) in points {
            out.push_str(&format!("{fpr},{tpr},{thr}\n"));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    // Panel: probability calibration.
    {
        let points = calibration_curve(&scores, &labels, config.calibration_curve_bins)?;
        let path = dir.join("calibration.csv");
        let mut out = String::from("mean_predicted,observed_frequency,count\n");
        for p in points {
            out.push_str(&format!(
                "{},{},{}\n",
                p.mean_predicted, p.observed_frequency, p.count
            ));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    // Panel: state factors against physical probability.
    {
        let path = dir.join("factors.csv");
        let mut out = String::from(
            "state_id,p_rf,u,d,p_mmm,implied_vol,implied_vol_annualized,kl,n_samples\n",
        );
        for s in &table.states {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.state_id,
                s.p_rf,
                s.u,
                s.d,
                s.p_mmm,
                s.implied_vol,
                s.implied_vol_annualized,
                s.kl,
                s.n_samples
            ));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    // Panel: measure-change cost against probability distance.
    {
        let path = dir.join("kl_divergence.csv");
        let mut out = String::from("state_id,abs_prob_difference,kl\n");
        for s in &table.states {
            out.push_str(&format!(
                "{},{},{}\n",
                s.state_id,
                (s.p_rf - s.p_mmm).abs(),
                s.kl
            ));
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let config = PipelineConfig::with_defaults();
        let text = toml::to_string(&config).unwrap();
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let text = r#"
            seed = 9
            [option]
            spot = 500.0
            strike = 510.0
        "#;
        let mut config: PipelineConfig = toml::from_str(text).unwrap();
        config.fill_zero_defaults();
        assert_eq!(config.seed, 9);
        assert_eq!(config.option.spot, 500.0);
        assert_eq!(config.option.strike, 510.0);
        assert_eq!(config.mc_paths, 200_000);
        assert_eq!(config.tree.steps, 10);
    }

    #[test]
    fn derived_time_steps() {
        let config = PipelineConfig::with_defaults();
        let params = config.calibration_params();
        assert!((params.dt_tree - (30.0 / 365.0) / 10.0).abs() < 1e-15);
        assert!((params.dt_minute - 1.0 / DEFAULT_MINUTES_PER_YEAR).abs() < 1e-18);
    }
}
