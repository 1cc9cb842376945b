//! Thin command-line front end over [`microtree::pipeline`]: parses flags,
//! merges them onto the declarative config and dispatches. All real work
//! lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microtree::market_data::SessionTemplate;
use microtree::pipeline::{self, PipelineConfig, PriceMethod};
use microtree::pricing::OptionKind;

#[derive(Parser)]
#[command(
    name = "microtree",
    about = "Microstructure-aware binomial-tree option pricing pipeline",
    version
)]
struct Cli {
    /// Declarative TOML config; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed driving every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root directory for all default artifact paths.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic minute-bar CSV.
    Synth(SynthArgs),
    /// Validate an external bar CSV and write it in canonical form.
    Ingest(IngestArgs),
    /// Build the 17-column feature matrix CSV.
    Features(FeaturesArgs),
    /// Train the random forest and write model + evaluation report.
    Train(TrainArgs),
    /// Calibrate the arbitrage-free state table.
    Calibrate(CalibrateArgs),
    /// Construct the pricing tree and dump it as JSON.
    BuildTree(BuildTreeArgs),
    /// Price the configured option.
    Price(PriceArgs),
    /// Emit figure-data CSVs from the existing artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of bars to generate.
    #[arg(long)]
    bars: Option<usize>,
    #[arg(long)]
    base_price: Option<f64>,
    #[arg(long)]
    minute_vol: Option<f64>,
    /// Planted OFI signal strength in [0, 1).
    #[arg(long)]
    ofi_signal: Option<f64>,
    #[arg(long)]
    u_shape: Option<f64>,
    /// Session template: us_equity or continuous.
    #[arg(long)]
    session: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Input CSV with header timestamp,open,high,low,close,volume,num_ticks.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "INGEST")]
    symbol: String,
    /// Canonical output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    bars: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bars: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Permutation control: shuffle labels before training.
    #[arg(long)]
    shuffle_labels: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    bars: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    min_samples: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    /// Calendar days to expiry (sets the tree step together with --steps).
    #[arg(long)]
    days: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct BuildTreeArgs {
    #[arg(long)]
    state_table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    spot: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    root_p: Option<f64>,
    /// Momentum nudge for child states (0 = frozen state per path).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Cluster each level down to this many nodes.
    #[arg(long)]
    aggregate: Option<usize>,
    /// Hard cap on total node count.
    #[arg(long)]
    max_nodes: Option<u64>,
}

#[derive(Args)]
struct PriceArgs {
    /// bs | crr | tree | mc | compare
    #[arg(long, default_value = "compare")]
    method: String,
    /// call | put
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    spot: Option<f64>,
    #[arg(long)]
    strike: Option<f64>,
    #[arg(long)]
    days: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    vol: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    state_table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    bars: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    state_table: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> microtree::Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::with_defaults(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.artifacts {
        config.paths = pipeline::PipelinePaths::in_dir(dir);
    }

    match cli.command {
        Command::Synth(args) => {
            apply(&mut config.generator.n_bars, args.bars);
            apply(&mut config.generator.base_price, args.base_price);
            apply(&mut config.generator.minute_vol, args.minute_vol);
            apply(&mut config.generator.ofi_signal_strength, args.ofi_signal);
            apply(&mut config.generator.u_shape_amplitude, args.u_shape);
            if let Some(session) = args.session {
                config.generator.session = parse_session(&session)?;
            }
            apply(&mut config.paths.bars, args.out);
            let series = pipeline::cmd_synth(&config)?;
            println!(
                "wrote {} bars to {}",
                series.len(),
                config.paths.bars.display()
            );
        }
        Command::Ingest(args) => {
            apply(&mut config.paths.bars, args.out);
            let (series, stats) = pipeline::cmd_ingest(&config, &args.input, &args.symbol)?;
            println!(
                "validated {} bars -> {} (summary: {})",
                series.len(),
                config.paths.bars.display(),
                config.paths.summary.display()
            );
            println!(
                "close mean {:.4}, log-return std {:.6}",
                stats.close.mean, stats.log_returns.stats.std
            );
        }
        Command::Features(args) => {
            apply(&mut config.paths.bars, args.bars);
            apply(&mut config.paths.features, args.out);
            let matrix = pipeline::cmd_features(&config)?;
            println!(
                "wrote {} rows x {} features to {}",
                matrix.len(),
                matrix.feature_names().len(),
                config.paths.features.display()
            );
        }
        Command::Train(args) => {
            apply(&mut config.paths.bars, args.bars);
            apply(&mut config.paths.model, args.model);
            apply(&mut config.paths.eval_report, args.report);
            apply(&mut config.forest.n_trees, args.trees);
            apply(&mut config.forest.max_depth, args.max_depth);
            apply(&mut config.forest.min_samples_leaf, args.min_leaf);
            apply(&mut config.cv_folds, args.folds);
            config.shuffle_labels |= args.shuffle_labels;
            let report = pipeline::cmd_train(&config)?;
            println!(
                "model -> {} ({} rows, class balance {:.3})",
                config.paths.model.display(),
                report.n_samples,
                report.class_balance
            );
            println!(
                "holdout AUC {:.4}, walk-forward CV AUC {:.4} +/- {:.4}",
                report.eval.auc_roc, report.eval.cv_mean_auc, report.eval.cv_std
            );
        }
        Command::Calibrate(args) => {
            apply(&mut config.paths.bars, args.bars);
            apply(&mut config.paths.model, args.model);
            apply(&mut config.paths.state_table, args.out);
            apply(&mut config.calibration.n_bins, args.bins);
            apply(&mut config.calibration.w1, args.w1);
            apply(&mut config.calibration.w2, args.w2);
            apply(&mut config.calibration.min_samples, args.min_samples);
            apply(&mut config.option.rate, args.rate);
            apply(&mut config.option.days, args.days);
            apply(&mut config.tree.steps, args.steps);
            let table = pipeline::cmd_calibrate(&config)?;
            println!(
                "calibrated {} states -> {} (mean |p_rf - p_mmm| = {:.4})",
                table.n_states(),
                config.paths.state_table.display(),
                table.mean_abs_prob_difference()
            );
        }
        Command::BuildTree(args) => {
            apply(&mut config.paths.state_table, args.state_table);
            apply(&mut config.paths.tree, args.out);
            apply(&mut config.option.spot, args.spot);
            apply(&mut config.tree.steps, args.steps);
            apply(&mut config.tree.root_p_hint, args.root_p);
            apply(&mut config.tree.epsilon, args.epsilon);
            if args.aggregate.is_some() {
                config.tree.aggregate_max_nodes = args.aggregate;
            }
            apply(&mut config.tree.max_total_nodes, args.max_nodes);
            let tree = pipeline::cmd_build_tree(&config)?;
            println!(
                "built {} nodes over {} steps in {:.3}s -> {}",
                tree.node_count(),
                tree.n_steps,
                tree.build_seconds,
                config.paths.tree.display()
            );
        }
        Command::Price(args) => {
            let method = parse_method(&args.method)?;
            if let Some(kind) = args.kind {
                config.option.kind = parse_kind(&kind)?;
            }
            apply(&mut config.option.spot, args.spot);
            apply(&mut config.option.strike, args.strike);
            apply(&mut config.option.days, args.days);
            apply(&mut config.option.rate, args.rate);
            apply(&mut config.option.vol, args.vol);
            apply(&mut config.tree.steps, args.steps);
            apply(&mut config.mc_paths, args.paths);
            apply(&mut config.paths.state_table, args.state_table);
            apply(&mut config.paths.price_report, args.out);
            let value = pipeline::cmd_price(&config, method)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            println!("report -> {}", config.paths.price_report.display());
        }
        Command::Report(args) => {
            apply(&mut config.paths.bars, args.bars);
            apply(&mut config.paths.model, args.model);
            apply(&mut config.paths.state_table, args.state_table);
            apply(&mut config.paths.report_dir, args.out_dir);
            let written = pipeline::cmd_report(&config)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn apply<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_session(text: &str) -> microtree::Result<SessionTemplate> {
    match text {
        "us_equity" => Ok(SessionTemplate::UsEquity),
        "continuous" => Ok(SessionTemplate::Continuous),
        other => Err(microtree::Error::Config(format!(
            "unknown session template `{other}` (expected us_equity or continuous)"
        ))),
    }
}

fn parse_method(text: &str) -> microtree::Result<PriceMethod> {
    match text {
        "bs" => Ok(PriceMethod::Bs),
        "crr" => Ok(PriceMethod::Crr),
        "tree" => Ok(PriceMethod::Tree),
        "mc" => Ok(PriceMethod::Mc),
        "compare" => Ok(PriceMethod::Compare),
        other => Err(microtree::Error::Config(format!(
            "unknown method `{other}` (expected bs, crr, tree, mc or compare)"
        ))),
    }
}

fn parse_kind(text: &str) -> microtree::Result<OptionKind> {
    match text {
        "call" => Ok(OptionKind::Call),
        "put" => Ok(OptionKind::Put),
        other => Err(microtree::Error::Config(format!(
            "unknown option kind `{other}` (expected call or put)"
        ))),
    }
}
