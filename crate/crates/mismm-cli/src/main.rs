//! Command-line front end: simulate datasets, fit models, score new bags,
//! and run the benchmark matrix.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mismm::data::{load_dataset, save_dataset, save_instance_labels};
use mismm::eval::{
    dataset_cost_weights, grid_search_fit, prepare, run_benchmark, sigma_grid_for_method,
    BenchmarkConfig, GridSpec, DEFAULT_C_GRID,
};
use mismm::model::{fit_with_preprocess, FitOptions, Method, TrainedModel};
use mismm::simulate::{generate, Scenario, SimConfig};
use mismm::{Error, KernelSpec, RNG_ALGORITHM};

fn long_version() -> String {
    format!("{} (rng: {RNG_ALGORITHM})", env!("CARGO_PKG_VERSION"))
}

#[derive(Parser)]
#[command(
    name = "mismm",
    about = "Maximum-margin classifiers for bags of distributional instances",
    version,
    long_version = long_version()
)]
struct Cli {
    /// Cap the rayon thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from one of the built-in scenarios.
    Simulate(SimulateArgs),
    /// Train a model on a bag-structured CSV dataset.
    Fit(FitArgs),
    /// Score bags (and optionally instances) with a saved model.
    Predict(PredictArgs),
    /// Run the full method-comparison benchmark from a JSON config.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// One of: t_vs_normal, cov_diff, mean_diff, large_cov_diff.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    bags: usize,
    /// Instances per bag.
    #[arg(long)]
    instances: usize,
    /// Samples drawn per instance.
    #[arg(long)]
    samples: usize,
    /// Probability that an instance in a candidate positive bag is positive.
    #[arg(long)]
    p_pos: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the hidden instance labels (JSON) for diagnostics.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Training dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// mi-smm | mi-smm-miqp | si-smm | mi-svm:univ1[,univ2][,cor]
    #[arg(long)]
    method: String,
    /// Cost bound applied to both classes (before optional weighting;
    /// default 1). Conflicts with --grid.
    #[arg(long)]
    cost: Option<f64>,
    /// Pick the cost (and bandwidth, for the gaussian kernel) by inner
    /// cross-validation over the default grids instead of fixing them.
    #[arg(long)]
    grid: bool,
    /// Scale the two cost bounds so positive bags and negative instances
    /// carry equal total budget.
    #[arg(long)]
    weighted: bool,
    /// gaussian | linear
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    /// Bandwidth for the gaussian kernel.
    #[arg(long)]
    sigma: Option<f64>,
    /// Standardize features using training-set statistics.
    #[arg(long)]
    standardize: bool,
    /// Comma-separated feature names to log-transform first.
    #[arg(long, value_delimiter = ',')]
    log_columns: Vec<String>,
    /// Random restarts for the witness-alternating trainer.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Anchor budget for the exact trainer's feature map.
    #[arg(long, default_value_t = 240)]
    anchors: usize,
    /// Wall-clock cap in seconds for the exact trainer's search.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the trained model (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model JSON produced by `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV to score.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decision threshold: bags scoring above it are labelled +1.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// Emit one row per instance instead of per bag.
    #[arg(long)]
    instance_scores: bool,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Benchmark configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Results CSV, appended row by row as cells finish.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON summary (mean/sd ranking quality and mean ranks).
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                RunError::Solver(err) if err.is_usage() => 2,
                RunError::Solver(_) => 1,
                RunError::Usage(_) => 2,
                RunError::Io(_) => 1,
            };
            ExitCode::from(code)
        }
    }
}

enum RunError {
    Solver(Error),
    Usage(String),
    Io(std::io::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Solver(e) => write!(f, "{e}"),
            RunError::Usage(msg) => write!(f, "{msg}"),
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Solver(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

fn run(command: Command) -> Result<(), RunError> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Predict(args) => predict(args),
        Command::Benchmark(args) => benchmark(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), RunError> {
    let scenario = Scenario::parse(&args.scenario)?;
    let mut config = SimConfig::new(scenario, args.bags, args.instances, args.samples, args.seed);
    if let Some(p) = args.p_pos {
        config.p_pos = p;
    }
    let labeled = generate(&config)?;
    save_dataset(&labeled.dataset, &args.out)?;
    println!(
        "{} bags, {} instances, {} samples -> {}",
        labeled.dataset.n_bags(),
        labeled.dataset.n_instances(),
        labeled.dataset.total_samples(),
        args.out.display()
    );
    if let Some(path) = args.labels_out {
        let ids: Vec<String> = labeled
            .dataset
            .instances
            .iter()
            .map(|i| i.instance_id.clone())
            .collect();
        save_instance_labels(&labeled.instance_labels, &ids, &path)?;
    }
    Ok(())
}

fn fit(args: FitArgs) -> Result<(), RunError> {
    let method = Method::parse(&args.method)?;
    let gaussian = match args.kernel.as_str() {
        "linear" => {
            if args.sigma.is_some() {
                return Err(RunError::Usage("--sigma has no effect with --kernel linear".into()));
            }
            false
        }
        "gaussian" => true,
        other => {
            return Err(RunError::Usage(format!(
                "unknown kernel '{other}' (expected gaussian or linear)"
            )))
        }
    };
    let dataset = load_dataset(&args.data)?;

    let model = if args.grid {
        if args.cost.is_some() {
            return Err(RunError::Usage("--cost conflicts with --grid, which selects the cost itself".into()));
        }
        if args.sigma.is_some() {
            return Err(RunError::Usage("--sigma conflicts with --grid, which selects the bandwidth itself".into()));
        }
        let (prepared, prep) = prepare(&dataset, &args.log_columns, args.standardize)?;
        let mut template = FitOptions::new(1.0, KernelSpec::Linear);
        template.restarts = args.restarts;
        template.miqp_anchors = args.anchors;
        template.miqp_time_limit = args.time_limit;
        let spec = GridSpec {
            c_grid: DEFAULT_C_GRID.to_vec(),
            sigma_grid: if gaussian { sigma_grid_for_method(&prepared, &method)? } else { Vec::new() },
            inner_k: 5,
            weighted: args.weighted,
        };
        let (mut model, choice) = grid_search_fit(&prepared, &method, &template, &spec, args.seed)?;
        model.preprocess = prep;
        model.feature_names = dataset.feature_names.clone();
        match choice.sigma {
            Some(sigma) => println!("selected cost {} and bandwidth {sigma}", choice.c),
            None => println!("selected cost {}", choice.c),
        }
        if choice.inner_auroc.is_finite() {
            info!("inner validation ranking quality {:.4}", choice.inner_auroc);
        }
        model
    } else {
        let kernel = if gaussian {
            let sigma = args
                .sigma
                .ok_or_else(|| RunError::Usage("--kernel gaussian requires --sigma (or --grid)".into()))?;
            KernelSpec::gaussian(sigma)?
        } else {
            KernelSpec::Linear
        };
        let cost = args.cost.unwrap_or(1.0);
        let mut opts = FitOptions::new(cost, kernel);
        if args.weighted {
            let (w_pos, w_neg) = dataset_cost_weights(&dataset)?;
            opts.c_pos = cost * w_pos;
            opts.c_neg = cost * w_neg;
        }
        opts.seed = args.seed;
        opts.restarts = args.restarts;
        opts.miqp_anchors = args.anchors;
        opts.miqp_time_limit = args.time_limit;
        fit_with_preprocess(&dataset, &method, &opts, &args.log_columns, args.standardize)?
    };

    model.save(&args.out)?;
    info!("model written to {}", args.out.display());
    if let Some(gap) = model.gap() {
        info!("optimality gap {gap:.2e}");
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), RunError> {
    let model = TrainedModel::load(&args.model)?;
    let dataset = load_dataset(&args.data)?;

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    if args.instance_scores {
        let scores = model.score_instances(&dataset)?;
        writeln!(out, "instance_id,score")?;
        for (instance, score) in dataset.instances.iter().zip(scores) {
            writeln!(out, "{},{score}", instance.instance_id)?;
        }
    } else {
        let scores = model.score_bags(&dataset)?;
        writeln!(out, "bag_id,score,predicted_label")?;
        for (bag, score) in dataset.bags.iter().zip(scores) {
            let label: i8 = if score > args.threshold { 1 } else { -1 };
            writeln!(out, "{},{score},{label}", bag.bag_id)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn benchmark(args: BenchmarkArgs) -> Result<(), RunError> {
    let file = File::open(&args.config)?;
    let config: BenchmarkConfig = serde_json::from_reader(file)
        .map_err(|e| RunError::Usage(format!("invalid benchmark config: {e}")))?;
    let out = BufWriter::new(File::create(&args.out)?);
    let report = run_benchmark(&config, out)?;
    info!("{} result rows written to {}", report.rows.len(), args.out.display());
    if let Some(path) = args.summary {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, &report.cells)
            .map_err(|e| RunError::Solver(Error::from(e)))?;
    }
    Ok(())
}
