mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use attbench_core::dgp::{GoldenTable, Prevalence, DEFAULT_CALIBRATION_DRAWS, DEFAULT_TRUTH_DRAWS};
use attbench_core::diagnostics::{ps_histogram, HistogramSource};
use attbench_core::harness::{cell_constants, run_grid, GridOptions, Method, ResultStore};
use attbench_core::report::build_report;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{
    check_ids, default_prevalences, parse_methods, parse_prevalences, FileConfig, RunConfig, DEFAULT_ORACLE_SEED,
    DEFAULT_OUTPUT_DIR, DEFAULT_REPS, DEFAULT_SEED, SMOKE_REPS,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(author, version, about = "Benchmark of ATT estimators for external-control studies")]
struct Cli {
    /// TOML file with default settings; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory of the result store
    #[arg(long, global = true, env = "ATTBENCH_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate treatment intercepts and setting-3 true effects
    Calibrate(CalibrateArgs),
    /// Run the simulation grid into the result store
    Run(RunArgs),
    /// Histogram of propensity scores for one simulated population
    PsHist(PsHistArgs),
    /// Summarise a result store
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',')]
    prevalences: Option<Vec<f64>>,
    #[arg(long)]
    oracle_seed: Option<u64>,
    /// Covariate draws used to calibrate each intercept
    #[arg(long)]
    calibration_draws: Option<usize>,
    /// Covariate draws used for each setting-3 true effect
    #[arg(long)]
    truth_draws: Option<usize>,
    /// Output file [default: <output-dir>/golden_constants.csv]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<u8>>,
    #[arg(long, value_delimiter = ',')]
    prevalences: Option<Vec<f64>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it
    #[arg(long)]
    parallelism: Option<usize>,
    /// Comma-separated subset, e.g. PSM,IPW
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Skip the null-effect cells
    #[arg(long)]
    no_null: bool,
    /// Run only the null-effect cells
    #[arg(long, conflicts_with = "no_null")]
    null_only: bool,
    /// Scenario 1, setting 1, prevalence 0.2, 20 replicates, effect cell only
    #[arg(long)]
    smoke: bool,
    /// Golden-constants CSV replacing the bundled table
    #[arg(long)]
    golden: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    True,
    Logistic,
    Ensemble,
}

#[derive(Args, Debug)]
struct PsHistArgs {
    #[arg(long)]
    scenario: u8,
    #[arg(long, default_value_t = 0.2)]
    prevalence: f64,
    /// Population size [default: the cell's sample size]
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, value_enum, default_value_t = SourceArg::True)]
    source: SourceArg,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Also write the table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Errors that map to the configuration exit code.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: anyhow::Error) -> anyhow::Error {
    anyhow!(ConfigError(e))
}

fn output_dir(cli: &Cli, file: &FileConfig) -> PathBuf {
    cli.output_dir
        .clone()
        .or_else(|| file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn load_golden(path: Option<&Path>) -> Result<GoldenTable> {
    match path {
        None => Ok(GoldenTable::builtin()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(GoldenTable::from_csv(&text)?)
        }
    }
}

fn resolve_run(cli: &Cli, args: &RunArgs, file: &FileConfig) -> Result<RunConfig> {
    let smoke = args.smoke;
    let scenarios = args
        .scenarios
        .clone()
        .or(if smoke { Some(vec![1]) } else { None })
        .or_else(|| file.scenarios.clone())
        .unwrap_or_else(|| vec![1, 2, 3]);
    let settings = args
        .settings
        .clone()
        .or(if smoke { Some(vec![1]) } else { None })
        .or_else(|| file.settings.clone())
        .unwrap_or_else(|| vec![1, 2, 3]);
    let prevalences = args
        .prevalences
        .clone()
        .or(if smoke { Some(vec![0.2]) } else { None })
        .or_else(|| file.prevalences.clone())
        .unwrap_or_else(default_prevalences);
    let n_reps = args
        .reps
        .or(if smoke { Some(SMOKE_REPS) } else { None })
        .or(file.n_reps)
        .unwrap_or(DEFAULT_REPS);
    let methods = match args.methods.clone().or_else(|| file.methods.clone()) {
        Some(names) => parse_methods(&names)?,
        None => Method::ALL.to_vec(),
    };
    check_ids("scenario", &scenarios)?;
    check_ids("setting", &settings)?;
    if n_reps < 2 {
        return Err(anyhow!("at least 2 replicates are needed, got {n_reps}"));
    }
    let parallelism = args.parallelism.or(file.parallelism).unwrap_or(1);
    if parallelism == 0 {
        return Err(anyhow!("parallelism must be at least 1"));
    }
    let (effect_cells, null_cells) = if args.null_only {
        (false, true)
    } else if args.no_null || smoke {
        (true, false)
    } else {
        (file.effect_cells.unwrap_or(true), file.null_cells.unwrap_or(true))
    };
    Ok(RunConfig {
        scenarios,
        settings,
        prevalences: parse_prevalences(&prevalences)?,
        n_reps,
        master_seed: args.seed.or(file.master_seed).unwrap_or(DEFAULT_SEED),
        parallelism,
        output_dir: output_dir(cli, file),
        methods,
        effect_cells,
        null_cells,
    })
}

fn cmd_calibrate(cli: &Cli, args: &CalibrateArgs, file: &FileConfig) -> Result<u8> {
    let scenarios = args
        .scenarios
        .clone()
        .or_else(|| file.scenarios.clone())
        .unwrap_or_else(|| vec![1, 2, 3]);
    check_ids("scenario", &scenarios).map_err(config_err)?;
    let prevalences = parse_prevalences(
        &args
            .prevalences
            .clone()
            .or_else(|| file.prevalences.clone())
            .unwrap_or_else(default_prevalences),
    )
    .map_err(config_err)?;
    let seed = args.oracle_seed.or(file.oracle_seed).unwrap_or(DEFAULT_ORACLE_SEED);
    let cal_n = args
        .calibration_draws
        .or(file.calibration_draws)
        .unwrap_or(DEFAULT_CALIBRATION_DRAWS);
    let truth_n = args.truth_draws.or(file.truth_draws).unwrap_or(DEFAULT_TRUTH_DRAWS);
    let table = GoldenTable::compute(&scenarios, &prevalences, seed, cal_n, truth_n)
        .with_context(|| format!("calibrating scenarios {scenarios:?} at prevalences {prevalences:?}"))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| output_dir(cli, file).join("golden_constants.csv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out, table.to_csv()?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} constants to {}", table.rows.len(), out.display());
    Ok(0)
}

fn cmd_run(cli: &Cli, args: &RunArgs, file: &FileConfig) -> Result<u8> {
    let cfg = resolve_run(cli, args, file).map_err(config_err)?;
    let golden = load_golden(args.golden.as_deref().or(file.golden.as_deref())).map_err(config_err)?;
    let grid = cfg.grid();
    let store = ResultStore::new(&cfg.output_dir);
    let options = GridOptions {
        parallelism: cfg.parallelism,
        methods: cfg.methods.clone(),
    };
    let summary = run_grid(&grid, &golden, &store, &options)?;
    println!(
        "{} cells run, {} already complete, {} failed records; store at {}",
        summary.completed,
        summary.skipped,
        summary.failed_records,
        cfg.output_dir.display()
    );
    for (id, reason) in &summary.failed {
        eprintln!("cell {id} failed: {reason}");
    }
    Ok(if summary.failed.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn cmd_ps_hist(args: &PsHistArgs, file: &FileConfig) -> Result<u8> {
    check_ids("scenario", &[args.scenario]).map_err(config_err)?;
    let prevalence = Prevalence::new(args.prevalence).map_err(|e| config_err(e.into()))?;
    let golden = load_golden(file.golden.as_deref()).map_err(config_err)?;
    let probe = attbench_core::dgp::CellConfig {
        scenario: args.scenario,
        setting: 1,
        prevalence,
        null_effect: false,
        n_reps: 1,
        master_seed: args.seed,
    };
    let (intercept, _) = cell_constants(&probe, &golden)?;
    let source = match args.source {
        SourceArg::True => HistogramSource::True,
        SourceArg::Logistic => HistogramSource::Logistic,
        SourceArg::Ensemble => HistogramSource::Ensemble,
    };
    let n = args.n.unwrap_or_else(|| prevalence.sample_size());
    let hist = ps_histogram(args.scenario, prevalence, intercept, n, args.seed, args.bins, source)
        .map_err(|e| config_err(e.into()))?;
    let csv = hist.to_csv()?;
    match &args.out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    eprintln!("tail mass (ps < 0.05 or > 0.95): {:.4}", hist.tail_mass);
    Ok(0)
}

fn cmd_report(cli: &Cli, args: &ReportArgs, file: &FileConfig) -> Result<u8> {
    let store = ResultStore::new(output_dir(cli, file));
    let report = build_report(&store).map_err(|e| config_err(e.into()))?;
    print!("{}", report.render_text());
    if let Some(p) = &args.csv {
        std::fs::write(p, report.to_csv()?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    let file = FileConfig::load(cli.config.as_deref()).map_err(config_err)?;
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(cli, a, &file),
        Command::Run(a) => cmd_run(cli, a, &file),
        Command::PsHist(a) => cmd_ps_hist(a, &file),
        Command::Report(a) => cmd_report(cli, a, &file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
