use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cevkmv_core::cev::{cev_dd, cev_default_probability, CevParams, GridSettings};
use cevkmv_core::market_model::{classical_dd, invert_kmv, FirmQuarterObservation, Group};
use cevkmv_core::mc::{simulate_raw_inputs, StudySpec};
use cevkmv_core::pipeline::{run_study, write_study, RawInputs, RunConfig};
use cevkmv_core::stats_tests::{z1_test, z2_wilcoxon};
use cevkmv_core::{Error, Quarter, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(
    name = "cevkmv",
    version,
    about = "Distance to default under classical and CEV-extended KMV"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the quarterly study and write the output bundle.
    Run(RunArgs),
    /// Recover asset value and volatility for one firm.
    Invert(InvertArgs),
    /// Default probability and distance under CEV dynamics.
    Prob(ProbArgs),
    /// Compare two columns of distances with the gamma-mean and rank-sum tests.
    Test(TestArgs),
    /// Generate synthetic input files.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    returns: PathBuf,
    #[arg(long)]
    fundamentals: PathBuf,
    #[arg(long)]
    rates: PathBuf,
    /// Flat `key = value` file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct InvertArgs {
    #[arg(long)]
    equity: f64,
    #[arg(long)]
    equity_vol: f64,
    #[arg(long)]
    default_point: f64,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct ProbArgs {
    #[arg(long)]
    asset_value: f64,
    #[arg(long)]
    default_point: f64,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long)]
    beta: f64,
    /// Scale δ of the local volatility δ V^(β-1).
    #[arg(
        long,
        conflicts_with = "local_vol",
        required_unless_present = "local_vol"
    )]
    delta: Option<f64>,
    /// Local volatility at the current asset value; sets δ.
    #[arg(long)]
    local_vol: Option<f64>,
    #[arg(long)]
    num_space: Option<usize>,
    #[arg(long)]
    num_time: Option<usize>,
}

#[derive(Args)]
struct TestArgs {
    /// CSV file with a header row.
    input: PathBuf,
    #[arg(long, default_value = "st")]
    st: String,
    #[arg(long, default_value = "non_st")]
    non_st: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.98)]
    beta_st: f64,
    #[arg(long, default_value_t = 1.14)]
    beta_non_st: f64,
    #[arg(long, default_value_t = 60)]
    st_firms: usize,
    #[arg(long, default_value_t = 60)]
    non_st_firms: usize,
    #[arg(long, default_value_t = 9)]
    quarters: usize,
    /// Probability that a debt field is left blank.
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ExclusionThreshold { .. } => 3,
        Error::Domain(_)
        | Error::Config(_)
        | Error::Input { .. }
        | Error::Csv(_)
        | Error::InsufficientHistory { .. }
        | Error::AllMissing { .. } => 2,
        _ => 1,
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path).map_err(|e| Error::Input {
            path: path.display().to_string(),
            message: e.to_string(),
        })?)?,
        None => RunConfig::default(),
    };
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;
    let inputs = RawInputs::from_csv(&args.returns, &args.fundamentals, &args.rates)?;
    let bundle = run_study(&inputs, &config)?;
    fs::create_dir_all(&config.output_dir)?;
    let written = write_study(&bundle, &config.output_dir)?;
    info!(
        "{} records, {} exclusions",
        bundle.records.len(),
        bundle.exclusions.len()
    );
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn invert(args: InvertArgs) -> Result<()> {
    let obs = FirmQuarterObservation {
        firm_id: "cli".into(),
        quarter: Quarter::new(2000, 1)?,
        equity_value: args.equity,
        equity_vol: args.equity_vol,
        default_point: args.default_point,
        rate: args.rate,
        horizon: args.horizon,
        group: Group::NonSt,
    };
    let solution = invert_kmv(&obs)?;
    println!("asset_value {}", solution.asset_value);
    println!("asset_vol {}", solution.asset_vol);
    println!("distance {}", classical_dd(&solution, &obs)?);
    println!("iterations {}", solution.iterations);
    Ok(())
}

fn prob(args: ProbArgs) -> Result<()> {
    let params = match (args.delta, args.local_vol) {
        (Some(delta), _) => CevParams::new(delta, args.beta)?,
        (None, Some(vol)) => CevParams::from_local_vol(vol, args.asset_value, args.beta)?,
        (None, None) => unreachable!("clap requires one of --delta and --local-vol"),
    };
    let mut settings = GridSettings::default();
    settings.num_space = args.num_space.unwrap_or(settings.num_space);
    settings.num_time = args.num_time.unwrap_or(settings.num_time);
    let grid = settings.grid_for(
        args.asset_value,
        args.default_point,
        args.rate,
        args.horizon,
        params,
    );
    let p = cev_default_probability(
        args.asset_value,
        params,
        args.default_point,
        args.rate,
        args.horizon,
        &grid,
    )?;
    println!("delta {}", params.delta);
    println!("probability {p}");
    println!("distance {}", cev_dd(p));
    Ok(())
}

fn read_column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let bad = |message: String| Error::Input {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let index = reader
        .headers()?
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| bad(format!("no column named `{name}`")))?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        match record.get(index) {
            Some("") | None => {}
            Some(cell) => values.push(
                cell.parse()
                    .map_err(|_| bad(format!("record {}: `{cell}` is not a number", i + 1)))?,
            ),
        }
    }
    Ok(values)
}

fn test(args: TestArgs) -> Result<()> {
    let st = read_column(&args.input, &args.st)?;
    let non_st = read_column(&args.input, &args.non_st)?;
    let (z1, p1) = z1_test(&st, &non_st)?;
    let (z2, p2) = z2_wilcoxon(&st, &non_st)?;
    println!("Z1,p1,Z2,p2,M,N");
    println!("{z1},{p1},{z2},{p2},{},{}", st.len(), non_st.len());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut spec = StudySpec::two_group(
        args.beta_st,
        args.beta_non_st,
        (args.st_firms, args.non_st_firms),
        args.quarters,
    );
    spec.missing = args.missing;
    let inputs = simulate_raw_inputs(&spec, args.seed)?;
    fs::create_dir_all(&args.out)?;
    let paths = ["returns.csv", "fundamentals.csv", "rates.csv"].map(|name| args.out.join(name));
    inputs.write_csv(&paths[0], &paths[1], &paths[2])?;
    for path in paths {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Run(args) => run(args),
        Command::Invert(args) => invert(args),
        Command::Prob(args) => prob(args),
        Command::Test(args) => test(args),
        Command::Simulate(args) => simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
