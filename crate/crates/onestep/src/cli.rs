//! The `onestep` command line.

use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use onestep_core::linalg::Vector;
use onestep_core::model::{Criterion, ModelSpec, Sample, Shard};
use onestep_core::solver::{m_estimate, SolveConfig};
use onestep_core::wire::ResampleRequest;
use onestep_core::MachineId;

use crate::cluster::{
    coordinate, effective_ratio, run_protocol, serve_worker, FailurePolicy, ProtocolConfig,
    ProtocolOutcome, TcpLink, Transport, Worker,
};
use crate::data::{generate, read_samples_csv, read_samples_for, shard_split, write_samples_csv, GeneratorSpec};
use crate::experiment::{report_csv, report_json, run_experiment, write_report, ReportFormat};
use crate::presets::Preset;
use crate::rng;

#[derive(Debug, Parser)]
#[command(name = "onestep", version, about = "Distributed one-step M-estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a data set and write it as CSV.
    Generate(GenerateArgs),
    /// Run the two-round protocol once and print the estimates.
    Run(RunArgs),
    /// Reproduce one of the experiment tables.
    Experiment(ExperimentArgs),
    /// Serve as the coordinator of a TCP deployment.
    Coordinator(CoordinatorArgs),
    /// Serve as one worker of a TCP deployment.
    Worker(WorkerArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Logistic,
    Beta,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Model to fit.
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Covariate dimension (logistic only).
    #[arg(long, default_value_t = 20)]
    pub d: usize,
}

impl ModelFlags {
    fn spec(&self) -> Result<ModelSpec, CliError> {
        Ok(match self.model {
            ModelArg::Logistic => {
                if self.d == 0 {
                    return Err(usage("--d", "dimension must be >= 1"));
                }
                ModelSpec::Logistic { dim: self.d }
            }
            ModelArg::Beta => ModelSpec::Beta,
            ModelArg::Gaussian => ModelSpec::Gaussian,
        })
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Number of samples to simulate (ignored with --data).
    #[arg(long)]
    pub n: Option<usize>,
    /// Read samples from this CSV instead of simulating them.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of machines.
    #[arg(long)]
    pub k: usize,
    /// Probability that a machine's reply is lost.
    #[arg(long, default_value_t = 0.0)]
    pub r: f64,
    /// Draw failures independently per round instead of once per machine.
    #[arg(long)]
    pub per_round_failures: bool,
    /// Subsampling ratio for the resampled averaging estimator.
    #[arg(long, default_value_t = 0.1)]
    pub s: f64,
    /// How coordinator and workers exchange messages.
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    pub transport: TransportArg,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment grid: table1, table2, table3, table4, table5 or desk.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Override the number of repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// How coordinator and workers exchange messages.
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    pub transport: TransportArg,
    /// Report path; the report goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format.
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct CoordinatorArgs {
    /// Address to listen on.
    #[arg(long)]
    pub listen: SocketAddr,
    /// Number of workers to wait for.
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Probability that a machine's reply is lost.
    #[arg(long, default_value_t = 0.0)]
    pub r: f64,
    /// Draw failures independently per round instead of once per machine.
    #[arg(long)]
    pub per_round_failures: bool,
    /// Also request subsample estimates with this ratio.
    #[arg(long)]
    pub s: Option<f64>,
    /// Master seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seconds to wait for workers and replies.
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Coordinator address.
    #[arg(long)]
    pub connect: SocketAddr,
    /// This worker's id, 1..=k.
    #[arg(long)]
    pub machine_id: u32,
    /// CSV file holding this worker's shard.
    #[arg(long)]
    pub data: PathBuf,
    /// Seconds to keep retrying the connection.
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

#[derive(Debug)]
pub enum CliError {
    /// A flag violates a precondition (exit code 2).
    Usage(String),
    /// The command failed while running (exit code 1).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(flag: &str, what: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{flag}: {what}"))
}

/// Six significant digits, `%g` style.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, v)
    } else {
        format!("{v:.5e}")
    }
}

fn vec6(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| sig6(*x)).collect();
    format!("[{}]", parts.join(", "))
}

fn sq_err(est: &[f64], truth: Option<&Vector>) -> String {
    match truth {
        Some(t) => sig6(est.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum()),
        None => "n/a".into(),
    }
}

fn check_rate(flag: &str, r: f64) -> Result<(), CliError> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(usage(flag, format!("must lie in [0, 1), got {r}")))
    }
}

fn check_ratio(flag: &str, s: f64) -> Result<(), CliError> {
    if s > 0.0 && s < 1.0 {
        Ok(())
    } else {
        Err(usage(flag, format!("must lie in (0, 1), got {s}")))
    }
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = a.model.spec()?;
    if a.n == 0 {
        return Err(usage("--n", "must be >= 1"));
    }
    let (truth, samples) = generate(&GeneratorSpec::new(model, a.n, a.seed))?;
    write_samples_csv(&a.out, &samples, Some(&model))?;
    writeln!(out, "model   {model}")?;
    writeln!(out, "N       {}", samples.len())?;
    writeln!(out, "theta   {}", vec6(&truth))?;
    writeln!(out, "wrote   {}", a.out.display())?;
    Ok(())
}

fn print_outcome(
    out: &mut dyn Write,
    outcome: &ProtocolOutcome,
    resampled: Option<Vector>,
    truth: Option<&Vector>,
) -> Result<(), CliError> {
    let mask = |m: &[bool]| m.iter().map(|d| if *d { '1' } else { '0' }).collect::<String>();
    writeln!(out, "delivered round 1  {}", mask(&outcome.mask_round1))?;
    writeln!(out, "delivered round 2  {}", mask(&outcome.mask_round2))?;
    for (name, est) in [("theta0", &outcome.theta0), ("theta1", &outcome.theta1)] {
        match est {
            Ok(t) => writeln!(out, "{name:<12} {}  sq_err {}", vec6(t), sq_err(t, truth))?,
            Err(e) => writeln!(out, "{name:<12} unavailable ({e})")?,
        }
    }
    if let Some(t) = resampled {
        writeln!(out, "{:<12} {}  sq_err {}", "resampled", vec6(&t), sq_err(&t, truth))?;
    }
    Ok(())
}

fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = a.model.spec()?;
    check_rate("--r", a.r)?;
    check_ratio("--s", a.s)?;
    if a.k == 0 {
        return Err(usage("--k", "must be >= 1"));
    }
    let (truth, samples): (Option<Vector>, Vec<Sample>) = match (&a.data, a.n) {
        (Some(path), _) => (None, read_samples_for(path, &model).map_err(|e| CliError::Usage(format!("--data: {e}")))?),
        (None, Some(0)) => return Err(usage("--n", "must be >= 1")),
        (None, Some(n)) => {
            let (t, s) = generate(&GeneratorSpec::new(model, n, a.seed))?;
            (Some(t), s)
        }
        (None, None) => return Err(CliError::Usage("one of --n or --data is required".into())),
    };
    let n = samples.len();
    if n == 0 || n % a.k != 0 {
        return Err(usage("--k", format!("{} does not divide N = {n}", a.k)));
    }
    let shards = shard_split(&samples, a.k, a.seed)?;
    let policy = FailurePolicy {
        rate: a.r,
        per_round_independent: a.per_round_failures,
        seed: rng::derive_seed(a.seed, "failure", &[]),
    };
    let config = ProtocolConfig {
        model,
        resample: Some(ResampleRequest {
            ratio: a.s,
            seed: rng::derive_seed(a.seed, "resample", &[]),
        }),
    };
    let transport = match a.transport {
        TransportArg::Inproc => Transport::InProcess,
        TransportArg::Tcp => Transport::localhost_tcp(),
    };
    let solve = SolveConfig::default();
    let outcome = run_protocol(&config, shards, &solve, &policy.schedule(a.k), transport)?;
    let resampled = match (&outcome.theta0, &outcome.theta0_sub, effective_ratio(a.s, n / a.k)) {
        (Ok(t0), Some(sub), Some(s)) => onestep_core::estimators::resampled_average(t0, sub, s).ok(),
        _ => None,
    };

    writeln!(out, "model        {model}")?;
    writeln!(out, "N            {n}")?;
    writeln!(out, "k            {}", a.k)?;
    match &truth {
        Some(t) => writeln!(out, "theta_true   {}", vec6(t))?,
        None => writeln!(out, "theta_true   n/a")?,
    }
    print_outcome(out, &outcome, resampled, truth.as_ref())?;
    let init = model.initial_estimate(&samples);
    match m_estimate(&model, &samples, &init, &solve) {
        Ok(r) => writeln!(
            out,
            "{:<12} {}  sq_err {}",
            "centralized",
            vec6(&r.theta_hat),
            sq_err(&r.theta_hat, truth.as_ref())
        )?,
        Err(e) => writeln!(out, "centralized  unavailable ({e})")?,
    }
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = a.preset.config(a.seed);
    if let Some(k) = a.repeats {
        if k == 0 {
            return Err(usage("--repeats", "must be >= 1"));
        }
        cfg.repeats = k;
    }
    if a.transport == TransportArg::Tcp {
        cfg.transport = Transport::localhost_tcp();
    }
    let report = run_experiment(&cfg)?;
    let format = match a.format {
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Json => ReportFormat::Json,
    };
    match &a.out {
        Some(path) => {
            write_report(&report, path, format)?;
            writeln!(out, "wrote {} rows to {}", report.rows.len(), path.display())?;
        }
        None => match format {
            ReportFormat::Csv => write!(out, "{}", report_csv(&report)?)?,
            ReportFormat::Json => writeln!(out, "{}", report_json(&report))?,
        },
    }
    let checks = a.preset.checks(&report);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        eprintln!("[{tag}] {} ({})", c.name, c.detail);
    }
    if failed > 0 {
        return Err(CliError::Runtime(anyhow::anyhow!("{failed} of {} preset checks failed", checks.len())));
    }
    Ok(())
}

fn cmd_coordinator(a: &CoordinatorArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = a.model.spec()?;
    check_rate("--r", a.r)?;
    if let Some(s) = a.s {
        check_ratio("--s", s)?;
    }
    if a.k == 0 {
        return Err(usage("--k", "must be >= 1"));
    }
    let policy = FailurePolicy {
        rate: a.r,
        per_round_independent: a.per_round_failures,
        seed: rng::derive_seed(a.seed, "failure", &[]),
    };
    let config = ProtocolConfig {
        model,
        resample: a.s.map(|ratio| ResampleRequest {
            ratio,
            seed: rng::derive_seed(a.seed, "resample", &[]),
        }),
    };
    let listener = TcpListener::bind(a.listen).with_context(|| format!("binding {}", a.listen))?;
    log::info!("listening on {}", listener.local_addr()?);
    let timeout = Duration::from_secs(a.timeout_secs);
    let mut link = TcpLink::accept(&listener, a.k, timeout)?;
    let outcome = coordinate(&mut link, a.k, &config, &policy.schedule(a.k));
    link.shutdown();
    let outcome = outcome?;
    writeln!(out, "model        {model}")?;
    writeln!(out, "k            {}", a.k)?;
    print_outcome(out, &outcome, None, None)?;
    if let Some(sub) = &outcome.theta0_sub {
        writeln!(out, "{:<12} {}", "theta0_sub", vec6(sub))?;
    }
    Ok(())
}

fn cmd_worker(a: &WorkerArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.machine_id == 0 {
        return Err(usage("--machine-id", "must be >= 1"));
    }
    let samples = read_samples_csv(&a.data).map_err(|e| CliError::Usage(format!("--data: {e}")))?;
    let shard = Shard::new(MachineId(a.machine_id), samples).map_err(|e| usage("--data", e))?;
    serve_worker(
        a.connect,
        Worker::new(shard, SolveConfig::default()),
        Duration::from_secs(a.timeout_secs),
    )?;
    writeln!(out, "machine {} done", a.machine_id)?;
    Ok(())
}

/// Runs a parsed command, writing its report to `out`.
pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Experiment(a) => cmd_experiment(a, out),
        Command::Coordinator(a) => cmd_coordinator(a, out),
        Command::Worker(a) => cmd_worker(a, out),
    }
}

/// Process entry point: parse, dispatch, map errors to exit codes
/// (0 success, 2 usage, 1 runtime).
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return ExitCode::from(code as u8);
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match dispatch(&cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
