//! Argument parsing and dispatch for the `catgrad` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use catgrad_core::harness::{self, ArmConfig, ExperimentConfig, ExperimentId, Fault, OutputSpec};
use catgrad_core::{Error, Format, RunReport};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "catgrad",
    version,
    about = "Gradient estimators for multivariate categorical distributions",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// More output (config echo, per-arm messages).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Suppress the summary table.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bias and variance of each estimator against the exact gradient.
    BenchExact(RunArgs),
    /// Maximise the synthetic product objective.
    OptSynth(RunArgs),
    /// Train the discrete VAE.
    Dvae(RunArgs),
    /// Learn digit classes from sums of sequences.
    Nesy(RunArgs),
    /// Run the oracle and invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML config file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset (see README).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Iterations, epochs (nesy) or trials (bench-exact).
    #[arg(long)]
    pub iters: Option<u64>,
    /// Report destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format; inferred from the `--out` extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Comma-separated arms, e.g. `indecater-2,rloo-800`.
    #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
    pub estimators: Option<Vec<ArmConfig>>,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn parse_arm(s: &str) -> Result<ArmConfig, String> {
    ArmConfig::parse_spec(s).map_err(|e| e.to_string())
}

/// Failure of a parsed invocation, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            Error::UnknownExperiment(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(e) => write!(f, "error: {e}"),
        }
    }
}

impl Command {
    pub fn experiment(&self) -> Option<ExperimentId> {
        match self {
            Command::BenchExact(_) => Some(ExperimentId::BenchExact),
            Command::OptSynth(_) => Some(ExperimentId::OptSynth),
            Command::Dvae(_) => Some(ExperimentId::Dvae),
            Command::Nesy(_) => Some(ExperimentId::Nesy),
            Command::Selftest(_) => None,
        }
    }
}

/// Resolves the config a run subcommand will execute, applying flag overrides.
pub fn resolve_config(experiment: ExperimentId, args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset(experiment.default_preset())?,
    };
    if cfg.experiment != experiment {
        return Err(CliError::Usage(format!(
            "config is for `{}`, not `{experiment}`",
            cfg.experiment
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.iters {
        cfg.iterations = n;
    }
    if let Some(specs) = &args.estimators {
        cfg.override_estimators(specs);
    }
    match (&args.out, args.format) {
        (Some(path), fmt) => {
            let format = fmt.map(Format::from).unwrap_or_else(|| {
                match path.extension().and_then(|e| e.to_str()) {
                    Some("json") => Format::Json,
                    _ => Format::Csv,
                }
            });
            cfg.output = Some(OutputSpec {
                path: path.clone(),
                format,
            });
        }
        (None, Some(fmt)) => match &mut cfg.output {
            Some(out) => out.format = fmt.into(),
            None => return Err(CliError::Usage("--format requires --out or a configured output".into())),
        },
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders the per-arm summary as an aligned text table.
pub fn format_summary(report: &RunReport) -> String {
    let header = ["arm", "status", "objective", "metric", "samples", "evals"];
    let rows = harness::summary_table(report);
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn run_selftest(args: &SelftestArgs, quiet: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let fault = args.inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
    let report = harness::selftest(fault);
    for s in &report.suites {
        let mark = if s.passed { "PASS" } else { "FAIL" };
        if !quiet || !s.passed {
            let _ = writeln!(out, "{mark} {:<20} {}", s.name, s.detail);
        }
    }
    Ok(if report.passed() {
        EXIT_OK
    } else {
        let _ = writeln!(out, "failing suites: {}", report.failed().join(", "));
        EXIT_FAILURE
    })
}

/// Executes a parsed invocation, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let (experiment, args) = match &cli.command {
        Command::Selftest(a) => return run_selftest(a, cli.quiet, out),
        Command::BenchExact(a) | Command::OptSynth(a) | Command::Dvae(a) | Command::Nesy(a) => {
            (cli.command.experiment().expect("run subcommand"), a)
        }
    };
    let cfg = resolve_config(experiment, args)?;
    if cli.verbose > 0 {
        let _ = writeln!(out, "{}", cfg.to_toml()?);
    }
    let report = harness::run_experiment(&cfg)?;
    if !cli.quiet {
        let _ = write!(out, "{}", format_summary(&report));
    }
    if cli.verbose > 0 {
        for a in &report.arms {
            if let Some(m) = &a.message {
                let _ = writeln!(out, "{}: {m}", a.name);
            }
        }
    }
    if let Some(o) = &cfg.output {
        if !cli.quiet {
            let _ = writeln!(out, "report written to {}", o.path.display());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
