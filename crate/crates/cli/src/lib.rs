//! `rmppi run | compare | verify-bound | selftest`.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rmppi_core::config::ExperimentConfig;
use rmppi_core::harness::{
    check_comparable, run_all, run_closed_loop, verify_bound_csv, write_comparison_csv, ComparisonRow,
};
use rmppi_core::rmppi::ControllerKind;
use rmppi_core::selftest;

#[derive(Debug, Parser)]
#[command(name = "rmppi", version, about = "Robust MPPI closed-loop experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop experiment and write its run log.
    Run(RunArgs),
    /// Run several controllers on the same disturbance realization.
    Compare(CompareArgs),
    /// Check a run log against its free-energy growth bound.
    VerifyBound(VerifyArgs),
    /// Run the randomized property checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML experiment file. Built-in defaults when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// `key=value` or `section.key=value`, applied after the file.
    #[arg(short = 's', long = "set", visible_alias = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces `harness.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_value = "mppi,tube,rmppi")]
    pub controllers: Vec<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// A `runlog.csv`, or a run directory containing one.
    pub log: PathBuf,
    /// Minimum fraction of steps that must respect the bound.
    #[arg(long, default_value_t = 0.99)]
    pub min_within: f64,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A failed command: its message and exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<rmppi_core::Error> for Failure {
    fn from(e: rmppi_core::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn load(args: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("harness.seed={seed}"));
    }
    let cfg = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::usage(format!("config file not found: {}", path.display())));
            }
            ExperimentConfig::load(path, &overrides)?
        }
        None => ExperimentConfig::default().with_overrides(&overrides)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::usage(format!("cannot create output directory {}: {e}", dir.display())))
}

fn run(args: &RunArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = load(&args.experiment)?;
    ensure_dir(&args.experiment.out)?;
    let log = run_closed_loop(&cfg)?;
    let dir = log.write_outputs(&args.experiment.out)?;
    let s = &log.summary;
    let _ = writeln!(
        out,
        "{} {} seed {}: {} steps, crashes {}, mean cost {:.4}, max dF {:.3} -> {}",
        s.name,
        s.controller.name(),
        s.seed,
        s.steps,
        s.crashes,
        s.mean_cost,
        s.max_dfe,
        dir.display()
    );
    Ok(())
}

fn compare(args: &CompareArgs, out: &mut dyn Write) -> CmdResult {
    let base = load(&args.experiment)?;
    let mut configs = Vec::new();
    for name in &args.controllers {
        let kind: ControllerKind = match name.as_str() {
            "mppi" => ControllerKind::Mppi,
            "tube" => ControllerKind::Tube,
            "rmppi" => ControllerKind::Rmppi,
            other => return Err(Failure::usage(format!("unknown controller `{other}`"))),
        };
        let mut c = base.clone();
        c.harness.controller = kind;
        c.harness.name = kind.name().to_string();
        configs.push(c);
    }
    check_comparable(&configs)?;
    let dir = args.experiment.out.join(&base.harness.name);
    ensure_dir(&dir)?;
    let logs = run_all(&configs)?;
    for log in &logs {
        log.write_outputs(&dir)?;
    }
    let rows: Vec<ComparisonRow> = logs.iter().map(ComparisonRow::from_log).collect();
    let file = File::create(dir.join("comparison.csv"))
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", dir.join("comparison.csv").display())))?;
    write_comparison_csv(&rows, file)?;
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<6} completed {:<5} crashes {} mean cost {:.4} max dF {:.3}",
            r.controller.name(),
            r.completed,
            r.crashes,
            r.mean_cost,
            r.max_dfe
        );
    }
    let _ = writeln!(out, "-> {}", dir.join("comparison.csv").display());
    Ok(())
}

fn verify(args: &VerifyArgs, out: &mut dyn Write) -> CmdResult {
    let path = if args.log.is_dir() {
        args.log.join("runlog.csv")
    } else {
        args.log.clone()
    };
    let file = File::open(&path).map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))?;
    let r = verify_bound_csv(file)?;
    let within = 1.0 - r.violation_rate;
    let _ = writeln!(
        out,
        "{} steps checked, {} violations ({:.2}% within), mean gap {:.3}; without D: {} violations, mean gap {:.3}",
        r.checked,
        r.violations,
        within * 100.0,
        r.mean_gap,
        r.violations_no_d,
        r.mean_gap_no_d
    );
    if within < args.min_within {
        return Err(Failure::check(format!(
            "bound held on {:.2}% of steps, below the required {:.2}%",
            within * 100.0,
            args.min_within * 100.0
        )));
    }
    Ok(())
}

fn run_selftest(args: &SelftestArgs, out: &mut dyn Write) -> CmdResult {
    let results = selftest::run_all(args.seed);
    for c in &results {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag}  {}: {}", c.name, c.detail);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::check(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Run(a) => run(a, out),
        Command::Compare(a) => compare(a, out),
        Command::VerifyBound(a) => verify(a, out),
        Command::Selftest(a) => run_selftest(a, out),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match dispatch(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
