//! `stoch-unfold` command line.
//!
//! Exit codes: 0 when every assertion passes, 2 when one fails (results are
//! still written), 1 on usage or configuration errors.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use stoch_unfold::study::{emit_plotdata, StudyResult};
use stoch_unfold::{Error, Result};

pub use config::RunConfig;

/// Environment variable holding the default output directory.
pub const OUT_ENV: &str = "STOCH_UNFOLD_OUT";
pub const DEFAULT_OUT: &str = "stoch-unfold-out";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    UnfoldTest,
    Cell,
    Minimize,
    ConvergenceStudy,
    QuenchedStudy,
    Flow,
    Korn,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::UnfoldTest => "unfold-test",
            Subcommand::Cell => "cell",
            Subcommand::Minimize => "minimize",
            Subcommand::ConvergenceStudy => "convergence-study",
            Subcommand::QuenchedStudy => "quenched-study",
            Subcommand::Flow => "flow",
            Subcommand::Korn => "korn",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stoch-unfold", version, about = "Stochastic unfolding and homogenization studies")]
pub struct Args {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = DEFAULT_OUT)]
    pub out: PathBuf,
}

/// Result files and the study record of one run.
#[derive(Debug)]
pub struct Outcome {
    pub result: StudyResult,
    pub files: Vec<PathBuf>,
}

fn missing(cmd: Subcommand) -> Error {
    Error::Parse(format!("config has no [{}] section", cmd.name()))
}

/// Runs one subcommand in the current thread pool and writes its outputs.
pub fn execute(cmd: Subcommand, cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let env = cfg.environment()?;
    let (result, mut files) = match cmd {
        Subcommand::UnfoldTest => commands::unfold_test(&env, &cfg.unfold_test.clone().unwrap_or_default(), cfg.seed, out)?,
        Subcommand::Cell => (commands::cell(&env, cfg.cell.as_ref().ok_or_else(|| missing(cmd))?, cfg.seed)?, Vec::new()),
        Subcommand::Minimize => commands::minimize(&env, cfg.minimize.as_ref().ok_or_else(|| missing(cmd))?, out)?,
        Subcommand::ConvergenceStudy => {
            let c = cfg.convergence_study.as_ref().ok_or_else(|| missing(cmd))?;
            (stoch_unfold::varmin::convergence_study(&env, c)?, Vec::new())
        }
        Subcommand::QuenchedStudy => {
            let c = cfg.quenched_study.as_ref().ok_or_else(|| missing(cmd))?;
            (stoch_unfold::varmin::quenched_study(&env, c)?, Vec::new())
        }
        Subcommand::Flow => (commands::flow(&env, cfg.flow.as_ref().ok_or_else(|| missing(cmd))?)?, Vec::new()),
        Subcommand::Korn => (commands::korn(&env, &cfg.korn.clone().unwrap_or_default(), cfg.seed)?, Vec::new()),
    };
    files.extend(result.write(out, cmd.name())?);
    if matches!(cmd, Subcommand::ConvergenceStudy | Subcommand::QuenchedStudy | Subcommand::Flow) {
        files.extend(emit_plotdata(&result, out)?);
    }
    Ok(Outcome { result, files })
}

fn report(cmd: Subcommand, outcome: &Outcome) {
    println!("{}: {} assertion(s)", cmd.name(), outcome.result.assertions.len());
    for a in &outcome.result.assertions {
        println!("  {} {:<40} {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    for f in &outcome.files {
        println!("  wrote {}", f.display());
    }
}

/// Parses `argv`, runs, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return EXIT_ERROR;
        }
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    match pool.install(|| execute(args.subcommand, &cfg, &args.out)) {
        Ok(outcome) => {
            report(args.subcommand, &outcome);
            if outcome.result.passed() {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
