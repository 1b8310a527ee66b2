//! Front end of the laboratory: each subcommand reads its inputs, writes
//! JSON/CSV reports into the output directory and maps the outcome to a
//! documented exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod input;
pub mod io;
pub mod verify;

use io::{Failure, Out};

/// Environment variable that takes precedence over `--out`.
pub const OUT_ENV: &str = "GJE_LAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "gje-lab", version, about = "Generated Jacobian equation laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Validate a generating function and write its normalized form.
    Define,
    /// Scan the curvature tensor over the window.
    ScanMtw,
    /// Solve a semi-discrete problem.
    Solve,
    /// Run inequality suites against the window constants.
    Verify,
    /// Measure conditions and Hölder exponent of a solved problem.
    Diagnose,
    /// Collect the reports of the output directory into a summary.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Define => "define",
            Command::ScanMtw => "scan-mtw",
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Diagnose => "diagnose",
            Command::Report => "report",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Spec JSON file, or a builtin as `NAME[:n]`.
    #[arg(long, global = true)]
    pub spec: Option<String>,
    /// Problem JSON file.
    #[arg(long, global = true)]
    pub problem: Option<PathBuf>,
    /// Window JSON file; defaults to a window centred in X.
    #[arg(long, global = true)]
    pub window: Option<PathBuf>,
    /// Lattice points per axis for window scans.
    #[arg(long, global = true, default_value_t = 5, value_parser = clap::value_parser!(usize))]
    pub grid: usize,
    /// Solver tolerance, overriding the problem file.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated verify suites, or `full`.
    #[arg(long, global = true, default_value = "full")]
    pub suite: String,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Integrability exponent of the source density (`inf` allowed).
    #[arg(long, global = true, default_value_t = f64::INFINITY)]
    pub p: f64,
    /// Lower end of the fit's scale window; defaults to the mesoscale.
    #[arg(long, global = true)]
    pub h_min: Option<f64>,
}

fn out_dir(flag: &Path) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| flag.to_path_buf())
}

/// `--out` read from unparsed arguments, for reporting parse failures.
fn raw_out_flag(args: &[OsString]) -> PathBuf {
    let mut it = args.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--out" {
            if let Some(v) = it.next() {
                return PathBuf::from(v.as_ref());
            }
        } else if let Some(v) = a.strip_prefix("--out=") {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("out")
}

fn validate(c: &Common) -> Result<(), Failure> {
    if matches!(c.tol, Some(t) if !(t > 0.0)) {
        return Err(Failure::usage("--tol must be positive"));
    }
    if c.grid < 2 {
        return Err(Failure::usage("--grid must be at least 2"));
    }
    if c.workers == Some(0) {
        return Err(Failure::usage("--workers must be positive"));
    }
    Ok(())
}

fn dispatch(cmd: Command, c: &Common, out: &Out) -> io::CmdResult {
    validate(c)?;
    match cmd {
        Command::Define => commands::define(c, out),
        Command::ScanMtw => commands::scan_mtw(c, out),
        Command::Solve => commands::solve(c, out),
        Command::Verify => verify::verify(c, out),
        Command::Diagnose => commands::diagnose(c, out),
        Command::Report => commands::report(c, out),
    }
}

/// Parses `args` (program name first) and runs the command; returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            if let Ok(out) = Out::open(&out_dir(&raw_out_flag(&args)), "usage") {
                out.write_error(&Failure::usage(e.kind().to_string()));
            }
            return 1;
        }
    };
    let out = match Out::open(&out_dir(&cli.common.out), cli.command.name()) {
        Ok(o) => o,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return 1;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.common.workers {
        pool = pool.num_threads(w);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command, &cli.common, &out)),
        Err(e) => Err(Failure::usage(format!("cannot start workers: {e}"))),
    };
    let code = match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            out.write_error(&f);
            f.code
        }
    };
    out.write_meta(code);
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<OsString> {
        list.iter().map(OsString::from).collect()
    }

    #[test]
    fn raw_out_flag_forms() {
        assert_eq!(raw_out_flag(&args(&["gje-lab", "define", "--bogus", "--out", "d1"])), PathBuf::from("d1"));
        assert_eq!(raw_out_flag(&args(&["gje-lab", "--out=d2"])), PathBuf::from("d2"));
        assert_eq!(raw_out_flag(&args(&["gje-lab", "define"])), PathBuf::from("out"));
    }
}
