//! `metaover`: reproduce the simulation figures, run custom sweeps, solve a
//! single configuration, or analyze a spectrum.

mod commands;
mod config;
mod error;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaover::MetaMethod;

use crate::config::Overrides;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "metaover", version, about = "Meta-learning (ERM, MAML, iMAML) on overparameterized linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds per grid cell.
    #[arg(long)]
    num_seeds: Option<usize>,
    /// Constant in the k* definition (>= 1).
    #[arg(long)]
    c1: Option<f64>,
    /// ERM fits train and validation samples together.
    #[arg(long)]
    erm_pool: bool,
    /// Monte-Carlo draws for the excess-risk cross-check; 0 disables it.
    #[arg(long)]
    mc_draws: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "METAOVER_WORKERS", default_value_t = 0)]
    workers: usize,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            num_seeds: self.num_seeds,
            c1: self.c1,
            erm_pool: self.erm_pool,
            mc_draws: self.mc_draws,
            workers: self.workers,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Erm,
    Maml,
    Imaml,
}

#[derive(Subcommand)]
enum Command {
    /// Rerun one of the figure presets and write CSVs, charts and a manifest.
    Reproduce {
        /// fig3_double_descent, fig4_example1, fig5_example2 or fig6_lemmas
        figure: String,
        /// Existing directory for the outputs.
        out_dir: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Effective ranks, benign ratios and safety checks of a spectrum file.
    Analyze {
        /// One eigenvalue per line, descending; several files are treated as per-task spectra.
        #[arg(required = true)]
        spectra: Vec<PathBuf>,
        /// Total sample count N·M.
        #[arg(long)]
        nm: usize,
        #[arg(long, default_value_t = 1.0)]
        c1: f64,
        #[arg(long, value_enum, requires = "hyper")]
        method: Option<MethodArg>,
        /// alpha for MAML, gamma for iMAML.
        #[arg(long)]
        hyper: Option<f64>,
        /// Also write the report as a one-row CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solve a single-cell configuration for each seed.
    Solve {
        config: PathBuf,
        /// Write solve.csv and manifest.json here instead of printing.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Include the full meta solution vector in the output.
        #[arg(long)]
        dump_theta: bool,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the grid described by a configuration file.
    Sweep {
        config: PathBuf,
        /// Overrides output.dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn method(kind: Option<MethodArg>, hyper: Option<f64>) -> CliResult<Option<MetaMethod>> {
    Ok(match (kind, hyper) {
        (None, _) => None,
        (Some(MethodArg::Erm), _) => Some(MetaMethod::Erm),
        (Some(MethodArg::Maml), Some(alpha)) => Some(MetaMethod::Maml { alpha }),
        (Some(MethodArg::Imaml), Some(gamma)) => Some(MetaMethod::Imaml { gamma }),
        (Some(_), None) => return Err(CliError::user("usage", "--method needs --hyper")),
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Reproduce { figure, out_dir, flags } => commands::reproduce(&figure, &out_dir, &flags.overrides()),
        Command::Sweep { config, out_dir, flags } => commands::sweep(&config, out_dir.as_deref(), &flags.overrides()),
        Command::Solve { config, out_dir, dump_theta, flags } => {
            let text = commands::solve(&config, out_dir.as_deref(), dump_theta, &flags.overrides())?;
            print!("{text}");
            Ok(())
        }
        Command::Analyze { spectra, nm, c1, method: kind, hyper, csv } => {
            let args = commands::AnalyzeArgs { spectra: &spectra, nm, c1, method: method(kind, hyper)?, csv: csv.as_deref() };
            print!("{}", commands::analyze(&args)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code as u8)
        }
    }
}
