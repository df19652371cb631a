//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Outcome, Output};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::triples;

#[derive(Debug, Parser)]
#[command(
    name = "bernstein",
    version,
    about = "Bernstein diffusion experiments: solve, simulate, verify"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config value or out/<name>.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the ensemble size.
    #[arg(long, value_name = "N")]
    pub paths: Option<usize>,
    /// Suppress progress and check lines on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the boundary system; writes pair.json, marginals.csv, drift.csv.
    BridgeSolve(Common),
    /// Simulate the forward ensemble of a solved pair; writes ensemble.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Pair file; defaults to pair.json in the output directory.
        #[arg(long, value_name = "PATH")]
        pair: Option<PathBuf>,
    },
    /// Run the full invariant suite; writes report.json.
    Verify(Common),
    /// Check symmetry triples and their Noether charges; writes noether.csv.
    Noether {
        #[command(flatten)]
        common: Common,
        /// Catalog triple name; repeatable. Defaults to the config list.
        #[arg(long, value_name = "NAME")]
        triple: Vec<String>,
        /// JSON file with a triple {name, T, Q, phi} or an array of them.
        #[arg(long, value_name = "PATH")]
        triple_file: Option<PathBuf>,
    },
    /// Value function, optimal drift and the control bound; writes value_function.csv.
    Hjb(Common),
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Output)> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(n) = self.paths {
            config.ensemble.paths = n;
        }
        config.validate()?;
        let out = Output::new(config.output_dir(self.out.as_deref()), self.quiet)?;
        Ok((config, out))
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::BridgeSolve(c) => {
            let (config, out) = c.load()?;
            commands::bridge_solve(&config, &out)
        }
        Command::Simulate { common, pair } => {
            let (config, out) = common.load()?;
            commands::simulate(&config, pair.as_deref(), &out)
        }
        Command::Verify(c) => {
            let (config, out) = c.load()?;
            commands::verify(&config, &out)
        }
        Command::Noether {
            common,
            triple,
            triple_file,
        } => {
            let (config, out) = common.load()?;
            let mut chosen = triple.iter().map(|n| triples::lookup(n)).collect::<Result<Vec<_>>>()?;
            if let Some(path) = triple_file {
                chosen.extend(triples::load(&path)?);
            }
            commands::noether(&config, &chosen, &out)
        }
        Command::Hjb(c) => {
            let (config, out) = c.load()?;
            commands::hjb(&config, &out)
        }
    }
}

/// Exit code for a finished run: 0, 1 usage, 2 non-convergence, 3 failed check.
pub fn exit_code(result: &std::result::Result<Outcome, Error>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::VerificationFailed) => 3,
        Err(e) => e.exit_code(),
    }
}
