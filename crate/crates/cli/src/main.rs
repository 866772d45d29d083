// SPDX-License-Identifier: Apache-2.0

//! `hdgm`: fit, predict, run scenarios, cross-validate, diagnose and
//! simulate from the command line.
//!
//! Exit codes: 0 success, 2 input or schema error, 3 numerical failure,
//! 4 outputs written but EM did not converge.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdgm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "hdgm", version, about = "Heteroskedastic HDGM toolkit")]
pub struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EmFlags {
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model to a panel CSV and write the fit artifact and reports.
    Fit {
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        em: EmFlags,
    },
    /// Predict the response on a grid CSV.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run covariate-reduction scenarios on a grid.
    Scenario {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to these configured scenarios (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Ad-hoc scenario target covariate (with --r).
        #[arg(long, requires = "r")]
        target: Option<String>,
        /// Ad-hoc reduction factor in [0, 1].
        #[arg(long, requires = "target")]
        r: Option<f64>,
        /// Name of the ad-hoc scenario.
        #[arg(long, default_value = "scenario")]
        name: String,
    },
    /// Leave-one-station-out cross-validation.
    Cv {
        #[arg(long)]
        panel: Option<PathBuf>,
        /// Held-out station ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        holdout: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        em: EmFlags,
    },
    /// Residuals, residual ACF and the empirical variogram.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_lag: Option<usize>,
        #[arg(long)]
        space_bins: Option<usize>,
        #[arg(long)]
        time_lags: Option<usize>,
    },
    /// Simulate a panel (and optionally a grid) from a simulation TOML.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        /// Panel CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        latent_out: Option<PathBuf>,
        /// Grid CSV path; needs a [grid] table in the spec.
        #[arg(long)]
        grid_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
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
    match commands::run(cli) {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NotConverged) => {
            eprintln!("{}", serde_json::json!({"warning": "not_converged", "exit": 4}));
            ExitCode::from(4)
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                serde_json::json!({"error": e.kind(), "exit": code, "message": e.to_string()})
            );
            ExitCode::from(code)
        }
    }
}
