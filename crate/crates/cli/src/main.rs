//! `mixalign`: generate synthetic domains, build targets, estimate mixture
//! weights, train, compare and plot.

mod artifacts;
mod cmd;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::TauSpec;

#[derive(Parser)]
#[command(name = "mixalign", version, about = "Domain-mixture design in log-likelihood space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    KlCurve,
    WeightBars,
    ModelMap,
    JsdHeatmap,
    GramHeatmap,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic domain corpora and the evaluation corpus.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a target model on the boosted mixture for each seed.
    TrainTarget {
        #[arg(long)]
        config: PathBuf,
        /// Only this seed (default: every config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Run the first pass and write the aggregated weights.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Base checkpoint (default: fresh init from the seed).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Target checkpoint (.mxk) or LL table (.csv).
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        target_id: Option<String>,
        /// uniform, aggregated_lld (raw rule) or adjusted_lld (adjusted rule).
        #[arg(long, default_value = "aggregated_lld")]
        method: String,
        /// A number, `inf`, or a multiple of the LLD spread such as `1s`.
        #[arg(long)]
        tau: Option<TauSpec>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one method (or fixed weights from `estimate`) and write a report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, conflicts_with = "weights")]
        method: Option<String>,
        /// `weights.json` from `estimate`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        tau: Option<TauSpec>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        target_id: Option<String>,
        #[arg(long)]
        run_id: Option<String>,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
        /// Abort after writing the checkpoint at this step (for testing resume).
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Tabulate reports, plot their curves and check the expected ordering.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render one figure.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Needed by model_map and gram_heatmap to load the evaluation corpus.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        #[arg(long)]
        force: bool,
    },
    /// Run the property and oracle suites.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Fewer random instances per suite.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { config, force } => cmd::gen_corpus(&config, force),
        Command::TrainTarget { config, seed, force } => cmd::train_target(&config, seed, force),
        Command::Estimate {
            config,
            seed,
            base,
            target,
            target_id,
            method,
            tau,
            out,
            force,
        } => cmd::estimate(cmd::EstimateArgs {
            config,
            seed,
            base,
            target,
            target_id,
            method,
            tau,
            out,
            force,
        }),
        Command::Train {
            config,
            seed,
            method,
            weights,
            steps,
            tau,
            base,
            target,
            target_id,
            run_id,
            resume,
            force,
            stop_after,
        } => cmd::train(cmd::TrainArgs {
            config,
            seed,
            method,
            weights,
            steps,
            tau,
            base,
            target,
            target_id,
            run_id,
            resume,
            force,
            stop_after,
        }),
        Command::Compare { reports, out, force } => cmd::compare(&reports, &out, force),
        Command::Plot {
            kind,
            inputs,
            output,
            config,
            ridge,
            force,
        } => cmd::plot(kind, &inputs, &output, config.as_deref(), ridge, force),
        Command::Verify { seed, quick } => cmd::verify(seed, quick),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
