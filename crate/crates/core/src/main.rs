use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quenched::config::ExperimentKind;
use quenched::runner::{run_config_file, RunOptions};

#[derive(Parser)]
#[command(version, about = "Experiments on random perturbations of non-uniformly expanding maps")]
struct Cli {
    #[command(subcommand)]
    kind: Kind,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Replaces the `seed` key of the configuration.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Also write the plotting bundle under `plots/`.
    #[arg(long, global = true)]
    emit_plots_data: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Kind {
    OrbitDump,
    TailDecay,
    HyperbolicFreq,
    GmyBuild,
    TowerSim,
    CouplingSim,
    CorrelationDecay,
    #[command(name = "convolution-K")]
    ConvolutionK,
    G0Extract,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::OrbitDump => ExperimentKind::OrbitDump,
            Kind::TailDecay => ExperimentKind::TailDecay,
            Kind::HyperbolicFreq => ExperimentKind::HyperbolicFreq,
            Kind::GmyBuild => ExperimentKind::GmyBuild,
            Kind::TowerSim => ExperimentKind::TowerSim,
            Kind::CouplingSim => ExperimentKind::CouplingSim,
            Kind::CorrelationDecay => ExperimentKind::CorrelationDecay,
            Kind::ConvolutionK => ExperimentKind::ConvolutionK,
            Kind::G0Extract => ExperimentKind::G0Extract,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Some(config) = cli.run.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let opts = RunOptions {
        out: cli.run.out,
        workers: cli.run.workers,
        seed_override: cli.run.seed_override,
        emit_plots_data: cli.run.emit_plots_data,
    };
    let kind = ExperimentKind::from(cli.kind);
    match run_config_file(kind, &config, &opts) {
        Ok(m) => {
            println!("{kind}: {} files, seed {}, manifest {}", m.files.len(), m.seed, opts.out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
