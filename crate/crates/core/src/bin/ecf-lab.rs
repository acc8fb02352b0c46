use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecf_core::experiment::{
    self, AblateArgs, Common, EfficiencyArgs, LoadedSpec, SimulateArgs, SpecSource, TrainArgs,
};
use ecf_core::{OodShift, Result};

/// Synthetic laboratory for counterfactually augmented data and ECF training.
#[derive(Parser)]
#[command(name = "ecf-lab", version)]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Built-in feature spec: reference or hard. Ignored when --spec is given.
    #[arg(long, global = true, default_value = experiment::PRESET_REFERENCE)]
    preset: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArg {
    /// Feature spec TOML file.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArg {
    /// Training config TOML file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form classifiers, myopia cosines and the optimal interpolation.
    Analyze {
        #[command(flatten)]
        spec: SpecArg,
    },
    /// Monte Carlo Fisher discriminants against their closed forms.
    Simulate {
        #[command(flatten)]
        spec: SpecArg,
        /// Original-only sample count (multiple of 4); CAD uses n/2 pairs.
        #[arg(long, default_value_t = 200_000)]
        n: usize,
        /// Comma-separated alignment noise standard deviations.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5")]
        noise: Vec<f64>,
        /// Also write the sampled datasets as CSV.
        #[arg(long)]
        export_data: bool,
    },
    /// Train one model on counterfactual pairs.
    Train {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 20_000)]
        eval_n: usize,
    },
    /// Full ECF against its ablations over a seed sweep.
    Ablate {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Number of training seeds.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// flip, zero or scale(k).
        #[arg(long, default_value = "flip")]
        shift: OodShift,
        #[arg(long, default_value_t = 20_000)]
        eval_n: usize,
    },
    /// CAD pairs against equally many original sentences, per training size.
    Efficiency {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated pair counts.
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,400")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value = "flip")]
        shift: OodShift,
        #[arg(long, default_value_t = 20_000)]
        eval_n: usize,
    },
}

fn load_spec(cli_preset: &str, arg: &SpecArg) -> Result<LoadedSpec> {
    match &arg.spec {
        Some(path) => experiment::load_spec(SpecSource::File(path)),
        None => experiment::load_spec(SpecSource::Preset(cli_preset)),
    }
}

fn run(cli: Cli) -> Result<experiment::RunManifest> {
    let common = Common {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Analyze { spec } => {
            let spec = load_spec(&cli.preset, &spec)?;
            experiment::cmd_analyze(&common, &spec)
        }
        Command::Simulate {
            spec,
            n,
            noise,
            export_data,
        } => {
            let spec = load_spec(&cli.preset, &spec)?;
            let args = SimulateArgs {
                n,
                noise_sds: noise,
                export_data,
            };
            experiment::cmd_simulate(&common, &spec, &args)
        }
        Command::Train {
            spec,
            config,
            pairs,
            noise,
            eval_n,
        } => {
            let spec = load_spec(&cli.preset, &spec)?;
            let config = experiment::load_config(config.config.as_deref())?;
            let args = TrainArgs {
                pairs,
                noise_sd: noise,
                eval_n,
            };
            experiment::cmd_train(&common, &spec, &config, &args)
        }
        Command::Ablate {
            spec,
            config,
            pairs,
            noise,
            seeds,
            shift,
            eval_n,
        } => {
            let spec = load_spec(&cli.preset, &spec)?;
            let config = experiment::load_config(config.config.as_deref())?;
            let args = AblateArgs {
                pairs,
                noise_sd: noise,
                n_seeds: seeds,
                shift,
                eval_n,
            };
            experiment::cmd_ablate(&common, &spec, &config, &args)
        }
        Command::Efficiency {
            spec,
            config,
            sizes,
            noise,
            seeds,
            shift,
            eval_n,
        } => {
            let spec = load_spec(&cli.preset, &spec)?;
            let config = experiment::load_config(config.config.as_deref())?;
            let args = EfficiencyArgs {
                sizes,
                noise_sd: noise,
                n_seeds: seeds,
                shift,
                eval_n,
            };
            experiment::cmd_efficiency(&common, &spec, &config, &args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli.out_dir.clone();
    match run(cli) {
        Ok(m) => {
            for f in &m.outputs {
                println!("{}", out_dir.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => ExitCode::from(experiment::report_error(&e, std::io::stderr()) as u8),
    }
}
