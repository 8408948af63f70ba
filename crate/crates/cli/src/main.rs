use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use dyad_cli::{
    cmd_datagen, cmd_eval, cmd_layout, cmd_pipeline, cmd_sample, cmd_train, config::Paths, parse_source_mix, CliError,
    GlobalConfig, EXIT_USAGE,
};
use dyad_core::datagen::SourceMix;
use dyad_core::diffusion::SamplerConfig;

/// Two-person 3D facial motion from mixed conversation audio.
#[derive(Parser, Debug)]
#[command(name = "dyad", version)]
struct Cli {
    /// TOML configuration; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Put the dataset, checkpoint and report directories under this root.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Datagen {
        /// Number of dyads.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Source weights, e.g. `conversation=0.5,synthetic_dub=0.5`.
        #[arg(long, value_parser = parse_source_mix)]
        source_mix: Option<SourceMix>,
    },
    /// Train one stage on the training split.
    Train {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to start from (stage 2 defaults to the stage-1 checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Override the number of updates.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample both participants for the test split.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// DDIM steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance weight.
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Score sampled dyads and write the metric report.
    Eval,
    /// Initial head translations from a text description.
    Layout {
        #[arg(long)]
        prompt: String,
        /// Query the configured LLM endpoint instead of the example bank.
        #[arg(long)]
        live: bool,
    },
    /// Run every stage end to end.
    Pipeline,
}

fn print_json(v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::runtime("output", e))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => GlobalConfig::load(p)?,
        None => GlobalConfig::desk(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(root) = &cli.workdir {
        config.paths = Paths::under(root);
    }
    config.validate()?;
    match cli.command {
        Command::Datagen { n_samples, source_mix } => print_json(&cmd_datagen(
            &config,
            n_samples.unwrap_or(config.data.n_samples),
            source_mix.unwrap_or(config.data.mix),
        )?),
        Command::Train { stage, init, steps } => {
            if let Some(n) = steps {
                let c = if stage == 1 {
                    &mut config.train.stage1
                } else {
                    &mut config.train.stage2
                };
                c.total_steps = n;
                c.warmup_steps = c.warmup_steps.min(n);
            }
            print_json(&cmd_train(&config, stage, init.as_deref())?)
        }
        Command::Sample {
            checkpoint,
            steps,
            guidance,
        } => {
            let sampler = SamplerConfig {
                num_steps: steps.unwrap_or(config.sampler.num_steps),
                guidance_weight: guidance.unwrap_or(config.sampler.guidance_weight),
                seed: config.seed,
            };
            print_json(&cmd_sample(&config, checkpoint.as_deref(), sampler)?)
        }
        Command::Eval => print_json(&cmd_eval(&config)?),
        Command::Layout { prompt, live } => print_json(&cmd_layout(&config, &prompt, live)?),
        Command::Pipeline => print_json(&cmd_pipeline(&config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in stage `{}`: {}", e.stage, e.message);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
