mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use blinknet::config::RunConfig;
use blinknet::model::Preset;
use clap::{ArgAction, Args, Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Turn-signal intent classifier: data generation, training and analysis.
#[derive(Debug, Parser)]
#[command(name = "blinknet", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration, or `default` for the preset alone.
    #[arg(long, global = true, value_name = "PATH|default")]
    config: Option<String>,

    /// Dotted-key override applied after the config file, e.g. `train.lr=1e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for every artifact of the run.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Run seed; overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Base preset the configuration is layered on.
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,

    /// More log output; repeat for more detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    /// Only log warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test dataset into the output directory.
    Gen,
    /// Train a model and keep the checkpoint with the best validation F1.
    Train {
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Per-frame predictions and attention-mask images for a slice of a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Index of the first sequence in the split.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Number of sequences to run.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Skip writing attention-mask images.
        #[arg(long)]
        no_masks: bool,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Random draws per operation and for the end-to-end check.
        #[arg(long, default_value_t = 3)]
        draws: u64,
        /// Fraction of end-to-end parameter entries probed.
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
    },
    /// Train every ablation variant over several seeds and compare on test.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Subset of variants to run; all when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: blinknet::Error| e.to_string())
}

/// Configuration problems exit with status 2 like usage errors.
#[derive(Debug)]
pub(crate) struct UsageError(pub(crate) String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

impl GlobalArgs {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let text = match self.config.as_deref() {
            None | Some("default") => None,
            Some(path) => Some(
                std::fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("--config {path}: {e}")))?,
            ),
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::resolve(self.preset, text.as_deref(), &overrides).map_err(|e| {
            let origin = self.config.as_deref().filter(|c| *c != "default").unwrap_or("--set");
            UsageError(format!("{origin}: {e}")).into()
        })
    }
}

fn init_logging(args: &GlobalArgs) {
    let level = match (args.quiet, args.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        (false, _) => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_target(false)
        .init();
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<blinknet::Error>(), Some(blinknet::Error::Config { .. }))
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.global.run_config()?;
    let out = &cli.global.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    commands::write_snapshot(out, &config)?;
    match cli.command {
        Command::Gen => commands::gen(&config, out),
        Command::Train { data } => commands::train(&config, &data, out),
        Command::Eval { checkpoint, data, split } => commands::eval(&config, &checkpoint, &data, &split, out),
        Command::Infer {
            checkpoint,
            data,
            split,
            start,
            count,
            no_masks,
        } => commands::infer(&config, &checkpoint, &data, &split, start..start + count, !no_masks, out),
        Command::Gradcheck { draws, fraction } => commands::gradcheck(draws, fraction, out),
        Command::Ablate { data, seeds, variants } => commands::ablate(&config, &data, &seeds, &variants, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
