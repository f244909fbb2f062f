mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use potd_core::eval::ApMethod;
use potd_core::labelling::Labeller;

use context::{Context, Failure};

#[derive(Debug, Parser)]
#[command(name = "potd", version, about = "Progressive low-shot to weakly supervised transfer detection")]
struct Cli {
    /// Key-value config file (stage keys, `world.*` keys, experiment keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed; drawn at random and printed when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for experiment cells (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and its training, weak and test scene sets.
    World,
    /// Train one stage and write its checkpoint, loss curves and report.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        /// Input checkpoint: the source model for lstd, the warm-up for wstd.
        #[arg(long)]
        init: Option<PathBuf>,
        /// World file to train in; regenerated from config and seed if omitted.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, value_enum)]
        labeller: Option<LabellerArg>,
        /// Epochs for this stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate detections (or a checkpoint) against a scene set.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        detections: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Refinement classifier to evaluate (1-based); defaults to the detection head.
        #[arg(long, requires = "checkpoint")]
        classifier: Option<usize>,
        #[arg(long, value_enum)]
        ap_method: Option<ApMethodArg>,
    },
    /// Run a registered experiment over a seed list.
    Experiment {
        name: String,
        /// `0,1,2` or `0..20`; defaults to the config's `seeds`, else --seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated shot counts.
        #[arg(long)]
        shots: Option<String>,
    },
    /// Central-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long)]
        tolerance: Option<f64>,
        /// Run a single check by name.
        #[arg(long)]
        only: Option<String>,
        #[arg(long)]
        instances: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Stage {
    Source,
    Lstd,
    Wstd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LabellerArg {
    Rol,
    Oicr,
}

impl From<LabellerArg> for Labeller {
    fn from(l: LabellerArg) -> Self {
        match l {
            LabellerArg::Rol => Labeller::Rol,
            LabellerArg::Oicr => Labeller::Oicr,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ApMethodArg {
    #[value(name = "voc07_11point")]
    Voc07,
    #[value(name = "all_points")]
    AllPoints,
}

impl From<ApMethodArg> for ApMethod {
    fn from(a: ApMethodArg) -> Self {
        match a {
            ApMethodArg::Voc07 => ApMethod::Voc07_11point,
            ApMethodArg::AllPoints => ApMethod::AllPoints,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("--threads: {e}")))?;
    }
    let mut ctx = Context::new(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out_dir)?;
    match cli.command {
        Command::World => commands::world(&mut ctx),
        Command::Train {
            stage,
            init,
            world,
            labeller,
            epochs,
        } => commands::train(&mut ctx, stage, init, world, labeller.map(Into::into), epochs),
        Command::Eval {
            scenes,
            detections,
            checkpoint,
            classifier,
            ap_method,
        } => commands::eval(&mut ctx, scenes, detections, checkpoint, classifier, ap_method.map(Into::into)),
        Command::Experiment { name, seeds, shots } => commands::experiment(&mut ctx, &name, seeds, shots),
        Command::Gradcheck {
            tolerance,
            only,
            instances,
        } => commands::gradcheck(&mut ctx, tolerance, only, instances),
    }?;
    ctx.finish()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
