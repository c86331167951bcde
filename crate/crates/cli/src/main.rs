use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semsr::config::parse_config;
use semsr::pipeline::{Command, Overrides, Pipeline};

/// Train, run and evaluate the semantics-prompted super-resolution pipeline.
///
/// Commands follow the dependency chain make-dataset, train-teacher,
/// train-vae, train-base, train-dape, train-sr, then infer, evaluate, ablate.
#[derive(Debug, Parser)]
#[command(name = "semsr", version = semsr::pipeline::VERSION)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Replaces the configured seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Replaces the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args, Default)]
struct Steps {
    /// Training iterations for this stage.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct Sampling {
    /// Sampler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Start sampling from pure noise instead of the noised LR latent.
    #[arg(long)]
    no_lre: bool,
    /// Hard-prompt decoding threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate (or ingest) HR images, tags and fixed LR evaluation pairs.
    MakeDataset,
    /// Train the tagging teacher on HR images.
    TrainTeacher(Steps),
    /// Train the image autoencoder.
    TrainVae(Steps),
    /// Train the tag-conditioned base denoiser on VAE latents.
    TrainBase(Steps),
    /// Adapt the teacher into the degradation-aware prompt extractor.
    TrainDape(Steps),
    /// Train the control branch with the base model, VAE and extractor frozen.
    TrainSr(Steps),
    /// Super-resolve the test split (or --input) and write PNGs with JSON sidecars.
    Infer {
        #[command(flatten)]
        sampling: Sampling,
        /// Comma-separated tags replacing every extracted hard prompt.
        #[arg(long, value_name = "TAGS")]
        prompt_override: Option<String>,
        /// Read checkpoints from this directory instead of the run's.
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
        /// Super-resolve the LR PNGs in this directory instead of the test split.
        #[arg(long, value_name = "DIR")]
        input: Option<PathBuf>,
    },
    /// Score the last infer run against its references.
    Evaluate,
    /// Run every ablation arm on the benchmark and write comparison tables.
    Ablate(Sampling),
}

impl Cmd {
    fn split(self) -> (Command, Overrides) {
        let train = |c: Command, s: Steps| {
            (
                c,
                Overrides {
                    steps: s.steps,
                    ..Default::default()
                },
            )
        };
        let sample = |s: Sampling| Overrides {
            steps: s.steps,
            no_lre: s.no_lre,
            threshold: s.threshold,
            ..Default::default()
        };
        match self {
            Cmd::MakeDataset => (Command::MakeDataset, Overrides::default()),
            Cmd::TrainTeacher(s) => train(Command::TrainTeacher, s),
            Cmd::TrainVae(s) => train(Command::TrainVae, s),
            Cmd::TrainBase(s) => train(Command::TrainBase, s),
            Cmd::TrainDape(s) => train(Command::TrainDape, s),
            Cmd::TrainSr(s) => train(Command::TrainSr, s),
            Cmd::Infer {
                sampling,
                prompt_override,
                checkpoints,
                input,
            } => (
                Command::Infer,
                Overrides {
                    prompt_override,
                    checkpoints,
                    input,
                    ..sample(sampling)
                },
            ),
            Cmd::Evaluate => (Command::Evaluate, Overrides::default()),
            Cmd::Ablate(s) => (Command::Ablate, sample(s)),
        }
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn run(cli: Cli) -> Result<(), semsr::Error> {
    let Some(path) = cli.config else {
        return Err(semsr::Error::Argument("--config PATH is required".into()));
    };
    let mut cfg = parse_config(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let pipeline = Pipeline::new(cfg)?;
    let (command, overrides) = cli.command.split();
    let outcome = pipeline.run(command, &overrides)?;
    for line in &outcome.summary {
        println!("{line}");
    }
    println!(
        "{} finished in {:.1}s; manifest {}",
        command,
        outcome.manifest.wall_time_s,
        outcome.manifest_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
