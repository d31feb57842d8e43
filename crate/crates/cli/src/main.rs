mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;
use error::{CliError, Result};
use stages::Workdir;

const THREADS_VAR: &str = "CONDEEPMOD_THREADS";

#[derive(Parser, Debug)]
#[command(name = "condeepmod", about = "Unsupervised speech separation pipeline")]
struct Args {
    /// Root directory holding every artifact.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// JSON pipeline configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set head.hidden=128`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand, Debug)]
enum Stage {
    /// Synthesize the speaker corpus and the evaluation mixtures.
    Synth {
        /// Shorthand for `--set corpus.speakers=N`.
        #[arg(long)]
        speakers: Option<usize>,
        /// Shorthand for `--set mixtures.count=N`.
        #[arg(long)]
        mixtures: Option<usize>,
    },
    /// Contrastively pretrain the frame encoder on the corpus.
    Pretrain {
        /// Shorthand for `--set pretrain.steps=N`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build the thresholded similarity graph of every mixture.
    BuildGraph,
    /// Train assignment heads on the mixture graphs.
    TrainHead,
    /// Harden assignments into masks and write the estimated sources.
    Separate,
    /// Score the estimates against the reference sources.
    Eval,
    /// Loss, conductance and modularity across pretraining checkpoints.
    TrendReport,
}

impl Args {
    /// `--set` entries followed by the shorthand flags, so a shorthand wins
    /// over a `--set` of the same key.
    fn overrides(&self) -> Vec<String> {
        let mut all = self.overrides.clone();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                all.push(format!("{key}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        match &self.stage {
            Stage::Synth { speakers, mixtures } => {
                push("corpus.speakers", speakers.map(|v| v.to_string()));
                push("mixtures.count", mixtures.map(|v| v.to_string()));
            }
            Stage::Pretrain { steps } => push("pretrain.steps", steps.map(|v| v.to_string())),
            _ => {}
        }
        all
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR}={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(args: &Args) -> Result<stages::Summary> {
    configure_threads()?;
    let config = PipelineConfig::load(args.config.as_deref(), &args.overrides())?;
    let wd = Workdir::new(&args.workdir, config);
    match args.stage {
        Stage::Synth { .. } => stages::synth(&wd),
        Stage::Pretrain { .. } => stages::pretrain(&wd),
        Stage::BuildGraph => stages::build_graph_stage(&wd),
        Stage::TrainHead => stages::train_head_stage(&wd),
        Stage::Separate => stages::separate_stage(&wd),
        Stage::Eval => stages::eval(&wd),
        Stage::TrendReport => stages::trend_report(&wd),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(&args) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
