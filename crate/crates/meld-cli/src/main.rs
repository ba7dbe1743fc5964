//! `meld`: batch driver for the speech-text experiments. Every subcommand
//! reads one TOML experiment file, works inside a run directory guarded by
//! a config snapshot, and exits 0 on success, 1 on validation errors, 2 on
//! runtime failures.

mod config;
mod errors;
mod plot;
mod runs;
mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::load_config;
use crate::errors::CliResult;
use crate::runs::RunDir;

#[derive(Parser)]
#[command(name = "meld", version, about = "Mel-latent speech-text experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Directory receiving all artifacts; created on first use.
    #[arg(long, value_name = "DIR", default_value = ".")]
    run_dir: PathBuf,
    /// Config override as a dotted path, e.g. --set model.n_layers=1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite existing outputs and the config snapshot.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Extract, stack, and normalize mel features for every utterance.
    Featurize {
        #[command(flatten)]
        common: Common,
    },
    /// Train the byte-pair text tokenizer on the corpus transcripts.
    TrainBpe {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the frozen mel codebook with k-means.
    KmeansInit {
        #[command(flatten)]
        common: Common,
    },
    /// Train the model; --resume continues from the newest checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Continue prompts autoregressively and write mel + trace artifacts.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path relative to the run dir; newest if omitted.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<String>,
        /// Also invert continuations to WAV.
        #[arg(long)]
        wav: bool,
    },
    /// Beam-decode a transcript for every utterance.
    Transcribe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<String>,
    },
    /// Score transcripts against references and assemble the report.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Print a checkpoint's header as JSON.
    InspectCheckpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<String>,
    },
    /// Render a mel file as a PGM heatmap or a training log as a loss CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        mel: Option<String>,
        #[arg(long, value_name = "PATH")]
        log: Option<String>,
        /// Output path relative to the run dir; derived from the input if
        /// omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus { common }
            | Command::Featurize { common }
            | Command::TrainBpe { common }
            | Command::KmeansInit { common }
            | Command::Train { common, .. }
            | Command::Synthesize { common, .. }
            | Command::Transcribe { common, .. }
            | Command::Eval { common }
            | Command::InspectCheckpoint { common, .. }
            | Command::Plot { common, .. } => common,
        }
    }
}

fn dispatch(cmd: &Command) -> CliResult<()> {
    let common = cmd.common();
    let resolved = load_config(&common.config, &common.set)?;
    let run = RunDir::open(&common.run_dir, &resolved, common.force)?;
    match cmd {
        Command::GenCorpus { .. } => stages::gen_corpus(&run, &resolved),
        Command::Featurize { .. } => stages::featurize(&run, &resolved),
        Command::TrainBpe { .. } => stages::train_bpe_stage(&run, &resolved),
        Command::KmeansInit { .. } => stages::kmeans_init(&run, &resolved),
        Command::Train { resume, .. } => stages::train_stage(&run, &resolved, *resume),
        Command::Synthesize {
            checkpoint, wav, ..
        } => stages::synthesize(&run, &resolved, checkpoint.as_deref(), *wav),
        Command::Transcribe { checkpoint, .. } => {
            stages::transcribe(&run, &resolved, checkpoint.as_deref())
        }
        Command::Eval { .. } => stages::eval_stage(&run, &resolved),
        Command::InspectCheckpoint { checkpoint, .. } => {
            stages::inspect_checkpoint(&run, &resolved, checkpoint.as_deref())
        }
        Command::Plot { mel, log, out, .. } => stages::plot(
            &run,
            &resolved,
            mel.as_deref(),
            log.as_deref(),
            out.as_deref(),
        ),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli.command) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
