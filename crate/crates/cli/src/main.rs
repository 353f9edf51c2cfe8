use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod models;

/// Preprocessing, generative models and evaluation for MALDI-TOF spectra.
#[derive(Debug, Parser)]
#[command(name = "maldi", version)]
pub struct Cli {
    /// Random seed; overrides the `seed` field of any config file [default: 17]
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file (or directory for `experiment`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for kernel matrices and batched maths; 0 picks automatically
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Raw spectrum files `<label>__<id>.txt` to a corpus CSV
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// PreprocessConfig JSON
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Seeded synthetic corpus from a ToyCorpusSpec JSON
    ToyCorpus {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model; writes the model file and `<out>.history.csv`
    Train {
        #[arg(value_enum)]
        kind: ModelKind,
        #[command(flatten)]
        data: TrainData,
        /// Model config JSON
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `max_epochs`
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Synthetic spectra of one class from a trained generator
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        count: usize,
    },
    /// PIKE-all, MMD², CD and ND of generated against real spectra
    Metrics {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Kernel bandwidth
        #[arg(long, default_value_t = 8.0)]
        t: f64,
    },
    /// Classifier experiments; `--out` names a directory
    Experiment {
        #[command(subcommand)]
        kind: Experiment,
    },
    /// VAE latent means, or real and generated spectra side by side
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainData {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Vae,
    Gan,
    Diffusion,
    Classifier,
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Real-trained classifier against classifiers trained on synthetic data only
    Substitution {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        test: PathBuf,
        /// `name=model.json`, repeatable
        #[arg(long = "generator", required = true)]
        generators: Vec<String>,
        /// ClassifierConfig JSON
        #[arg(long)]
        classifier_config: Option<PathBuf>,
    },
    /// Top up classes below `--target` with synthetic spectra
    Augmentation {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        classifier_config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
