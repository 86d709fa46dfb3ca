//! `postedit`: learn subwords, prepare triples, train, average, decode and
//! score from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "postedit", version, about = "Multi-source transformer for automatic post-editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE merge list from one or more text files.
    LearnBpe(LearnBpe),
    /// Segment a text file with a learned BPE model.
    ApplyBpe(ApplyBpe),
    /// Build the shared vocabulary from segmented training triples.
    BuildVocab(BuildVocab),
    /// Filter, upsample and merge real and synthetic triples.
    Prepare(Prepare),
    /// Train a model, writing checkpoints and a loss log.
    Train(Train),
    /// Average adjacent checkpoints into models.
    Average(Average),
    /// Beam-decode post-edits with one model or an ensemble.
    Decode(Decode),
    /// Score hypotheses against references.
    Score(Score),
    /// Score the MT side against the post-edits.
    CompareData(CompareData),
    /// Write a synthetic post-editing corpus.
    Synth(Synth),
}

#[derive(Args)]
pub struct LearnBpe {
    #[arg(long, default_value_t = 32000)]
    pub merges: usize,
    #[arg(long, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct ApplyBpe {
    #[arg(long)]
    pub model: PathBuf,
    /// Subwords seen fewer times than this are split back.
    #[arg(long, default_value_t = 0)]
    pub threshold: u64,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// Three parallel files `PREFIX.src`, `PREFIX.mt`, `PREFIX.pe`.
#[derive(Args)]
pub struct BuildVocab {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct Prepare {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub mt: PathBuf,
    #[arg(long)]
    pub pe: PathBuf,
    #[arg(long, requires_all = ["synthetic_mt", "synthetic_pe"])]
    pub synthetic_src: Option<PathBuf>,
    #[arg(long, requires = "synthetic_src")]
    pub synthetic_mt: Option<PathBuf>,
    #[arg(long, requires = "synthetic_src")]
    pub synthetic_pe: Option<PathBuf>,
    /// Copies of the real data in the output.
    #[arg(long, default_value_t = 20)]
    pub upsample: usize,
    #[arg(long, default_value_t = 256)]
    pub max_len: usize,
    /// Output prefix; writes `.src`, `.mt` and `.pe`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct Train {
    /// `key=value` config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training triples prefix.
    #[arg(long)]
    pub train: PathBuf,
    /// Dev triples prefix, used for perplexity and the best checkpoint.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file; built from the training triples when omitted.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct Average {
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct Decode {
    /// Comma-separated checkpoints; more than one decodes as an ensemble.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub mt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Output budget beyond the MT length.
    #[arg(long, default_value_t = 50)]
    pub extra_len: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Undo BPE segmentation in the output.
    #[arg(long)]
    pub join_bpe: bool,
}

#[derive(Args)]
pub struct Score {
    #[arg(long, default_value = "both", value_parser = ["bleu", "ter", "both"])]
    pub metric: String,
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Args)]
pub struct CompareData {
    #[arg(long)]
    pub mt: PathBuf,
    #[arg(long)]
    pub pe: PathBuf,
}

#[derive(Args)]
pub struct Synth {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub dev: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 16)]
    pub words: usize,
    #[arg(long, default_value_t = 0.15)]
    pub error_rate: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::LearnBpe(a) => commands::learn_bpe(&a),
        Command::ApplyBpe(a) => commands::apply_bpe(&a),
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Average(a) => commands::average(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Score(a) => commands::score(&a),
        Command::CompareData(a) => commands::compare_data(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
