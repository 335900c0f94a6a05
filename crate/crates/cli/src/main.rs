mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Root for `--out` when it is not given.
pub const OUT_ENV: &str = "CROSSMPT_OUT";

#[derive(Parser)]
#[command(name = "crossmpt", version, about = "Train, evaluate and analyze transformer decoders for linear block codes")]
struct Cli {
    /// Worker threads for sample-level parallel work. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a decoder and write checkpoints.
    Train(TrainArgs),
    /// Monte-Carlo BER/FER for a checkpoint, BP or uncoded transmission.
    Eval(EvalArgs),
    /// Mask densities, attention areas and FLOPs.
    Analyze(AnalyzeArgs),
    /// Attention maps for one (optionally corrupted) frame.
    DumpAttention(DumpArgs),
    /// Write the PCM list of a parallel ensemble and its bit coverage.
    BuildEnsemble(EnsembleArgs),
    /// Inspect the bundled code registry.
    Codes {
        #[command(subcommand)]
        cmd: CodesCmd,
    },
}

#[derive(Args)]
pub struct CodeArgs {
    /// Registry name such as bch_63_45.
    #[arg(long)]
    pub code: Option<String>,
    /// PCM file (.alist, otherwise dense 0/1 rows) used instead of the registry.
    #[arg(long)]
    pub pcm_file: Option<PathBuf>,
    /// Treat the PCM file's code as cyclic.
    #[arg(long)]
    pub cyclic: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat `key = value` file; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub code: Option<String>,
    /// Comma-separated training codes.
    #[arg(long)]
    pub codes: Option<String>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_expansion: Option<usize>,
    #[arg(long)]
    pub norm_order: Option<String>,
    #[arg(long)]
    pub syndrome_encoding: Option<String>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// `lo,hi` in dB.
    #[arg(long)]
    pub ebn0_range: Option<String>,
    #[arg(long)]
    pub code_sampling: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Global-norm clip, or `none`.
    #[arg(long)]
    pub grad_clip: Option<String>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    /// Ensemble branches, or `auto`.
    #[arg(long)]
    pub ensemble_p: Option<String>,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderKind {
    Model,
    Bp,
    MinSum,
    Uncoded,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Random,
    AllZero,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `model` with a checkpoint and `bp` without.
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderKind>,
    #[command(flatten)]
    pub code: CodeArgs,
    /// SNR points: `3,4,5` or `lo:hi[:step]`.
    #[arg(long, default_value = "4,5,6")]
    pub ebn0: String,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
    #[arg(long, default_value_t = 100)]
    pub min_errors: u64,
    #[arg(long, default_value_t = 10_000_000)]
    pub max_bits: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    pub policy: PolicyArg,
    /// Also write bitwise.csv.
    #[arg(long)]
    pub bitwise: bool,
    /// Ensemble size when an ensemble checkpoint meets a code it did not train on.
    #[arg(long)]
    pub ensemble_p: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Comma-separated registry names; all bundled codes when absent.
    #[arg(long)]
    pub codes: Option<String>,
    #[arg(long)]
    pub pcm_file: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub ffn_expansion: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub code: CodeArgs,
    /// 1-based bit to corrupt; the frame is noiseless otherwise.
    #[arg(long)]
    pub error_bit: Option<usize>,
    /// 1-based inclusive layer range such as `1..2`.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub code: CodeArgs,
    /// Branch count; defaults to enough to cover every bit.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CodesCmd {
    /// Name, size and class of every bundled code.
    List,
    /// Check ranks, generator orthogonality and fixture constructions.
    Validate {
        #[arg(long)]
        pcm_file: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--workers: {e}")))?;
    }
    match cli.cmd {
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Analyze(a) => commands::cmd_analyze(a),
        Command::DumpAttention(a) => commands::cmd_dump_attention(a),
        Command::BuildEnsemble(a) => commands::cmd_build_ensemble(a),
        Command::Codes { cmd: CodesCmd::List } => commands::cmd_codes_list(),
        Command::Codes { cmd: CodesCmd::Validate { pcm_file } } => commands::cmd_codes_validate(pcm_file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
