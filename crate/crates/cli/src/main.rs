//! `nvtrans`: build toy models, estimate priors, certify equivalence, sweep
//! `τ` and dump attention maps.
//!
//! Exit codes: 0 success, 1 certification failure, 2 usage error, 3 data
//! error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nvtrans::NvError;

#[derive(Parser)]
#[command(name = "nvtrans", version, about = "Nonparametric variational reinterpretation of a toy Transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a seeded toy model and save it as an NVTX file.
    InitModel(InitModel),
    /// Write a seeded synthetic corpus.
    SynthCorpus(SynthCorpus),
    /// Estimate per-site empirical priors from a corpus.
    EstimatePrior(EstimatePrior),
    /// Compare the reinterpreted model against the standard one.
    Certify(Certify),
    /// Evaluate a grid or random sample of τ settings.
    Sweep(Sweep),
    /// Write one site's head-averaged attention map, prior column last.
    AttnDump(AttnDump),
}

/// Model shape overrides, applied on top of `--config`.
#[derive(Args, Default)]
pub struct ConfigArgs {
    /// `key=value` config file (vocab, d, h, layers_enc, layers_dec, ffn_dim, max_len).
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub layers_enc: Option<usize>,
    #[arg(long)]
    pub layers_dec: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args)]
pub struct InitModel {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct SynthCorpus {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 1000)]
    pub sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct EstimatePrior {
    #[arg(long)]
    pub model: std::path::PathBuf,
    /// One sequence per line, whitespace-separated token ids.
    #[arg(long)]
    pub corpus: std::path::PathBuf,
    /// Fraction of sequences to keep, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Priors JSON output.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// CSV report output; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<std::path::PathBuf>,
}

/// τ for every group, optionally overridden per group.
#[derive(Args, Clone, Copy)]
pub struct TauArgs {
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub tau_alpha: f64,
    #[arg(long, default_value_t = 1e-38)]
    pub tau_sigma: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_alpha_e: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_alpha_c: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau_alpha_d: Option<f64>,
    #[arg(long)]
    pub tau_sigma_e: Option<f64>,
    #[arg(long)]
    pub tau_sigma_c: Option<f64>,
    #[arg(long)]
    pub tau_sigma_d: Option<f64>,
}

#[derive(Args)]
pub struct ModelArgs {
    /// NVTX model file.
    #[arg(long)]
    pub model: std::path::PathBuf,
    /// Priors JSON (or an NVTX file carrying priors). Defaults to the
    /// priors stored in the model file.
    #[arg(long)]
    pub priors: Option<std::path::PathBuf>,
}

#[derive(Args)]
pub struct Certify {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub tau: TauArgs,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub max_steps: usize,
}

#[derive(Args)]
pub struct Sweep {
    #[command(flatten)]
    pub model: ModelArgs,
    /// `identity`, `interp:N`, `random:N`, `grid:A1,A2@S1,S2` or
    /// `points:a_e,a_c,a_d,s_e,s_c,s_d;...`
    #[arg(long, default_value = "interp:10")]
    pub grid: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random evaluation inputs per point.
    #[arg(long, default_value_t = 20)]
    pub inputs: usize,
    #[arg(long, default_value_t = 16)]
    pub max_steps: usize,
    #[arg(long, default_value_t = -15.0, allow_negative_numbers = true)]
    pub tau_alpha_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub tau_alpha_max: f64,
    #[arg(long, default_value_t = 1e-38)]
    pub tau_sigma_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau_sigma_max: f64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args)]
pub struct AttnDump {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub tau: TauArgs,
    /// Source token ids, whitespace-separated.
    #[arg(long)]
    pub input: String,
    /// Target token ids for decoder and cross sites (`BOS` is prepended).
    /// Defaults to the source.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub layer: usize,
    /// encoder, cross or decoder.
    #[arg(long)]
    pub group: String,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

/// Bad flags or values; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<NvError>() {
        Some(NvError::Config(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitModel(a) => commands::init_model(a),
        Command::SynthCorpus(a) => commands::synth_corpus(a),
        Command::EstimatePrior(a) => commands::estimate_prior(a),
        Command::Certify(a) => commands::certify(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::AttnDump(a) => commands::attn_dump(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
