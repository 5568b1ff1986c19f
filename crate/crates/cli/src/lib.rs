//! Command-line front end: argument definitions, commands and run manifests.

mod commands;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Multi-image style distillation and attention injection on a toy latent
/// diffusion model.
#[derive(Debug, Parser)]
#[command(name = "stylebank", version)]
pub struct Cli {
    /// Upper bound on worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Write a JSON run manifest (config, digests, phase timings) here.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Model configuration as JSON; the built-in toy model otherwise.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// DDIM-invert a style image and record its self-attention keys and values.
    Invert(InvertArgs),
    /// Cluster the caches of several style images into one bank.
    Distill(DistillArgs),
    /// Fine-tune the image-prompt adapter on a set of style images.
    Finetune(FinetuneArgs),
    /// Average style tokens over a set of images.
    Embed(EmbedArgs),
    /// Generate the average style image and its normalization statistics.
    Avgimage(AvgImageArgs),
    /// Stylize a content image.
    Stylize(StylizeArgs),
    /// Color-distance metrics.
    #[command(subcommand)]
    Metric(MetricCommand),
    /// Inspect cache and bank files.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Args, Serialize)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also save the inverted noise latent as a tensor.
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub caches: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep round(F × single-image token count) rows per key.
    #[arg(long, conflicts_with_all = ["k", "k_all"])]
    pub k_scale: Option<f32>,
    /// Keep a fixed number of rows per key.
    #[arg(long, conflicts_with = "k_all")]
    pub k: Option<u32>,
    /// Keep every row (no compression).
    #[arg(long)]
    pub k_all: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub styles: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step losses as CSV.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub styles: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Embed square crops of this size instead of whole images.
    #[arg(long)]
    pub crop_px: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub crops_per_image: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AvgImageArgs {
    #[arg(long)]
    pub phi: PathBuf,
    /// Final latent as a tensor.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Latent grid side.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    /// Also write the decoded image.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StylizeArgs {
    #[arg(long)]
    pub content: PathBuf,
    /// Distilled style bank.
    #[arg(long, required_unless_present = "caches", conflicts_with = "caches")]
    pub bank: Option<PathBuf>,
    /// Stream the full concatenation of these caches instead of a bank.
    #[arg(long, num_args = 1..)]
    pub caches: Vec<PathBuf>,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub phi: PathBuf,
    /// JSON document with stylization settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Low-resolution bank; enables the two-stage schedule.
    #[arg(long, requires_all = ["stats_lo", "bank"])]
    pub bank_lo: Option<PathBuf>,
    #[arg(long, requires = "bank_lo")]
    pub stats_lo: Option<PathBuf>,
    /// Also save the final latent as a tensor.
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricCommand {
    /// Chamfer color distance between two images.
    Chamfer(ChamferArgs),
    /// Chamfer distance over sampled (output, style image) pairs.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ChamferArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Pixels sampled per image; 0 uses all of them.
    #[arg(long, default_value_t = stylebank_core::metrics::DEFAULT_SUBSAMPLE)]
    pub subsample: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub stylized: PathBuf,
    #[arg(long)]
    pub styles: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = stylebank_core::metrics::DEFAULT_SUBSAMPLE)]
    pub subsample: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheCommand {
    /// Print the index of a cache or bank file.
    Inspect { path: PathBuf },
}

pub use commands::run;
