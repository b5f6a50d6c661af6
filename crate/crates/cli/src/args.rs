use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use derain_core::net::{Depth, WidthScale};
use derain_core::pfilt::FilterStrategy;

#[derive(Debug, Parser)]
#[command(name = "derain", version, about = "Predictive-filtering image deraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage training, or the component ablation matrix.
    Train(TrainArgs),
    /// Derain an image, a directory of images or a frame sequence.
    Derain(DerainArgs),
    /// PSNR/SSIM of predictions against ground truth.
    Eval(EvalArgs),
    /// Cost of shared-weight vs multi-head multi-scale filtering.
    Bench(BenchArgs),
    /// Contact sheet of one RainMix draw.
    AugmentPreview(PreviewArgs),
    /// Write the synthetic toy dataset.
    MakeDataset(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file (`key = value` lines); defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; overrides `data_dir`. Without either a toy
    /// dataset is generated under the output directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resume from a checkpoint directory.
    #[arg(long, conflicts_with = "ablation")]
    pub resume: Option<PathBuf>,
    /// Train all eight on/off combinations of the three components.
    #[arg(long)]
    pub ablation: bool,
    /// Seeds per ablation variant, counting up from the config seed.
    #[arg(long, default_value_t = 1, requires = "ablation")]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct DerainArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Image file or directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Treat the input directory as an ordered frame sequence.
    #[arg(long)]
    pub frames: bool,
    /// Ground truth (file or directory with matching names) for PSNR/SSIM.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Image sizes, `N` or `HxW`, each a multiple of 16.
    #[arg(long, value_delimiter = ',', default_value = "256", value_parser = parse_size)]
    pub sizes: Vec<(usize, usize)>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub scales: Vec<usize>,
    /// `ws` (shared weights) and/or `mh` (multi-head).
    #[arg(long, value_delimiter = ',', default_value = "ws,mh", value_parser = parse_strategy)]
    pub strategies: Vec<FilterStrategy>,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Backbone depth of the kernel predictor (17, 33 or 49).
    #[arg(long, default_value = "49", value_parser = parse_depth)]
    pub depth: Depth,
    /// Width multiplier of the kernel predictor, e.g. `1/8`.
    #[arg(long, default_value = "1/8", value_parser = parse_width)]
    pub width: WidthScale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    /// Config file supplying the RainMix settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Background image; defaults to the first clean toy image.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let dim = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((dim(h)?, dim(w)?)),
        None => dim(s).map(|n| (n, n)),
    }
}

fn parse_strategy(s: &str) -> Result<FilterStrategy, String> {
    s.parse().map_err(|e: derain_core::Error| e.to_string())
}

fn parse_depth(s: &str) -> Result<Depth, String> {
    s.parse().map_err(|e: derain_core::Error| e.to_string())
}

fn parse_width(s: &str) -> Result<WidthScale, String> {
    s.parse().map_err(|e: derain_core::Error| e.to_string())
}
