use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fenestra_core::train::{Profile, TrainMode};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "fenestra", version, about = "Window recognition and procedural window modeling", args_override_self = true)]
pub struct Cli {
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    pub verbose: bool,
    /// JSON object of flag values, overridden by flags given explicitly.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Render a synthetic labeled and unlabeled patch dataset.
    Synth(SynthArgs),
    /// Train or fine-tune a recognizer.
    Train(TrainArgs),
    /// Report Top-k accuracy and MAE on a labeled split.
    Eval(EvalArgs),
    /// Predict window type and parameters for patches.
    Infer(InferArgs),
    /// Build a window mesh from a grammar or a prediction.
    Mesh(MeshArgs),
    /// Assemble clusters and their placements into one OBJ scene.
    Scene(SceneArgs),
    /// Start the HTTP backend.
    Serve(ServeArgs),
}

impl Command {
    pub fn names() -> [&'static str; 7] {
        ["synth", "train", "eval", "infer", "mesh", "scene", "serve"]
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Labeled training patches per window type.
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long, default_value_t = 3000)]
    pub unlabeled: usize,
    /// Labeled test patches per window type.
    #[arg(long, default_value_t = 0)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Loss log; defaults to the checkpoint path with a .csv extension.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[arg(long, default_value = "pretrain")]
    pub mode: TrainMode,
    #[arg(long, default_value = "desk")]
    pub profile: Profile,
    /// Starting checkpoint, required by the fine-tuning modes.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Weight of the regression term in the multitask loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Dropout rate on the shared features.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Convolution widths of the recognizer, four comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub gen_channels: Option<usize>,
    #[arg(long)]
    pub z_dim: Option<usize>,
    /// Use only the first N labeled training patches.
    #[arg(long)]
    pub labeled_limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    /// Multitask checkpoint, or the classifier when --regressor is given.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Separately fine-tuned regressor checkpoint.
    #[arg(long, value_name = "FILE")]
    pub regressor: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// A 64×64 patch image; repeatable.
    #[arg(long, value_name = "PNG", conflicts_with = "data")]
    pub patch: Vec<PathBuf>,
    /// Predict every labeled patch of a dataset split instead.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also aggregate all inputs as one cluster.
    #[arg(long)]
    pub group: bool,
    /// Predictions JSON; printed to stdout when omitted.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MeshArgs {
    #[arg(long, value_name = "FILE", conflicts_with = "prediction", required_unless_present = "prediction")]
    pub grammar: Option<PathBuf>,
    /// Output of `infer`; the grouped grammar is used when present.
    #[arg(long, value_name = "FILE")]
    pub prediction: Option<PathBuf>,
    /// Which prediction to use when the file has no grouped result.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SceneArgs {
    /// Cluster records as saved by the server.
    #[arg(long, value_name = "FILE")]
    pub clusters: PathBuf,
    /// Keep only instances on this façade.
    #[arg(long)]
    pub facade: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of annotation XML files to load as the session.
    #[arg(long, value_name = "DIR")]
    pub facades: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "model")]
    pub regressor: Option<PathBuf>,
    /// UI bundle served at /.
    #[arg(long = "static", value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
    /// Where session saves are written.
    #[arg(long, value_name = "DIR")]
    pub snapshot_dir: Option<PathBuf>,
}
