//! Command-line grammar.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use videmb::data::{Split, TaskKind};
use videmb::heads::{HeadKind, Pooling};

#[derive(Debug, Parser)]
#[command(name = "videmb", version, about = "Temporal fusion of frame embeddings into a joint text-video space")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random draw (data, init, shuffling).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// TOML config file; top-level keys are global flags, `[subcommand]` tables hold per-subcommand flags.
    /// Flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for training, evaluation and index builds.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (prototypes, per-video frames, manifest).
    Gen(GenArgs),
    /// Train an LSTM or transformer head against the dataset prototypes.
    Train(TrainArgs),
    /// Classification accuracy and confusion counts for any head.
    Eval(EvalArgs),
    /// Fuse one video file into a unit-norm embedding.
    Encode(EncodeArgs),
    /// Embed every video once and store the retrieval index.
    Index(IndexArgs),
    /// Top-k videos for a class prototype or an explicit query vector.
    Query(QueryArgs),
    /// 2-D PCA coordinates and the frame cluster-separation ratio.
    Project(ProjectArgs),
    /// Finite-difference check of every head parameter gradient.
    Gradcheck(GradcheckArgs),
    /// Serve queries against an index over HTTP.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gen(_) => "gen",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Encode(_) => "encode",
            Self::Index(_) => "index",
            Self::Query(_) => "query",
            Self::Project(_) => "project",
            Self::Gradcheck(_) => "gradcheck",
            Self::Serve(_) => "serve",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Anchor,
    Order,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Anchor => TaskKind::Anchor,
            TaskArg::Order => TaskKind::Order,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum HeadArg {
    MidFrame,
    MaxPool,
    MajorityVote,
    Lstm,
    Transformer,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::MidFrame => HeadKind::MidFrame,
            HeadArg::MaxPool => HeadKind::MaxPool,
            HeadArg::MajorityVote => HeadKind::MajorityVote,
            HeadArg::Lstm => HeadKind::Lstm,
            HeadArg::Transformer => HeadKind::Transformer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainableHead {
    Lstm,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Cls,
    Mean,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Cls => Pooling::Cls,
            PoolingArg::Mean => Pooling::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SubsetArg {
    All,
    Train,
    Val,
}

impl SubsetArg {
    pub fn split(self) -> Option<Split> {
        match self {
            Self::All => None,
            Self::Train => Some(Split::Train),
            Self::Val => Some(Split::Val),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Frames,
    Videos,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Anchor)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 25)]
    pub classes: usize,
    /// Training videos per class.
    #[arg(long, default_value_t = 10)]
    pub videos_per_class: usize,
    /// Extra validation videos per class, marked in the manifest.
    #[arg(long, default_value_t = 0)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 1024)]
    pub dim: usize,
    /// Per-coordinate noise scale.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// AR(1) correlation of the noise between consecutive frames.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
}

/// Head location shared by commands that run inference.
#[derive(Debug, Args)]
pub struct HeadSel {
    #[arg(long, value_enum)]
    pub head: HeadArg,
    /// Trained parameters; required for lstm and transformer.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub head: TrainableHead,
    /// Where to write the trained parameters.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV; defaults to the parameter path with a .csv extension.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 10.0)]
    pub temperature: f64,
    /// Train fraction for records without an explicit split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// LSTM hidden width (defaults to the embedding dimension).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Transformer width (defaults to the embedding dimension).
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Feed-forward width (defaults to 4 × d_model).
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long, value_enum, default_value_t = PoolingArg::Cls)]
    pub pooling: PoolingArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub head: HeadSel,
    #[arg(long, value_enum, default_value_t = SubsetArg::Val)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// A `T×D` VEMB frame file.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub head: HeadSel,
    /// Resample to this many frames first.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Write the embedding as a VEMB vector; printed as JSON otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub head: HeadSel,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Index matrix path; ids go to a .json file beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("q").required(true).args(["class", "vector", "embedding"])))]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Class name, resolved through the dataset prototypes.
    #[arg(long, requires = "data")]
    pub class: Option<String>,
    /// Comma-separated query vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub vector: Option<Vec<f32>>,
    /// VEMB file holding the query vector.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// Also write the JSON response here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Level::Frames)]
    pub level: Level,
    /// Fusion head for video-level projection.
    #[arg(long, value_enum, default_value_t = HeadArg::MaxPool)]
    pub head: HeadArg,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// CSV of projected points.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub head: TrainableHead,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 6)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Dataset directory whose prototypes resolve class-name queries.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}
