use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "mdp",
    version,
    about = "Synchronous data-parallel training on one desk"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic MDPD dataset.
    GenDataset(GenArgs),
    /// Train the MLP classifier, in-process or over TCP.
    Train(TrainArgs),
    /// Measure speed-up and parallel efficiency over a list of worker counts.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Blobs,
    Spiral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scaling {
    /// Fixed per-worker batch.
    Weak,
    /// Fixed global batch split across workers.
    Strong,
}

#[derive(Clone, Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(2..))]
    pub classes: u32,
    /// Features per row (spiral is always 2-D).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    pub dims: u32,
    #[arg(long, default_value_t = 640, value_parser = clap::value_parser!(u32).range(1..))]
    pub per_class: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Blob standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Minimum distance between blob centres, in standard deviations.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "inproc")]
    pub backend: BackendArg,
    /// World size. For tcp workers also read from MDP_WORLD_SIZE.
    #[arg(long, env = "MDP_WORLD_SIZE", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: u32,
    /// Per-worker minibatch size.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch_size: u32,
    #[arg(long, default_value_t = 10)]
    pub epochs: u32,
    #[arg(long, value_enum, default_value = "sgd")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    pub hidden: u32,
    /// MDPD file. Only rank 0 reads it.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the dataset order instead of reshuffling every epoch.
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Metrics CSV written by rank 0.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Checkpoint written by rank 0; defaults to the metrics path with an
    /// `.mdp1` extension.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run as this rank of a tcp group instead of launching one.
    #[arg(long, env = "MDP_RANK")]
    pub rank: Option<u32>,
    /// host:port of rank 0.
    #[arg(long, env = "MDP_RENDEZVOUS")]
    pub rendezvous: Option<String>,
    /// Rendezvous deadline.
    #[arg(long, env = "MDP_TIMEOUT_SECS", default_value_t = 30.0)]
    pub timeout_secs: f64,
}

impl TrainArgs {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.with_extension("mdp1"))
    }

    /// Command line for one spawned tcp worker.
    pub fn worker_args(&self, rank: usize, rendezvous: &str) -> Vec<String> {
        let mut a: Vec<String> = vec![
            "train".into(),
            "--backend".into(),
            "tcp".into(),
            "--workers".into(),
            self.workers.to_string(),
            "--batch-size".into(),
            self.batch_size.to_string(),
            "--epochs".into(),
            self.epochs.to_string(),
            "--optimizer".into(),
            value_name(self.optimizer),
            "--lr".into(),
            self.lr.to_string(),
            "--hidden".into(),
            self.hidden.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--precision".into(),
            value_name(self.precision),
            "--out".into(),
            self.out.display().to_string(),
            "--checkpoint".into(),
            self.checkpoint_path().display().to_string(),
            "--rank".into(),
            rank.to_string(),
            "--rendezvous".into(),
            rendezvous.into(),
            "--timeout-secs".into(),
            self.timeout_secs.to_string(),
        ];
        if let Some(d) = &self.dataset {
            a.extend(["--dataset".into(), d.display().to_string()]);
        }
        if self.no_shuffle {
            a.push("--no-shuffle".into());
        }
        a
    }
}

fn value_name(v: impl ValueEnum) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    /// Ascending worker counts starting at 1.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub workers_list: Vec<usize>,
    #[arg(long, value_enum, default_value = "inproc")]
    pub backend: BackendArg,
    #[arg(long, value_enum, default_value = "weak")]
    pub scaling: Scaling,
    /// Per-worker batch for weak scaling, global batch for strong scaling.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1024)]
    pub hidden: usize,
    #[arg(long, default_value_t = 256)]
    pub dims: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Timed iterations per worker count, after the warmup.
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

impl Default for BenchArgs {
    fn default() -> Self {
        BenchArgs {
            workers_list: vec![1, 2, 4],
            backend: BackendArg::Inproc,
            scaling: Scaling::Weak,
            batch_size: 32,
            hidden: 1024,
            dims: 256,
            classes: 10,
            iterations: 30,
            warmup: 10,
            precision: Precision::F32,
            seed: 0,
            csv: None,
        }
    }
}
