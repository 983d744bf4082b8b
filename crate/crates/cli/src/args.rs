use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use milel::candidates::DatasetMode;
use milel::eval::Setting;
use milel::training::TrainMode;
use serde::Serialize;

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(name = "milel", version, about = "Distantly supervised entity linking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate and index a knowledge base.
    KbBuild(KbBuildArgs),
    /// Generate a synthetic knowledge base and corpora.
    Synth(SynthArgs),
    /// Build data points (E+ and E-) for a corpus.
    GenData(GenDataArgs),
    /// Train a linker.
    Train(TrainArgs),
    /// Score a linker or the name-matching baseline on a labelled corpus.
    Eval(EvalArgs),
    /// Link every mention of a corpus.
    Link(LinkArgs),
    /// Noise-detector statistics on training data.
    NoiseReport(NoiseReportArgs),
    /// Finite-difference check of the loss gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct CommonFlags {
    /// TOML file with `seed`, `preset` and `[data]`, `[model]`, `[synth]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds every random choice of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Base model hyper-parameters (default: published).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Args, Debug, Serialize)]
pub struct KbBuildArgs {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub relations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of mentions whose name is perturbed.
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Replace type cues with filler words.
    #[arg(long)]
    pub no_cues: bool,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataMode {
    Train,
    Test,
    Supervised,
}

impl From<DataMode> for DatasetMode {
    fn from(m: DataMode) -> Self {
        match m {
            DataMode::Train => DatasetMode::Train,
            DataMode::Test => DatasetMode::Test,
            DataMode::Supervised => DatasetMode::Supervised,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// Directory with entities.tsv and relations.tsv.
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub mode: DataMode,
    /// Maximum |E+| (default 100).
    #[arg(long)]
    pub cap: Option<usize>,
    /// Negatives per training point (default 10).
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Mil,
    MilNd,
    Supervised,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mil => TrainMode::Mil,
            ModeArg::MilNd => TrainMode::MilNd,
            ModeArg::Supervised => TrainMode::Supervised,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct ModelFlags {
    /// KL coefficient.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Prior probability of a noisy point.
    #[arg(long)]
    pub prior: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Abstention threshold stored with the model.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Development corpus with gold entities, for early stopping.
    #[arg(long)]
    pub dev: PathBuf,
    /// Precomputed training data points (default: built from the corpus).
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Word vectors, `word v1 ... vd` per line; sets the word dimension.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mil-nd")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettingArg {
    All,
    InEPlus,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::All => Setting::All,
            SettingArg::InEPlus => Setting::InEPlus,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Training run directory (or its model/ subdirectory).
    #[arg(long, conflicts_with = "name_matching")]
    pub model: Option<PathBuf>,
    /// Evaluate the name-matching baseline instead of a model.
    #[arg(long)]
    pub name_matching: bool,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Abstain when the noise probability exceeds this.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Only this setting (default: both).
    #[arg(long, value_enum)]
    pub setting: Option<SettingArg>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct LinkArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct NoiseReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Precomputed training data points (default: built from the corpus).
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// Noise-label sidecar, `point id <TAB> true|false` (default: gold not in E+).
    #[arg(long)]
    pub noise: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Threshold for the fraction above (default: the model's tau).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[command(flatten)]
    pub common: CommonFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[command(flatten)]
    pub common: CommonFlags,
}
