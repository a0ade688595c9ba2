use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "layerprobe",
    version,
    about = "Layer-wise probing of speech representations"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset root (manifest.json, feats/, align/, tracks/, tables/, reports/).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Refuse to replace existing outputs.
    #[arg(long, global = true)]
    pub no_overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset root with planted layers.
    Synth(SynthArgs),
    /// Pool phone and word segments into per-layer tables.
    Pool,
    /// Projection-weighted CCA between phone tables and phoneme labels.
    Cca(CcaArgs),
    /// Ridge probes from word tables to prominence and boundary.
    Probe(ProbeArgs),
    /// Label word prominence and boundary, or import external labels.
    ProsodyLabel(ProsodyLabelArgs),
    /// Randomly perturb speaker voice in WAV files.
    Perturb(PerturbArgs),
    /// 2-D t-SNE of one phoneme's pooled vectors at one layer.
    Embed(EmbedArgs),
    /// Merge plot data from several dataset roots, one series per model tag.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub phoneme_layer: Option<usize>,
    #[arg(long)]
    pub prosody_layer: Option<usize>,
    #[arg(long)]
    pub model_tag: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct CcaArgs {
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub eval_folds: Option<usize>,
    /// Deal rows into folds phoneme by phoneme.
    #[arg(long)]
    pub stratify: bool,
}

#[derive(Debug, Args, Default)]
pub struct ProbeArgs {
    /// "auto" or a non-negative number.
    #[arg(long)]
    pub lambda: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ProsodyLabelArgs {
    /// External label TSV to validate and use as the probe targets.
    #[arg(long)]
    pub import: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// A WAV file or a directory of WAV files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub beta_low: Option<f64>,
    #[arg(long)]
    pub beta_high: Option<f64>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long)]
    pub apply_threshold: Option<f64>,
    #[arg(long)]
    pub eq_bands: Option<usize>,
    #[arg(long)]
    pub eq_gain_db: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub phoneme: String,
    #[arg(long)]
    pub layer: usize,
    /// Fail unless the dataset's manifest carries this model tag.
    #[arg(long)]
    pub model_tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Dataset roots to merge; defaults to the configured root.
    #[arg(long, num_args = 1..)]
    pub roots: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}
