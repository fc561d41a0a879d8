use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vgpo_core::config::Overrides;

/// Visually-guided advantage shaping for rollout traces.
#[derive(Debug, Parser)]
#[command(name = "vgpo", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Shape the advantages of every group in a trace.
    Shape(ShapeArgs),
    /// Attention allocation and late/early ratio diagnostics.
    Diagnose(DiagnoseArgs),
    /// Write a deterministic synthetic trace.
    Synth(SynthArgs),
    /// Train the toy policy and write reward / focus-ratio curves.
    TrainToy(TrainArgs),
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    /// Input trace, one group per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Shaped-advantage output, one group per line.
    #[arg(long)]
    pub output: PathBuf,
    /// TOML file with flag-named keys; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Groups handed to the worker pool at a time.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
    #[command(flatten)]
    pub shaping: ShapingFlags,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSON report path. Tables go next to it as `<stem>.ratios.csv` and
    /// `<stem>.allocation.csv`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of the sequence counted as early [default: 0.5].
    #[arg(long)]
    pub split_point: Option<f64>,
    /// Series the ratio is computed on: rho | image_attention [default: rho].
    #[arg(long)]
    pub selector: Option<String>,
    /// Cosine smoothing constant [default: 1e-8].
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of groups to write [default: 100].
    #[arg(long)]
    pub groups: Option<usize>,
    #[command(flatten)]
    pub lab: LabFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON report path; curves go to `<stem>.curves.csv`.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// grpo | dapo | vgpo [default: vgpo].
    #[arg(long)]
    pub algo: Option<String>,
    /// Sampled batches per run [default: 300].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of runs; run k uses seed `seed + k` [default: 5].
    #[arg(long)]
    pub seeds: Option<usize>,
    #[command(flatten)]
    pub shaping: ShapingFlags,
    #[command(flatten)]
    pub lab: LabFlags,
}

#[derive(Debug, Args, Default)]
pub struct ShapingFlags {
    /// Compensation intensity [default: 0.3].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Fraction of the sequence treated as the tail [default: 0.5].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fraction of tail tokens admitted by the gate [default: 0.2].
    #[arg(long)]
    pub kappa: Option<f64>,
    /// linear | exp | step [default: linear].
    #[arg(long)]
    pub schedule: Option<String>,
    /// Exponent of the exp schedule [default: 1].
    #[arg(long)]
    pub power: Option<f64>,
    /// late | full [default: late].
    #[arg(long)]
    pub span: Option<String>,
    /// Smoothing constant for cosines and normalisations [default: 1e-8].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Lower clip range [default: 0.2].
    #[arg(long)]
    pub eps_low: Option<f64>,
    /// Upper clip range [default: 0.28].
    #[arg(long)]
    pub eps_high: Option<f64>,
    /// sample | population [default: sample].
    #[arg(long)]
    pub std_mode: Option<String>,
    /// traj | token [default: traj].
    #[arg(long)]
    pub loss_agg: Option<String>,
    /// Disable token-level re-weighting.
    #[arg(long)]
    pub no_intra: bool,
    /// Disable trajectory-level re-weighting.
    #[arg(long)]
    pub no_inter: bool,
}

#[derive(Debug, Args, Default)]
pub struct LabFlags {
    /// Base RNG seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden size [default: 16].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Vocabulary size [default: 32].
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Tokens per response [default: 12].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Responses per group [default: 8].
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Groups per training batch [default: 16].
    #[arg(long)]
    pub groups_per_batch: Option<usize>,
    /// Image tokens per prompt [default: 4].
    #[arg(long)]
    pub image_tokens: Option<usize>,
    /// Weight of the current token in each state [default: 0.7].
    #[arg(long)]
    pub evidence_gain: Option<f64>,
    /// How far the visual pull fades by the last token, in [0, 1] [default: 0.6].
    #[arg(long)]
    pub rho_decay: Option<f64>,
    /// Make every token state equal the prototype.
    #[arg(long)]
    pub flat_focus: bool,
    /// Toy policy learning rate [default: 3.0].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Ascent steps per sampled batch [default: 2].
    #[arg(long)]
    pub updates_per_batch: Option<usize>,
}

fn flag(set: bool) -> Option<bool> {
    set.then_some(true)
}

impl ShapingFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            beta: self.beta,
            gamma: self.gamma,
            kappa: self.kappa,
            schedule: self.schedule.clone(),
            power: self.power,
            span: self.span.clone(),
            epsilon: self.epsilon,
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            std_mode: self.std_mode.clone(),
            loss_agg: self.loss_agg.clone(),
            no_intra: flag(self.no_intra),
            no_inter: flag(self.no_inter),
            ..Overrides::default()
        }
    }
}

impl LabFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            dim: self.dim,
            vocab: self.vocab,
            seq_len: self.seq_len,
            group_size: self.group_size,
            groups_per_batch: self.groups_per_batch,
            image_tokens: self.image_tokens,
            evidence_gain: self.evidence_gain,
            rho_decay: self.rho_decay,
            flat_focus: flag(self.flat_focus),
            lr: self.lr,
            updates_per_batch: self.updates_per_batch,
            ..Overrides::default()
        }
    }
}
