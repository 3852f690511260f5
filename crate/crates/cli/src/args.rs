use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "unip", version, about = "Universal adversarial perturbations: attack, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model naturally, adversarially or with a universal adversary.
    Train(TrainArgs),
    /// Craft a universal perturbation against a checkpoint.
    Attack(AttackArgs),
    /// Evaluate checkpoints clean, under a stored perturbation or a per-instance attack.
    Eval(EvalArgs),
    /// Sweep the clipping threshold or the attack-set size.
    Sweep(SweepArgs),
    /// Write a stored perturbation as a PGM/PPM image.
    Export(ExportArgs),
    /// Re-run a previous invocation from its config.echo.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum DatasetArg {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ArchArg {
    Lenet,
    SmallconvCifar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Natural,
    AdvFgsm,
    AdvRfgsm,
    AdvPgd,
    UniversalAlt,
    UniversalSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RuleArg {
    Sgd,
    MomentumSgd,
    Adam,
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum NormArg {
    #[value(name = "inf")]
    Inf,
    #[value(name = "2")]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    Universal,
    Ideepfool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum EvalAttackArg {
    Clean,
    Universal,
    Fgsm,
    Rfgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepParamArg {
    Beta,
    NSamples,
}

/// Options shared by every subcommand that touches data.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    pub data: DatasetArg,
    /// Dataset root holding `mnist/` and `cifar10/`.
    #[arg(long, env = "UNIP_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// Defaults to lenet for MNIST and smallconv_cifar for CIFAR-10.
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long, default_value = "unip-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale of pixel-valued flags (--eps, --rfgsm-alpha, --step-size).
    #[arg(long, default_value = "1", value_parser = ["1", "255"])]
    pub pixels: String,
    /// Single-threaded, seed-determined execution.
    #[arg(long)]
    pub deterministic: bool,
    /// Keep only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Keep only the first N validation examples.
    #[arg(long)]
    pub val_limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value = "natural")]
    pub mode: ModeArg,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Piecewise-constant schedule, e.g. `0:0.05,4000:0.005`.
    #[arg(long)]
    pub lr_schedule: Option<String>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Loss clipping threshold; `inf` disables clipping.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_enum)]
    pub delta_rule: Option<RuleArg>,
    #[arg(long)]
    pub delta_lr: Option<f64>,
    #[arg(long)]
    pub pgd_steps: Option<usize>,
    #[arg(long)]
    pub rfgsm_alpha: Option<f64>,
    #[arg(long)]
    pub no_clamp: bool,
    #[arg(long)]
    pub probe_after_ascent: bool,
}

#[derive(Debug, Clone, Args)]
pub struct UniversalArgs {
    #[arg(long, value_enum)]
    pub rule: Option<RuleArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DeepFoolArgs {
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub max_passes: Option<usize>,
    #[arg(long)]
    pub deepfool_max_iter: Option<usize>,
    #[arg(long)]
    pub overshoot: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model to attack; without it a natural model is trained first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Steps for the natural model trained when no checkpoint is given.
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long, value_enum, default_value = "universal")]
    pub method: MethodArg,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Number of training examples the perturbation is fitted on.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long)]
    pub no_clamp: bool,
    #[command(flatten)]
    pub universal: UniversalArgs,
    #[command(flatten)]
    pub deepfool: DeepFoolArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Repeat to evaluate several models; with a per-instance attack a
    /// transfer matrix is written as well.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub perturbation: Option<PathBuf>,
    /// Defaults to `universal` with --perturbation and `clean` otherwise.
    #[arg(long, value_enum)]
    pub attack: Option<EvalAttackArg>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub rfgsm_alpha: Option<f64>,
    #[arg(long)]
    pub pgd_steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub no_clamp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub param: SweepParamArg,
    /// Comma-separated values; `inf` is allowed for beta.
    #[arg(long)]
    pub values: String,
    /// Comma-separated subset seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Attack-set size for the beta sweep (default 5000).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub no_clamp: bool,
    #[command(flatten)]
    pub universal: UniversalArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub perturbation: PathBuf,
    #[arg(long, default_value = "unip-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// A config.echo written by an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
