mod commands;
mod config;
mod data;
mod stamp;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffmix_core::datamix::ReplacementMode;
use diffmix_core::personalization::FinetuneStrategy;
use diffmix_core::synthesis::{CleanMode, Strategy};

use crate::config::PolicyKind;

#[derive(Parser, Debug)]
#[command(name = "diffmix", version, about = "Inter-class diffusion augmentation pipeline")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root that relative output paths resolve against.
    #[arg(long, global = true, env = "DIFFMIX_OUT")]
    pub out_root: Option<PathBuf>,
    /// Overwrite outputs produced from different inputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a bundled toy dataset.
    ToyData(ToyDataArgs),
    /// Train a base toy denoiser on metaclass prompts.
    Pretrain(PretrainArgs),
    /// Personalize a base denoiser with identifiers and/or adapters.
    Finetune(FinetuneArgs),
    /// Generate a synthetic dataset and its manifest.
    Synthesize(SynthesizeArgs),
    /// Drop the lowest-confidence fraction of a manifest.
    Clean(CleanArgs),
    /// Train a classifier on real data with optional synthetic replacement.
    Train(TrainArgs),
    /// Evaluate a classifier and write a metrics report.
    Eval(EvalArgs),
    /// Build a long-tailed subset index.
    Longtail(LongtailArgs),
    /// Build a few-shot subset index.
    Fewshot(FewshotArgs),
    /// Run the spurious-background experiment end to end.
    ToyE2e(ToyE2eArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyKind {
    ThreeClass,
    Spurious,
}

#[derive(Args, Debug)]
pub struct ToyDataArgs {
    #[arg(long, value_enum, default_value = "three-class")]
    pub kind: ToyKind,
    /// Training points per class for the three-class problem.
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub metaclass: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, value_parser = parse_finetune_strategy)]
    pub strategy: Option<FinetuneStrategy>,
    #[arg(long)]
    pub metaclass: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Directory for periodic resumable state.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    /// Personalization checkpoint; required when personalized.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Identifier prompts on the fine-tuned model (true) or class names on
    /// the base model (false).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub personalized: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub strengths: Option<Vec<f64>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub multiplier: Option<usize>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub referable_classes: Option<usize>,
    /// Also write a cleaned manifest without this lowest-scoring fraction.
    #[arg(long)]
    pub clean_fraction: Option<f64>,
    /// Long-tail description whose reversed counts set per-class quotas.
    #[arg(long)]
    pub quotas: Option<PathBuf>,
    #[arg(long)]
    pub metaclass: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CleanArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Real data the confidence scorer is fitted on.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_parser = parse_clean_mode)]
    pub mode: Option<CleanMode>,
    /// Output manifest; must live in the input manifest's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Synthetic manifest used for replacement.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    pub replacement_probability: Option<f64>,
    #[arg(long, value_parser = parse_replacement)]
    pub replacement: Option<ReplacementMode>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Overrides the gamma stored in the manifest.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epoch_length: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, conflicts_with = "cutmix")]
    pub mixup: Option<f64>,
    #[arg(long)]
    pub cutmix: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Group metadata lines `{image_ref, group_id}`.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Training index whose class counts define shot bands.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub many_above: Option<usize>,
    #[arg(long)]
    pub few_below: Option<usize>,
    #[arg(long, requires = "fid_synthetic")]
    pub fid_real: Option<PathBuf>,
    #[arg(long, requires = "fid_real")]
    pub fid_synthetic: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LongtailArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub rho: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FewshotArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Images per class, or `all`.
    #[arg(long)]
    pub shots: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ToyE2eArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: diffmix_core::Error| e.to_string())
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str, choices: &str) -> Result<T, String> {
    let key = s.to_ascii_lowercase().replace(['-', '+'], "_");
    serde_json::from_value(serde_json::Value::String(key)).map_err(|_| format!("expected one of {choices}, got {s:?}"))
}

fn parse_finetune_strategy(s: &str) -> Result<FinetuneStrategy, String> {
    parse_json_enum(s, "ti, db, ti_db")
}

fn parse_clean_mode(s: &str) -> Result<CleanMode, String> {
    parse_json_enum(s, "global, per_class")
}

fn parse_replacement(s: &str) -> Result<ReplacementMode, String> {
    parse_json_enum(s, "class_matched, pool")
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<stamp::MissingPath>().is_some()) {
        return 2;
    }
    let stale = err.chain().any(|e| {
        e.downcast_ref::<stamp::StaleOutput>().is_some()
            || matches!(e.downcast_ref::<diffmix_core::Error>(), Some(diffmix_core::Error::FingerprintMismatch(_)))
    });
    if stale {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn enum_flags_accept_dashes() {
        assert_eq!(parse_finetune_strategy("ti-db").unwrap(), FinetuneStrategy::TiDb);
        assert_eq!(parse_finetune_strategy("TI+DB").unwrap(), FinetuneStrategy::TiDb);
        assert_eq!(parse_clean_mode("per-class").unwrap(), CleanMode::PerClass);
        assert_eq!(parse_replacement("pool").unwrap(), ReplacementMode::Pool);
        assert!(parse_finetune_strategy("lora").is_err());
    }
}
