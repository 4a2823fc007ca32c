use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use diffmix_core::datamix::ReplacementMode;
use diffmix_core::diffusion::{SamplerConfig, ScheduleKind, Solver};
use diffmix_core::personalization::{FinetuneConfig, FinetuneStrategy};
use diffmix_core::synthesis::{CleanMode, ReferencePolicy, Strategy, TranslationSpec};
use diffmix_core::toy::{PretrainConfig, SpuriousConfig, SpuriousSettings, ToyPipeline};
use diffmix_core::train_eval::TrainConfig;
use serde::{Deserialize, Serialize};

/// Contents of the TOML config file. Every key is optional; command-line
/// flags take precedence over file values, which take precedence over the
/// built-in toy defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub output_root: Option<PathBuf>,
    pub seed: Option<u64>,
    pub metaclass: Option<String>,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub sampler: SamplerSection,
    pub synthesis: SynthesisSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub spurious: SpuriousSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Option<usize>,
    pub blocks: Option<usize>,
    pub cond_dim: Option<usize>,
    pub time_dim: Option<usize>,
    pub schedule: Option<ScheduleKind>,
    pub train_steps: Option<usize>,
    pub identifier_jitter: Option<f32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub cond_dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub strategy: Option<FinetuneStrategy>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub rank: Option<usize>,
    pub cond_dropout: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub keep_checkpoints: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub solver: Option<Solver>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PolicyKind {
    IntraClass,
    FullSet,
    Restricted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub strategy: Option<Strategy>,
    pub personalized: Option<bool>,
    pub strengths: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub multiplier: Option<usize>,
    pub policy: Option<PolicyKind>,
    pub referable_classes: Option<usize>,
    pub clean_fraction: Option<f64>,
    pub clean_mode: Option<CleanMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub hidden: Option<usize>,
    pub replacement_probability: Option<f64>,
    pub replacement: Option<ReplacementMode>,
    pub smoothing: Option<f64>,
    pub gamma: Option<f64>,
    pub epoch_length: Option<usize>,
    pub mixup_alpha: Option<f64>,
    pub cutmix_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub many_above: Option<usize>,
    pub few_below: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpuriousSection {
    pub train_size: Option<usize>,
    pub test_per_group: Option<usize>,
    pub correlation: Option<f64>,
    pub fg_amplitude: Option<f32>,
    pub fg_noise: Option<f32>,
    pub bg_amplitude: Option<f32>,
    pub bg_noise: Option<f32>,
    pub replacement_probability: Option<f64>,
    pub classifier_hidden: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn metaclass(&self, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.metaclass.clone())
    }

    pub fn pipeline(&self) -> ToyPipeline {
        let mut p = ToyPipeline::default();
        let m = &self.model;
        set(&mut p.hidden, m.hidden);
        set(&mut p.blocks, m.blocks);
        set(&mut p.cond_dim, m.cond_dim);
        set(&mut p.time_dim, m.time_dim);
        set(&mut p.schedule, m.schedule);
        set(&mut p.train_steps, m.train_steps);
        set(&mut p.identifier_jitter, m.identifier_jitter);
        p.pretrain = self.pretrain_config(p.pretrain);
        p.finetune = self.finetune_config(p.finetune.clone());
        p.sampler = self.sampler_config(p.sampler);
        p
    }

    fn pretrain_config(&self, mut c: PretrainConfig) -> PretrainConfig {
        let s = &self.pretrain;
        set(&mut c.steps, s.steps);
        set(&mut c.batch_size, s.batch_size);
        set(&mut c.learning_rate, s.learning_rate);
        set(&mut c.cond_dropout, s.cond_dropout);
        c
    }

    fn finetune_config(&self, mut c: FinetuneConfig) -> FinetuneConfig {
        let s = &self.finetune;
        set(&mut c.strategy, s.strategy);
        set(&mut c.steps, s.steps);
        set(&mut c.batch_size, s.batch_size);
        set(&mut c.learning_rate, s.learning_rate);
        set(&mut c.rank, s.rank);
        set(&mut c.cond_dropout, s.cond_dropout);
        set(&mut c.checkpoint_every, s.checkpoint_every);
        set(&mut c.keep_checkpoints, s.keep_checkpoints);
        c
    }

    fn sampler_config(&self, mut c: SamplerConfig) -> SamplerConfig {
        let s = &self.sampler;
        set(&mut c.steps, s.steps);
        set(&mut c.guidance_scale, s.guidance_scale);
        set(&mut c.solver, s.solver);
        c
    }

    pub fn translation(&self) -> TranslationSpec {
        let s = &self.synthesis;
        let mut spec = TranslationSpec::new(s.strategy.unwrap_or(Strategy::Mix), s.personalized.unwrap_or(true));
        set(&mut spec.strengths, s.strengths.clone());
        set(&mut spec.gamma, s.gamma);
        set(&mut spec.multiplier, s.multiplier);
        spec
    }

    pub fn classifier(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        let t = &self.train;
        set(&mut c.epochs, t.epochs);
        set(&mut c.batch_size, t.batch_size);
        set(&mut c.learning_rate, t.learning_rate);
        c
    }

    pub fn spurious(&self) -> SpuriousSettings {
        let mut s = SpuriousSettings {
            pipeline: self.pipeline(),
            ..SpuriousSettings::default()
        };
        let f = &self.spurious;
        let d: &mut SpuriousConfig = &mut s.data;
        set(&mut d.train_size, f.train_size);
        set(&mut d.test_per_group, f.test_per_group);
        set(&mut d.correlation, f.correlation);
        set(&mut d.fg_amplitude, f.fg_amplitude);
        set(&mut d.fg_noise, f.fg_noise);
        set(&mut d.bg_amplitude, f.bg_amplitude);
        set(&mut d.bg_noise, f.bg_noise);
        set(&mut s.replacement_probability, f.replacement_probability);
        set(&mut s.classifier_hidden, f.classifier_hidden);
        let t = &self.train;
        set(&mut s.classifier.epochs, t.epochs);
        set(&mut s.classifier.batch_size, t.batch_size);
        set(&mut s.classifier.learning_rate, t.learning_rate);
        let sy = &self.synthesis;
        set(&mut s.spec.strengths, sy.strengths.clone());
        set(&mut s.spec.gamma, sy.gamma);
        set(&mut s.spec.multiplier, sy.multiplier);
        s
    }
}

pub fn policy(kind: PolicyKind, referable: Option<usize>, seed: u64) -> Result<ReferencePolicy> {
    Ok(match kind {
        PolicyKind::IntraClass => ReferencePolicy::intra_class(),
        PolicyKind::FullSet => ReferencePolicy::full_set(),
        PolicyKind::Restricted => {
            let k = referable.context("the restricted policy needs --referable-classes")?;
            ReferencePolicy::restricted(k, seed)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_toy_defaults() {
        let c: FileConfig = toml::from_str("").unwrap();
        assert_eq!(c.pipeline(), ToyPipeline::default());
        assert_eq!(c.translation(), TranslationSpec::new(Strategy::Mix, true));
        assert_eq!(c.seed(None), 0);
    }

    #[test]
    fn partial_sections_override_single_fields() {
        let c: FileConfig = toml::from_str(
            "seed = 4\n[finetune]\nsteps = 10\nstrategy = \"db\"\n[sampler]\nsolver = \"ancestral\"\n[synthesis]\nstrengths = [0.3]\n",
        )
        .unwrap();
        let p = c.pipeline();
        assert_eq!(p.finetune.steps, 10);
        assert_eq!(p.finetune.strategy, FinetuneStrategy::Db);
        assert_eq!(p.finetune.batch_size, ToyPipeline::default().finetune.batch_size);
        assert_eq!(p.sampler.solver, Solver::Ancestral);
        assert_eq!(c.translation().strengths, vec![0.3]);
        assert_eq!(c.seed(Some(9)), 9);
        assert_eq!(c.seed(None), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[finetune]\nstep = 3\n").is_err());
    }
}
