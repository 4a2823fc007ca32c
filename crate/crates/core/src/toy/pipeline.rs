use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{NearestCentroid, ToyProblem, COUNTERFACTUAL_GROUPS};
use super::data::{spurious, SpuriousConfig};
use crate::class::ClassId;
use crate::datamix::{MixedSampler, MixedSamplerConfig};
use crate::diffusion::{train_step, NoiseSchedule, SamplerConfig, ScheduleKind, ToyDenoiser, ToyDenoiserConfig, TrainBatch,
    TrainableDenoiser};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::nn::{Adam, AdamConfig};
use crate::personalization::{
    finetune, FinetuneConfig, FinetuneRun, FinetuneStrategy, IdentifierTable, PersonalizedCheckpoint, PromptEncoder,
    ToyTextEncoder,
};
use crate::rng::{self, Stream};
use crate::synthesis::{
    synthesize_in_memory, translate, Generator, ReferencePolicy, ReferencePools, Strategy, TargetPlan,
    TranslationSpec,
};
use crate::train_eval::{group_accuracy, train_classifier, GroupAccuracy, MixedStream, MlpClassifier, MlpConfig,
    TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 128,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

/// Trains every base weight on `photo of a {metaclass}` prompts, so the
/// model knows the domain but not its classes.
pub fn pretrain_denoiser<M: TrainableDenoiser + ?Sized>(
    model: &mut M,
    data: &Dataset,
    metaclass: &str,
    encoder: &dyn PromptEncoder,
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("pretraining needs data, steps and a batch size"));
    }
    if data.dim() != model.data_dim() || encoder.dim() != model.cond_dim() {
        return Err(Error::invalid("data, encoder and model widths differ"));
    }
    let cond = encoder.encode(&format!("photo of a {metaclass}"), None)?.cond;
    model.set_trainable(&|name: &str| !name.contains(".lora_"));
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng::stream(cfg.seed, Stream::Train, step as u64);
        let mut x0 = Array2::zeros((cfg.batch_size, data.dim()));
        for mut row in x0.axis_iter_mut(Axis(0)) {
            row.assign(&data.examples[rng.random_range(0..data.len())].image);
        }
        let c = cond.broadcast((cfg.batch_size, cond.len())).expect("row broadcast").to_owned();
        let out = train_step(model, &TrainBatch { x0, cond: c }, sched, cfg.cond_dropout, &mut rng)?;
        opt.step(model.params_mut());
        losses.push(out.loss);
    }
    Ok(losses)
}

/// Sizes and hyperparameters of the toy pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPipeline {
    pub hidden: usize,
    pub blocks: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub schedule: ScheduleKind,
    pub train_steps: usize,
    /// Spread of identifier initializations around the metaclass word.
    pub identifier_jitter: f32,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sampler: SamplerConfig,
}

impl Default for ToyPipeline {
    fn default() -> Self {
        ToyPipeline {
            hidden: 64,
            blocks: 2,
            cond_dim: 16,
            time_dim: 16,
            schedule: ScheduleKind::Cosine,
            train_steps: 1000,
            identifier_jitter: 0.1,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig {
                strategy: FinetuneStrategy::TiDb,
                steps: 1500,
                batch_size: 64,
                learning_rate: 2e-3,
                resolution: 0,
                rank: 4,
                cond_dropout: 0.1,
                checkpoint_every: 0,
                keep_checkpoints: 0,
                seed: 0,
            },
            sampler: SamplerConfig {
                steps: 25,
                guidance_scale: 1.5,
                ..SamplerConfig::default()
            },
        }
    }
}

impl ToyPipeline {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule, self.train_steps)
    }

    pub fn encoder(&self) -> ToyTextEncoder {
        ToyTextEncoder::new(self.cond_dim)
    }

    pub fn denoiser(&self, data_dim: usize, seed: u64) -> Result<ToyDenoiser> {
        ToyDenoiser::new(ToyDenoiserConfig {
            data_dim,
            cond_dim: self.cond_dim,
            hidden: self.hidden,
            time_dim: self.time_dim,
            blocks: self.blocks,
            train_steps: self.train_steps,
            seed,
        })
    }

    /// Fresh base model pretrained on the problem's training split.
    pub fn base_model(&self, problem: &ToyProblem, seed: u64) -> Result<(ToyDenoiser, Vec<f64>)> {
        let mut model = self.denoiser(problem.train.dim(), seed)?;
        let cfg = PretrainConfig { seed, ..self.pretrain };
        let losses = pretrain_denoiser(
            &mut model,
            &problem.train,
            &problem.metaclass,
            &self.encoder(),
            &cfg,
            &self.schedule()?,
        )?;
        Ok((model, losses))
    }
}

pub fn identifier_table(problem: &ToyProblem, encoder: &ToyTextEncoder, jitter: f32, seed: u64) -> Result<IdentifierTable> {
    IdentifierTable::new(
        &problem.metaclass,
        problem.train.num_classes,
        encoder.word(&problem.metaclass).view(),
        jitter,
        seed,
        Some(problem.class_names.clone()),
    )
}

/// A fine-tuned model with its identifiers.
#[derive(Debug, Clone)]
pub struct Personalized {
    pub model: ToyDenoiser,
    pub table: IdentifierTable,
    pub checkpoint: PersonalizedCheckpoint,
    pub fingerprint: String,
    pub losses: Vec<f64>,
}

impl Personalized {
    pub fn generator<'a>(&'a self, encoder: &'a ToyTextEncoder, sched: &'a NoiseSchedule, sampler: SamplerConfig) -> Generator<'a> {
        Generator {
            model: &self.model,
            table: &self.table,
            encoder,
            sampler,
            sched,
            checkpoint: Some(&self.fingerprint),
        }
    }
}

pub fn personalize(
    problem: &ToyProblem,
    base: &ToyDenoiser,
    pipeline: &ToyPipeline,
    strategy: FinetuneStrategy,
    seed: u64,
) -> Result<Personalized> {
    let encoder = pipeline.encoder();
    let mut model = base.clone();
    let mut table = identifier_table(problem, &encoder, pipeline.identifier_jitter, seed)?;
    let cfg = FinetuneConfig {
        strategy,
        seed,
        ..pipeline.finetune.clone()
    };
    let out = finetune(
        &problem.train,
        &mut model,
        &mut table,
        &encoder,
        &cfg,
        &pipeline.schedule()?,
        &FinetuneRun::default(),
    )?;
    Ok(Personalized {
        model,
        table,
        fingerprint: out.checkpoint.fingerprint(),
        checkpoint: out.checkpoint,
        losses: out.losses,
    })
}

/// Rate at which translations of `reference`-class images toward `target`
/// land nearest the target centroid, one entry per strength.
pub fn translation_rates(
    problem: &ToyProblem,
    tuned: &Personalized,
    pipeline: &ToyPipeline,
    strengths: &[f64],
    per_strength: usize,
    (target, reference): (ClassId, ClassId),
    seed: u64,
) -> Result<Vec<f64>> {
    let oracle = NearestCentroid::fit(&problem.train)?;
    let refs: Vec<&Array1<f32>> = problem
        .train
        .examples
        .iter()
        .filter(|e| e.class == reference)
        .map(|e| &e.image)
        .collect();
    if refs.is_empty() {
        return Err(Error::state(format!("class {reference} has no training images")));
    }
    let mut x = Array2::zeros((per_strength, problem.train.dim()));
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(refs[i % refs.len()]);
    }
    let (encoder, sched) = (pipeline.encoder(), pipeline.schedule()?);
    let gen = tuned.generator(&encoder, &sched, pipeline.sampler);
    let targets = vec![target; per_strength];
    strengths
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let mut rng = rng::stream(seed, Stream::Sample, k as u64);
            let out = translate(&gen, Some(x.view()), &targets, s, true, &mut rng)?;
            Ok(oracle.rate(&out, target))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSettings {
    pub data: SpuriousConfig,
    pub pipeline: ToyPipeline,
    pub spec: TranslationSpec,
    pub replacement_probability: f64,
    pub classifier_hidden: usize,
    pub classifier: TrainConfig,
}

impl Default for SpuriousSettings {
    fn default() -> Self {
        SpuriousSettings {
            data: SpuriousConfig::default(),
            pipeline: ToyPipeline::default(),
            spec: TranslationSpec::new(Strategy::Mix, true),
            replacement_probability: 0.3,
            classifier_hidden: 8,
            classifier: TrainConfig {
                epochs: 60,
                batch_size: 32,
                learning_rate: 5e-3,
                seed: 0,
                batch_augment: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousOutcome {
    pub baseline: GroupAccuracy,
    pub augmented: GroupAccuracy,
    pub baseline_counterfactual: f64,
    pub augmented_counterfactual: f64,
    pub synthetic_records: usize,
}

impl SpuriousOutcome {
    pub fn improvement(&self) -> f64 {
        self.augmented_counterfactual - self.baseline_counterfactual
    }
}

fn counterfactual(acc: &GroupAccuracy) -> f64 {
    COUNTERFACTUAL_GROUPS.iter().map(|g| acc.per_group.get(*g).copied().unwrap_or(0.0)).sum::<f64>()
        / COUNTERFACTUAL_GROUPS.len() as f64
}

/// Baseline classifier versus the same classifier trained with synthetic
/// replacements, on the spurious-background problem.
pub fn spurious_experiment(settings: &SpuriousSettings, seed: u64) -> Result<SpuriousOutcome> {
    let problem = spurious(&settings.data, seed)?;
    let groups = problem.groups.as_ref().expect("spurious problem defines groups");
    let pipeline = &settings.pipeline;
    let (base, _) = pipeline.base_model(&problem, seed)?;
    let tuned = personalize(&problem, &base, pipeline, pipeline.finetune.strategy, seed)?;
    let (encoder, sched) = (pipeline.encoder(), pipeline.schedule()?);
    let gen = tuned.generator(&encoder, &sched, pipeline.sampler);
    let policy = match settings.spec.strategy {
        Strategy::Aug => ReferencePolicy::intra_class(),
        _ => ReferencePolicy::full_set(),
    };
    let pools = ReferencePools::build(&policy, &problem.train)?;
    let synthetic = synthesize_in_memory(&problem.train, &settings.spec, &pools, &gen, &TargetPlan::Proportional, seed)?;
    let (records, images): (Vec<_>, Vec<_>) = synthetic.into_iter().map(|s| (s.record, s.image)).unzip();

    let classes = problem.train.classes();
    let clf_cfg = TrainConfig {
        seed,
        ..settings.classifier
    };
    let run = |p: f64| -> Result<GroupAccuracy> {
        let sampler = MixedSampler::new(
            &classes,
            &records,
            problem.train.num_classes,
            MixedSamplerConfig {
                replacement_probability: p,
                seed,
                ..MixedSamplerConfig::default()
            },
        )?;
        let stream = MixedStream::new(sampler, &problem.train, &images)?;
        let mut clf = MlpClassifier::new(MlpConfig {
            input_dim: problem.train.dim(),
            hidden: settings.classifier_hidden,
            num_classes: problem.train.num_classes,
            seed,
        })?;
        train_classifier(&stream, &mut clf, &clf_cfg)?;
        group_accuracy(&clf, &problem.test, groups)
    };
    let baseline = run(0.0)?;
    let augmented = run(settings.replacement_probability)?;
    Ok(SpuriousOutcome {
        baseline_counterfactual: counterfactual(&baseline),
        augmented_counterfactual: counterfactual(&augmented),
        baseline,
        augmented,
        synthetic_records: records.len(),
    })
}
