use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::{base_checksum, short};
use super::{
    attach_adapters, build_prompt, Adaptable, Container, IdentifierTable, LowRankAdapter, PersonalizedCheckpoint,
    PromptEncoder, PromptMode,
};
use crate::diffusion::{train_step, NoiseSchedule, TrainBatch, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::io::Dataset;
use crate::nn::{Adam, AdamConfig, Param, Parameterized};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStrategy {
    /// Identifier embeddings only.
    Ti,
    /// Low-rank adapters only.
    Db,
    /// Both, under one optimizer.
    TiDb,
}

impl FinetuneStrategy {
    pub fn tunes_identifiers(self) -> bool {
        matches!(self, FinetuneStrategy::Ti | FinetuneStrategy::TiDb)
    }

    pub fn tunes_adapters(self) -> bool {
        matches!(self, FinetuneStrategy::Db | FinetuneStrategy::TiDb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub strategy: FinetuneStrategy,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Input resolution of image backends; the toy backend ignores it.
    pub resolution: usize,
    pub rank: usize,
    /// Probability of training a row against the null condition.
    pub cond_dropout: f64,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            strategy: FinetuneStrategy::TiDb,
            steps: 35_000,
            batch_size: 8,
            learning_rate: 5e-5,
            resolution: 512,
            rank: 10,
            cond_dropout: 0.1,
            checkpoint_every: 500,
            keep_checkpoints: 2,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!("condition dropout {} outside [0, 1)", self.cond_dropout)));
        }
        if self.rank == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::of_json(self)
    }
}

/// Where and how often a run persists resumable state.
#[derive(Debug, Clone, Default)]
pub struct FinetuneRun {
    pub checkpoint_dir: Option<PathBuf>,
    /// Log the mean loss every this many steps; 0 disables logging.
    pub log_every: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: PersonalizedCheckpoint,
    /// Loss of every step, including steps replayed from a resumed state.
    pub losses: Vec<f64>,
    pub resumed_from: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    adam_step: u64,
    run_fingerprint: String,
    losses: Vec<f64>,
}

const STATE_KIND: &str = "finetune-state";

/// Fine-tunes `model` on `(image, class)` records with identifier prompts.
/// Base weights stay frozen; the trainable set is the identifier table for
/// TI, the adapters for DB, and their union for TI+DB. When a checkpoint
/// directory is given the run saves state every `checkpoint_every` steps and
/// resumes from the newest compatible state.
pub fn finetune<M>(
    dataset: &Dataset,
    model: &mut M,
    table: &mut IdentifierTable,
    encoder: &dyn PromptEncoder,
    cfg: &FinetuneConfig,
    sched: &NoiseSchedule,
    run: &FinetuneRun,
) -> Result<FinetuneOutcome>
where
    M: TrainableDenoiser + Adaptable,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("fine-tuning dataset is empty"));
    }
    for e in &dataset.examples {
        e.class.check(table.num_classes())?;
    }
    if dataset.dim() != model.data_dim() {
        return Err(Error::invalid(format!(
            "dataset images have {} values, model expects {}",
            dataset.dim(),
            model.data_dim()
        )));
    }
    if encoder.dim() != model.cond_dim() || table.dim() != model.cond_dim() {
        return Err(Error::invalid("encoder, identifier and model condition widths differ"));
    }
    if model.adapter_targets().iter().any(|(_, l)| l.adapter.is_some()) {
        return Err(Error::state("fine-tuning starts from a base model without adapters"));
    }

    let base_fingerprint = base_checksum(model);
    let dataset_fingerprint = dataset.fingerprint();
    let run_fingerprint = fingerprint::combine([
        cfg.fingerprint().as_str(),
        dataset_fingerprint.as_str(),
        base_fingerprint.as_str(),
        fingerprint::of_json(table.embeddings().value.as_slice().unwrap_or(&[])).as_str(),
    ]);

    let targets = if cfg.strategy.tunes_adapters() {
        attach_adapters(model, cfg.rank, cfg.seed)?
    } else {
        Vec::new()
    };
    let tune_adapters = cfg.strategy.tunes_adapters();
    model.set_trainable(&|name: &str| tune_adapters && name.contains(".lora_"));
    table.set_trainable(cfg.strategy.tunes_identifiers());

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut start = 0;
    let mut resumed_from = None;
    if let Some(dir) = &run.checkpoint_dir {
        if let Some((step, state)) = latest_state(dir, &run_fingerprint)? {
            let meta: StateMeta = serde_json::from_value(state.meta.clone()).map_err(|e| Error::format("state", e))?;
            restore(model, table, &mut opt, &state)?;
            opt.step = meta.adam_step;
            losses = meta.losses;
            start = step;
            resumed_from = Some(step);
            log::info!("resuming fine-tuning at step {step}");
        }
    }

    let prompts = (1..=table.num_classes())
        .map(|i| build_prompt(crate::ClassId::from_zero_based(i - 1), PromptMode::Identifier, table))
        .collect::<Result<Vec<_>>>()?;

    for step in start..cfg.steps {
        let mut rng = rng::stream(cfg.seed, Stream::Train, step as u64);
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let mut x0 = Array2::zeros((picks.len(), dataset.dim()));
        let mut cond = Array2::zeros((picks.len(), model.cond_dim()));
        let mut routes = Vec::with_capacity(picks.len());
        for (r, &i) in picks.iter().enumerate() {
            let ex = &dataset.examples[i];
            x0.row_mut(r).assign(&ex.image);
            let enc = encoder.encode(&prompts[ex.class.zero_based()], Some(table))?;
            cond.row_mut(r).assign(&enc.cond);
            routes.push(enc.identifiers);
        }
        let out = train_step(model, &TrainBatch { x0, cond }, sched, cfg.cond_dropout, &mut rng)?;
        if cfg.strategy.tunes_identifiers() {
            let grad = &mut table.params_mut().pop().expect("one table param").1.grad;
            for (r, ids) in routes.iter().enumerate() {
                for &(class, weight) in ids {
                    grad.row_mut(class.zero_based())
                        .scaled_add(weight, &out.cond_grad.row(r));
                }
            }
        }
        let mut params = model.params_mut();
        params.extend(table.params_mut());
        opt.step(params);
        losses.push(out.loss);

        let done = step + 1;
        if run.log_every > 0 && done % run.log_every == 0 {
            let window = &losses[losses.len().saturating_sub(run.log_every)..];
            log::info!(
                "step {done}/{}: loss {:.4}",
                cfg.steps,
                window.iter().sum::<f64>() / window.len() as f64
            );
        }
        if let Some(dir) = &run.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                save_state(dir, done, model, table, &opt, &run_fingerprint, &losses, cfg.keep_checkpoints)?;
            }
        }
    }

    let adapters = collect_adapters(model, &targets);
    let checkpoint = PersonalizedCheckpoint {
        config: cfg.clone(),
        dataset_fingerprint,
        base_fingerprint,
        metaclass: table.metaclass().to_string(),
        terminology_names: table.terminology_names().map(<[String]>::to_vec),
        adapters,
        embeddings: table.embeddings().value.clone(),
    };
    Ok(FinetuneOutcome {
        checkpoint,
        losses,
        resumed_from,
    })
}

fn collect_adapters<M: Adaptable>(model: &mut M, targets: &[String]) -> Vec<LowRankAdapter> {
    model
        .adapter_targets()
        .into_iter()
        .filter(|(n, _)| targets.contains(n))
        .filter_map(|(_, l)| l.adapter.clone())
        .collect()
}

fn state_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("state-{step:08}.ckpt"))
}

fn tuned(params: Vec<(String, &mut Param)>) -> impl Iterator<Item = (String, &mut Param)> {
    params.into_iter().filter(|(n, p)| p.trainable || n.contains(".lora_"))
}

#[allow(clippy::too_many_arguments)]
fn save_state<M: Parameterized>(
    dir: &Path,
    step: usize,
    model: &mut M,
    table: &mut IdentifierTable,
    opt: &Adam,
    run_fingerprint: &str,
    losses: &[f64],
    keep: usize,
) -> Result<()> {
    let meta = StateMeta {
        step,
        adam_step: opt.step,
        run_fingerprint: run_fingerprint.to_string(),
        losses: losses.to_vec(),
    };
    let mut c = Container::new(STATE_KIND, serde_json::to_value(meta).expect("serializable"));
    let mut params = model.params_mut();
    params.extend(table.params_mut());
    for (name, p) in tuned(params) {
        if let Some((m, v)) = opt.moments.get(&name) {
            c.push(format!("adam.m.{name}"), m.clone());
            c.push(format!("adam.v.{name}"), v.clone());
        }
        c.push(name, p.value.clone());
    }
    c.save(&state_path(dir, step))?;

    let mut existing = list_states(dir)?;
    existing.sort();
    let excess = existing.len().saturating_sub(keep.max(1));
    for (_, path) in existing.into_iter().take(excess) {
        fs::remove_file(&path).map_err(Error::io(&path))?;
    }
    Ok(())
}

fn list_states(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("state-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    Ok(out)
}

fn latest_state(dir: &Path, run_fingerprint: &str) -> Result<Option<(usize, Container)>> {
    let mut states = list_states(dir)?;
    states.sort();
    for (step, path) in states.into_iter().rev() {
        let c = Container::load(&path)?;
        let meta: StateMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::format("state", e))?;
        if meta.run_fingerprint == run_fingerprint {
            return Ok(Some((step, c)));
        }
        log::warn!(
            "ignoring {}: belongs to run {}, not {}",
            path.display(),
            short(&meta.run_fingerprint),
            short(run_fingerprint)
        );
    }
    Ok(None)
}

fn restore<M: Parameterized>(model: &mut M, table: &mut IdentifierTable, opt: &mut Adam, c: &Container) -> Result<()> {
    let mut params = model.params_mut();
    params.extend(table.params_mut());
    for (name, p) in tuned(params) {
        p.value.assign(c.require(&name)?);
        if let (Some(m), Some(v)) = (c.get(&format!("adam.m.{name}")), c.get(&format!("adam.v.{name}"))) {
            opt.moments.insert(name, (m.clone(), v.clone()));
        }
    }
    Ok(())
}
