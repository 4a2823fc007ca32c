use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use diffmix_core::datamix::{
    make_longtail, subsample_fewshot, synthetic_target_counts, LongTailSpec, MixedSampler, MixedSamplerConfig, Shots,
};
use diffmix_core::diffusion::NoiseSchedule;
use diffmix_core::io::{write_jsonl, Dataset, GroupRecord};
use diffmix_core::personalization::{
    finetune, load_denoiser, save_denoiser, FinetuneRun, IdentifierTable, PersonalizedCheckpoint, ToyTextEncoder,
};
use diffmix_core::synthesis::{
    clean, synthesize_dataset, CleanMode, DatasetManifest, Generator, ReferencePools, Strategy, TargetPlan, ToyScorer,
};
use diffmix_core::toy::{pretrain_denoiser, spurious, spurious_experiment, three_class, ToyPipeline, COUNTERFACTUAL_GROUPS};
use diffmix_core::train_eval::{
    evaluate_accuracy, fid_f32, group_accuracy, load_classifier, save_classifier, shot_band_accuracy, train_classifier,
    BatchAugment, GroupSpec, MetricsReport, MixedStream, MlpClassifier, MlpConfig,
};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{policy, FileConfig, PolicyKind};
use crate::data::{load_dataset, load_synthetic_image, load_synthetic_images, DatasetInfo};
use crate::stamp::{self, require_exists, run_fingerprint, Check};
use crate::{
    CleanArgs, Cli, Command, EvalArgs, FewshotArgs, FinetuneArgs, LongtailArgs, PretrainArgs, SynthesizeArgs, ToyDataArgs,
    ToyE2eArgs, ToyKind, TrainArgs,
};

struct Ctx {
    cfg: FileConfig,
    root: PathBuf,
    force: bool,
}

impl Ctx {
    fn output(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn check(&self, command: &str, fp: String, out: &Path, is_dir: bool) -> Result<Option<stamp::Guard>> {
        match stamp::check(command, fp, out, is_dir, self.force)? {
            Check::UpToDate(s) => {
                println!("{} is up to date (fingerprint {})", out.display(), &s.fingerprint[..12.min(s.fingerprint.len())]);
                Ok(None)
            }
            Check::Run(g) => Ok(Some(g)),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(c) = &cli.config {
        require_exists(&[c])?;
    }
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let root = cli
        .out_root
        .clone()
        .or_else(|| cfg.output_root.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Ctx {
        cfg,
        root,
        force: cli.force,
    };
    match cli.command {
        Command::ToyData(a) => toy_data(&ctx, a),
        Command::Pretrain(a) => pretrain(&ctx, a),
        Command::Finetune(a) => cmd_finetune(&ctx, a),
        Command::Synthesize(a) => synthesize(&ctx, a),
        Command::Clean(a) => cmd_clean(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Longtail(a) => longtail(&ctx, a),
        Command::Fewshot(a) => fewshot(&ctx, a),
        Command::ToyE2e(a) => toy_e2e(&ctx, a),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn schedule_for(pipeline: &ToyPipeline, train_steps: usize) -> Result<NoiseSchedule> {
    Ok(NoiseSchedule::build(pipeline.schedule, train_steps)?)
}

fn toy_data(ctx: &Ctx, a: ToyDataArgs) -> Result<()> {
    let seed = ctx.cfg.seed(a.seed);
    let out = ctx.output(&a.out);
    let data_cfg = ctx.cfg.spurious().data;
    let settings = (format!("{:?}", a.kind), a.per_class, seed, &data_cfg);
    let Some(guard) = ctx.check("toy-data", run_fingerprint("toy-data", &[], &settings)?, &out, true)? else {
        return Ok(());
    };
    let problem = match a.kind {
        ToyKind::ThreeClass => three_class(a.per_class, seed)?,
        ToyKind::Spurious => spurious(&data_cfg, seed)?,
    };
    std::fs::create_dir_all(&out)?;
    let mut outputs = vec![
        problem.train.save(&out, "train.jsonl")?,
        problem.test.save(&out, "test.jsonl")?,
    ];
    let info = DatasetInfo {
        name: problem.name.clone(),
        metaclass: problem.metaclass.clone(),
        num_classes: problem.train.num_classes,
        class_names: Some(problem.class_names.clone()),
    };
    outputs.push(info.save_in(&out)?);
    if let Some(groups) = &problem.groups {
        let rows: Vec<GroupRecord> = groups
            .groups
            .iter()
            .map(|(r, g)| GroupRecord {
                image_ref: r.clone(),
                group_id: g.clone(),
            })
            .collect();
        let path = out.join("groups.jsonl");
        write_jsonl(&path, &rows)?;
        outputs.push(path);
    }
    guard.finish(outputs)?;
    println!(
        "wrote {} ({} train, {} test, {} classes)",
        out.display(),
        problem.train.len(),
        problem.test.len(),
        problem.train.num_classes
    );
    Ok(())
}

fn pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    require_exists(&[&a.train])?;
    let seed = ctx.cfg.seed(a.seed);
    let pipeline = ctx.cfg.pipeline();
    let mut cfg = pipeline.pretrain;
    cfg.seed = seed;
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    let loaded = load_dataset(&a.train)?;
    let metaclass = loaded.metaclass(ctx.cfg.metaclass(a.metaclass))?;
    let out = ctx.output(&a.out);
    let settings = (&pipeline, &cfg, &metaclass);
    let Some(guard) = ctx.check("pretrain", run_fingerprint("pretrain", &[&a.train], &settings)?, &out, false)? else {
        return Ok(());
    };
    let mut model = pipeline.denoiser(loaded.data.dim(), seed)?;
    let losses = pretrain_denoiser(
        &mut model,
        &loaded.data,
        &metaclass,
        &pipeline.encoder(),
        &cfg,
        &pipeline.schedule()?,
    )?;
    create_parent(&out)?;
    let fp = save_denoiser(&model, &out)?;
    guard.finish(vec![out.clone()])?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "wrote {} (final loss {:.4}, fingerprint {})",
        out.display(),
        tail.iter().sum::<f64>() / tail.len() as f64,
        &fp[..12]
    );
    Ok(())
}

fn cmd_finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<()> {
    require_exists(&[&a.train, &a.base])?;
    let seed = ctx.cfg.seed(a.seed);
    let pipeline = ctx.cfg.pipeline();
    let mut cfg = pipeline.finetune.clone();
    cfg.seed = seed;
    cfg.strategy = a.strategy.unwrap_or(cfg.strategy);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.rank = a.rank.unwrap_or(cfg.rank);
    let loaded = load_dataset(&a.train)?;
    let metaclass = loaded.metaclass(ctx.cfg.metaclass(a.metaclass))?;
    let out = ctx.output(&a.out);
    let settings = (&cfg, &metaclass, pipeline.identifier_jitter, pipeline.schedule);
    let fp = run_fingerprint("finetune", &[&a.train, &a.base], &settings)?;
    let Some(guard) = ctx.check("finetune", fp, &out, false)? else {
        return Ok(());
    };
    let mut model = load_denoiser(&a.base)?;
    if model.has_adapters() {
        bail!("{} already carries adapters; fine-tune from a base model", a.base.display());
    }
    let encoder = ToyTextEncoder::new(model.config().cond_dim);
    let mut table = IdentifierTable::new(
        &metaclass,
        loaded.data.num_classes,
        encoder.word(&metaclass).view(),
        pipeline.identifier_jitter,
        seed,
        loaded.class_names(),
    )?;
    let sched = schedule_for(&pipeline, model.config().train_steps)?;
    let run = FinetuneRun {
        checkpoint_dir: a.state_dir.as_deref().map(|d| ctx.output(d)),
        log_every: (cfg.steps / 10).max(1),
    };
    let outcome = finetune(&loaded.data, &mut model, &mut table, &encoder, &cfg, &sched, &run)?;
    create_parent(&out)?;
    let saved = outcome.checkpoint.save(&out)?;
    guard.finish(vec![out.clone()])?;
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(100)..];
    println!(
        "wrote {} (strategy {:?}, final loss {:.4}, fingerprint {})",
        out.display(),
        cfg.strategy,
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        &saved[..12]
    );
    Ok(())
}

fn synthesize(ctx: &Ctx, a: SynthesizeArgs) -> Result<()> {
    require_exists(&[&a.train, &a.base])?;
    if let Some(c) = &a.checkpoint {
        require_exists(&[c])?;
    }
    if let Some(q) = &a.quotas {
        require_exists(&[q])?;
    }
    let seed = ctx.cfg.seed(a.seed);
    let pipeline = ctx.cfg.pipeline();
    let mut spec = ctx.cfg.translation();
    spec.strategy = a.strategy.unwrap_or(spec.strategy);
    spec.personalized = a.personalized.unwrap_or(spec.personalized);
    spec.strengths = a.strengths.clone().unwrap_or(spec.strengths);
    spec.gamma = a.gamma.unwrap_or(spec.gamma);
    spec.multiplier = a.multiplier.unwrap_or(spec.multiplier);
    spec.validate()?;
    let syn = &ctx.cfg.synthesis;
    let kind = a.policy.or(syn.policy).unwrap_or(match spec.strategy {
        Strategy::Aug => PolicyKind::IntraClass,
        _ => PolicyKind::FullSet,
    });
    let pol = policy(kind, a.referable_classes.or(syn.referable_classes), seed)?;
    pol.check_strategy(spec.strategy)?;
    let clean_fraction = a.clean_fraction.or(syn.clean_fraction).unwrap_or(0.0);
    ensure!((0.0..1.0).contains(&clean_fraction), "clean fraction {clean_fraction} outside [0, 1)");

    let loaded = load_dataset(&a.train)?;
    let metaclass = loaded.metaclass(ctx.cfg.metaclass(a.metaclass.clone()))?;
    let mut model = load_denoiser(&a.base)?;
    let encoder = ToyTextEncoder::new(model.config().cond_dim);
    let (table, ckpt_fp) = match (&a.checkpoint, spec.personalized) {
        (Some(path), true) => {
            let ckpt = PersonalizedCheckpoint::load(path)?;
            ckpt.apply(&mut model)?;
            (ckpt.identifier_table()?, Some(ckpt.fingerprint()))
        }
        (None, true) => bail!("personalized synthesis needs --checkpoint (or pass --personalized false)"),
        (_, false) => {
            let names = loaded
                .class_names()
                .context("class-name prompts need class_names in dataset.json")?;
            let table = IdentifierTable::new(
                &metaclass,
                loaded.data.num_classes,
                encoder.word(&metaclass).view(),
                0.0,
                0,
                Some(names),
            )?;
            (table, None)
        }
    };
    ensure!(
        table.num_classes() == loaded.data.num_classes,
        "checkpoint has {} identifiers but the dataset has {} classes",
        table.num_classes(),
        loaded.data.num_classes
    );
    let sched = schedule_for(&pipeline, model.config().train_steps)?;
    let gen = Generator {
        model: &model,
        table: &table,
        encoder: &encoder,
        sampler: pipeline.sampler,
        sched: &sched,
        checkpoint: ckpt_fp.as_deref(),
    };
    let plan = match &a.quotas {
        Some(q) => {
            let text = std::fs::read_to_string(q)?;
            let lt: LongTailSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", q.display()))?;
            TargetPlan::Quotas(synthetic_target_counts(&lt))
        }
        None => TargetPlan::Proportional,
    };
    let pools = ReferencePools::build(&pol, &loaded.data)?;
    let out = ctx.output(&a.out);
    let manifest = synthesize_dataset(&loaded.data, &loaded.name(&a.train), &spec, &pools, &gen, &plan, seed, &out)?;
    let manifest_path = out.join("manifest.jsonl");
    println!("wrote {} ({} records)", manifest_path.display(), manifest.records.len());
    if clean_fraction > 0.0 {
        let mode = syn.clean_mode.unwrap_or_default();
        let cleaned_path = out.join("manifest.clean.jsonl");
        clean_manifest(ctx, &manifest_path, &a.train, &loaded.data, clean_fraction, mode, &cleaned_path)?;
    }
    Ok(())
}

fn clean_manifest(
    ctx: &Ctx,
    manifest_path: &Path,
    train_index: &Path,
    train: &Dataset,
    fraction: f64,
    mode: CleanMode,
    out: &Path,
) -> Result<()> {
    let settings = (fraction, mode);
    let fp = run_fingerprint("clean", &[manifest_path, train_index], &settings)?;
    let Some(guard) = ctx.check("clean", fp, out, false)? else {
        return Ok(());
    };
    let manifest = DatasetManifest::load(manifest_path)?;
    let scorer = ToyScorer::fit(train)?;
    let load = |r: &diffmix_core::SyntheticSample| load_synthetic_image(manifest_path, r);
    let cleaned = clean(&manifest, fraction, mode, &scorer, &load)?;
    cleaned.save(out)?;
    guard.finish(vec![out.to_path_buf()])?;
    println!(
        "wrote {} ({} of {} records kept)",
        out.display(),
        cleaned.records.len(),
        manifest.records.len()
    );
    Ok(())
}

fn cmd_clean(ctx: &Ctx, a: CleanArgs) -> Result<()> {
    require_exists(&[&a.manifest, &a.train])?;
    let fraction = a.fraction.or(ctx.cfg.synthesis.clean_fraction).unwrap_or(0.1);
    let mode = a.mode.or(ctx.cfg.synthesis.clean_mode).unwrap_or_default();
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let out = match &a.out {
        Some(o) => {
            let o = ctx.output(o);
            let same = o.parent().map(|p| p.canonicalize().ok()) == Some(dir.canonicalize().ok());
            ensure!(
                same,
                "{} must be written beside {} so image paths stay valid",
                o.display(),
                a.manifest.display()
            );
            o
        }
        None => dir.join("manifest.clean.jsonl"),
    };
    let train = load_dataset(&a.train)?;
    clean_manifest(ctx, &a.manifest, &a.train, &train.data, fraction, mode, &out)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    require_exists(&[&a.train])?;
    if let Some(s) = &a.synthetic {
        require_exists(&[s])?;
    }
    let seed = ctx.cfg.seed(a.seed);
    let t = &ctx.cfg.train;
    let mut cfg = ctx.cfg.classifier();
    cfg.seed = seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    let hidden = a.hidden.or(t.hidden).unwrap_or(32);
    let loaded = load_dataset(&a.train)?;
    cfg.batch_augment = match (a.mixup.or(t.mixup_alpha), a.cutmix.or(t.cutmix_alpha)) {
        (Some(_), Some(_)) => bail!("choose mixup or cutmix, not both"),
        (Some(alpha), None) => Some(BatchAugment::Mixup { alpha }),
        (None, Some(alpha)) => {
            let shape: [usize; 3] = loaded
                .data
                .shape
                .as_slice()
                .try_into()
                .map_err(|_| anyhow::anyhow!("cutmix needs [C, H, W] images, got shape {:?}", loaded.data.shape))?;
            Some(BatchAugment::Cutmix { alpha, shape })
        }
        (None, None) => None,
    };
    let default_p = if a.synthetic.is_some() {
        MixedSamplerConfig::default().replacement_probability
    } else {
        0.0
    };
    let mixed = MixedSamplerConfig {
        replacement_probability: a.replacement_probability.or(t.replacement_probability).unwrap_or(default_p),
        epoch_length: a.epoch_length.or(t.epoch_length),
        smoothing: a.smoothing.or(t.smoothing).unwrap_or(1.0),
        gamma: a.gamma.or(t.gamma),
        replacement: a.replacement.or(t.replacement).unwrap_or(diffmix_core::datamix::ReplacementMode::ClassMatched),
        seed,
    };
    let out = ctx.output(&a.out);
    let mut inputs: Vec<&Path> = vec![&a.train];
    if let Some(s) = &a.synthetic {
        inputs.push(s);
    }
    let settings = (&cfg, hidden, &mixed);
    let Some(guard) = ctx.check("train", run_fingerprint("train", &inputs, &settings)?, &out, false)? else {
        return Ok(());
    };
    let (records, images) = match &a.synthetic {
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            ensure!(
                m.header.num_classes == loaded.data.num_classes,
                "manifest has {} classes, training set has {}",
                m.header.num_classes,
                loaded.data.num_classes
            );
            let images = load_synthetic_images(path, &m)?;
            (m.records, images)
        }
        None => (Vec::new(), Vec::new()),
    };
    let classes = loaded.data.classes();
    let sampler = MixedSampler::new(&classes, &records, loaded.data.num_classes, mixed)?;
    let stream = MixedStream::new(sampler, &loaded.data, &images)?;
    let mut model = MlpClassifier::new(MlpConfig {
        input_dim: loaded.data.dim(),
        hidden,
        num_classes: loaded.data.num_classes,
        seed,
    })?;
    let history = train_classifier(&stream, &mut model, &cfg)?;
    create_parent(&out)?;
    save_classifier(&model, &out)?;
    guard.finish(vec![out.clone()])?;
    println!(
        "wrote {} ({} epochs, final loss {:.4})",
        out.display(),
        history.epoch_loss.len(),
        history.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.model, &a.test];
    inputs.extend(
        [&a.groups, &a.train, &a.fid_real, &a.fid_synthetic]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path),
    );
    require_exists(&inputs)?;
    let e = &ctx.cfg.eval;
    let bands = (a.many_above.or(e.many_above).unwrap_or(20), a.few_below.or(e.few_below).unwrap_or(5));
    let out = ctx.output(&a.out);
    let Some(guard) = ctx.check("eval", run_fingerprint("eval", &inputs, &bands)?, &out, false)? else {
        return Ok(());
    };
    let model = load_classifier(&a.model)?;
    let test = load_dataset(&a.test)?.data;
    let mut report = MetricsReport {
        top1: evaluate_accuracy(&model, &test)?,
        ..MetricsReport::default()
    };
    if let Some(g) = &a.groups {
        report.per_group = group_accuracy(&model, &test, &GroupSpec::load(g)?)?.per_group;
    }
    if let Some(t) = &a.train {
        let counts = load_dataset(t)?.data.class_counts();
        report.bands = shot_band_accuracy(&model, &test, &counts, bands)?;
    }
    if let (Some(real), Some(syn)) = (&a.fid_real, &a.fid_synthetic) {
        let real = load_dataset(real)?.data;
        let manifest = DatasetManifest::load(syn)?;
        let images = load_synthetic_images(syn, &manifest)?;
        let rows = |v: Vec<ndarray::Array1<f32>>| -> Result<Array2<f32>> {
            let dim = v.first().map_or(0, |r| r.len());
            let flat: Vec<f32> = v.into_iter().flat_map(|r| r.to_vec()).collect();
            Ok(Array2::from_shape_vec((flat.len() / dim.max(1), dim), flat)?)
        };
        let a_real = rows(real.examples.into_iter().map(|e| e.image).collect())?;
        let a_syn = rows(images)?;
        report.fid = Some(fid_f32(a_real.view(), a_syn.view())?);
    }
    create_parent(&out)?;
    report.save(&out)?;
    guard.finish(vec![out.clone()])?;
    print!("{}", report.table());
    Ok(())
}

fn longtail(ctx: &Ctx, a: LongtailArgs) -> Result<()> {
    require_exists(&[&a.train])?;
    let seed = ctx.cfg.seed(a.seed);
    let out = ctx.output(&a.out);
    let fp = run_fingerprint("longtail", &[&a.train], &(a.rho, seed))?;
    let Some(guard) = ctx.check("longtail", fp, &out, false)? else {
        return Ok(());
    };
    let loaded = load_dataset(&a.train)?;
    let (positions, spec) = make_longtail(&loaded.data.classes(), loaded.data.num_classes, a.rho, seed)?;
    let mut outputs = crate::data::write_subset_index(&a.train, &loaded, &positions, &out)?;
    let spec_path = out.with_extension("longtail.json");
    write_json(&spec_path, &spec)?;
    outputs.push(spec_path.clone());
    guard.finish(outputs)?;
    println!(
        "wrote {} ({} images, head {} tail {}, realized ratio {:.1}); quotas in {}",
        out.display(),
        spec.total(),
        spec.counts.first().copied().unwrap_or(0),
        spec.counts.last().copied().unwrap_or(0),
        spec.realized_ratio(),
        spec_path.display()
    );
    Ok(())
}

fn fewshot(ctx: &Ctx, a: FewshotArgs) -> Result<()> {
    require_exists(&[&a.train])?;
    let seed = ctx.cfg.seed(a.seed);
    let shots: Shots = a.shots.parse()?;
    let out = ctx.output(&a.out);
    let fp = run_fingerprint("fewshot", &[&a.train], &(&a.shots, seed))?;
    let Some(guard) = ctx.check("fewshot", fp, &out, false)? else {
        return Ok(());
    };
    let loaded = load_dataset(&a.train)?;
    let positions = subsample_fewshot(&loaded.data.classes(), loaded.data.num_classes, shots, seed)?;
    let outputs = crate::data::write_subset_index(&a.train, &loaded, &positions, &out)?;
    guard.finish(outputs)?;
    println!("wrote {} ({} images)", out.display(), positions.len());
    Ok(())
}

#[derive(Serialize)]
struct E2eSummary {
    seed: u64,
    counterfactual_groups: [&'static str; 2],
    baseline_counterfactual: f64,
    diffmix_counterfactual: f64,
    improvement: f64,
    synthetic_records: usize,
}

fn toy_e2e(ctx: &Ctx, a: ToyE2eArgs) -> Result<()> {
    let seed = ctx.cfg.seed(a.seed);
    let settings = ctx.cfg.spurious();
    let out = ctx.output(&a.out);
    let fp = run_fingerprint("toy-e2e", &[], &(&settings, seed))?;
    let Some(guard) = ctx.check("toy-e2e", fp, &out, true)? else {
        return Ok(());
    };
    let outcome = spurious_experiment(&settings, seed)?;
    let report = |g: &diffmix_core::train_eval::GroupAccuracy| MetricsReport {
        top1: g.average,
        per_group: g.per_group.clone(),
        ..MetricsReport::default()
    };
    let (base, mix) = (report(&outcome.baseline), report(&outcome.augmented));
    std::fs::create_dir_all(&out)?;
    let (bp, mp, sp) = (out.join("baseline.json"), out.join("diffmix.json"), out.join("summary.json"));
    base.save(&bp)?;
    mix.save(&mp)?;
    write_json(
        &sp,
        &E2eSummary {
            seed,
            counterfactual_groups: COUNTERFACTUAL_GROUPS,
            baseline_counterfactual: outcome.baseline_counterfactual,
            diffmix_counterfactual: outcome.augmented_counterfactual,
            improvement: outcome.improvement(),
            synthetic_records: outcome.synthetic_records,
        },
    )?;
    guard.finish(vec![bp, mp, sp])?;
    println!("baseline\n{}", base.table());
    println!("diff-mix\n{}", mix.table());
    println!(
        "counterfactual accuracy {:.2} -> {:.2} ({:+.2} points)",
        100.0 * outcome.baseline_counterfactual,
        100.0 * outcome.augmented_counterfactual,
        100.0 * outcome.improvement()
    );
    Ok(())
}
