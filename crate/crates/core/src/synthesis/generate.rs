use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::check_pairing;
use super::{select_reference, DatasetManifest, ManifestHeader, ReferencePools, Strategy, SyntheticSample,
    TranslationSpec, MANIFEST_VERSION};
use crate::class::ClassId;
use crate::diffusion::sampler::normal_array;
use crate::diffusion::{denoise_from, insert_reference, Denoiser, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::io::{read_jsonl, write_jsonl, write_npy, Dataset};
use crate::personalization::{build_prompt, IdentifierTable, PromptEncoder, PromptMode};
use crate::rng::{self, Rng, Stream};

const SHARD: usize = 64;

/// Everything needed to run the reverse process under a class prompt.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a dyn Denoiser,
    pub table: &'a IdentifierTable,
    pub encoder: &'a dyn PromptEncoder,
    pub sampler: SamplerConfig,
    pub sched: &'a NoiseSchedule,
    /// Fingerprint of the personalization checkpoint applied to `model`.
    pub checkpoint: Option<&'a str>,
}

impl Generator<'_> {
    fn prompt_mode(&self, personalized: bool) -> Result<PromptMode> {
        if personalized && self.checkpoint.is_none() {
            return Err(Error::state("personalized synthesis needs a loaded personalization checkpoint"));
        }
        Ok(if personalized {
            PromptMode::Identifier
        } else {
            PromptMode::Terminology
        })
    }

    fn conditions(&self, targets: &[ClassId], personalized: bool) -> Result<Array2<f32>> {
        let mode = self.prompt_mode(personalized)?;
        let mut cache: BTreeMap<ClassId, Array1<f32>> = BTreeMap::new();
        let mut out = Array2::zeros((targets.len(), self.model.cond_dim()));
        for (mut row, &t) in out.axis_iter_mut(Axis(0)).zip(targets) {
            if let Entry::Vacant(slot) = cache.entry(t) {
                let prompt = build_prompt(t, mode, self.table)?;
                slot.insert(self.encoder.encode(&prompt, Some(self.table))?.cond);
            }
            row.assign(&cache[&t]);
        }
        Ok(out)
    }

    fn null_condition(&self, rows: usize) -> Result<Array2<f32>> {
        let null = self.encoder.encode("", None)?.cond;
        Ok(null.broadcast((rows, null.len())).expect("row broadcast").to_owned())
    }
}

/// Translates each row of `x_ref` toward its target class at `strength`,
/// or generates from pure noise when no reference is given.
pub fn translate(
    gen: &Generator<'_>,
    x_ref: Option<ArrayView2<f32>>,
    targets: &[ClassId],
    strength: f64,
    personalized: bool,
    rng: &mut Rng,
) -> Result<Array2<f32>> {
    let rows = targets.len();
    let dim = gen.model.data_dim();
    if let Some(x) = &x_ref {
        if x.dim() != (rows, dim) {
            return Err(Error::invalid(format!(
                "references have shape {:?}, expected ({rows}, {dim})",
                x.dim()
            )));
        }
    }
    let cond = gen.conditions(targets, personalized)?;
    let uncond = gen.null_condition(rows)?;
    let eps = normal_array((rows, dim), rng);
    let (x_start, k) = match x_ref {
        None => (eps, gen.sampler.steps),
        Some(x) => insert_reference(x, strength, eps.view(), gen.sched, gen.sampler.steps)?,
    };
    let cfg = SamplerConfig {
        seed: rng.random(),
        ..gen.sampler
    };
    denoise_from(x_start.view(), k, cond.view(), Some(uncond.view()), gen.model, &cfg, gen.sched)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub record: SyntheticSample,
    pub image: Array1<f32>,
}

/// One synthetic sample for `target`. The image is returned alongside its
/// record; persisting it under `image_ref` is left to the caller.
pub fn synthesize_one(
    target: ClassId,
    spec: &TranslationSpec,
    pools: &ReferencePools,
    trainset: &Dataset,
    gen: &Generator<'_>,
    image_ref: String,
    rng: &mut Rng,
) -> Result<Synthesized> {
    spec.validate()?;
    check_pairing(pools.kind(), spec.strategy)?;
    target.check(trainset.num_classes)?;
    let (image, reference, strength) = match spec.strategy {
        Strategy::Gen => {
            let out = translate(gen, None, &[target], 1.0, spec.personalized, rng)?;
            (out, None, None)
        }
        Strategy::Aug | Strategy::Mix => {
            let (example, reference) = select_reference(target, pools, trainset, rng)?;
            let s = spec.strengths[rng.random_range(0..spec.strengths.len())];
            let x = example.image.view().insert_axis(Axis(0));
            let out = translate(gen, Some(x), &[target], s, spec.personalized, rng)?;
            (out, Some(reference), Some(s))
        }
    };
    Ok(Synthesized {
        record: SyntheticSample {
            image_ref,
            target_class: target,
            reference_class: reference,
            strength,
            gamma: spec.gamma,
            confidence: None,
        },
        image: image.index_axis_move(Axis(0), 0),
    })
}

/// How target classes are assigned to record indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPlan {
    /// Record `m` targets the class of real example `m mod |trainset|`, so
    /// each class gets `multiplier` times its real count.
    Proportional,
    /// Fixed per-class counts, as produced for long-tail uniformization.
    Quotas(Vec<(ClassId, usize)>),
}

impl TargetPlan {
    pub fn targets(&self, trainset: &Dataset, multiplier: usize) -> Result<Vec<ClassId>> {
        match self {
            TargetPlan::Proportional => {
                if trainset.is_empty() {
                    return Err(Error::invalid("training set is empty"));
                }
                let n = multiplier * trainset.len();
                Ok((0..n).map(|m| trainset.examples[m % trainset.len()].class).collect())
            }
            TargetPlan::Quotas(q) => {
                let mut out = Vec::new();
                for &(c, k) in q {
                    c.check(trainset.num_classes)?;
                    out.extend(std::iter::repeat_n(c, k));
                }
                Ok(out)
            }
        }
    }
}

struct Job<'a> {
    trainset: &'a Dataset,
    spec: &'a TranslationSpec,
    pools: &'a ReferencePools,
    gen: &'a Generator<'a>,
    targets: Vec<ClassId>,
    seed: u64,
}

impl Job<'_> {
    fn image_ref(&self, index: usize) -> String {
        format!("images/{}-{}-{index:06}.npy", self.spec.strategy, self.seed)
    }

    fn run(&self, index: usize) -> Result<Synthesized> {
        let mut rng = rng::stream(self.seed, Stream::Sample, index as u64);
        synthesize_one(
            self.targets[index],
            self.spec,
            self.pools,
            self.trainset,
            self.gen,
            self.image_ref(index),
            &mut rng,
        )
    }
}

fn prepare<'a>(
    trainset: &'a Dataset,
    spec: &'a TranslationSpec,
    pools: &'a ReferencePools,
    gen: &'a Generator<'a>,
    plan: &TargetPlan,
    seed: u64,
) -> Result<Job<'a>> {
    spec.validate()?;
    check_pairing(pools.kind(), spec.strategy)?;
    gen.sampler.validate()?;
    gen.prompt_mode(spec.personalized)?;
    if gen.model.data_dim() != trainset.dim() {
        return Err(Error::invalid(format!(
            "model works on {} values per image, dataset has {}",
            gen.model.data_dim(),
            trainset.dim()
        )));
    }
    if gen.table.num_classes() != trainset.num_classes {
        return Err(Error::invalid(format!(
            "identifier table covers {} classes, dataset has {}",
            gen.table.num_classes(),
            trainset.num_classes
        )));
    }
    let targets = plan.targets(trainset, spec.multiplier)?;
    Ok(Job {
        trainset,
        spec,
        pools,
        gen,
        targets,
        seed,
    })
}

/// Generates every record in memory, in parallel.
pub fn synthesize_in_memory(
    trainset: &Dataset,
    spec: &TranslationSpec,
    pools: &ReferencePools,
    gen: &Generator<'_>,
    plan: &TargetPlan,
    seed: u64,
) -> Result<Vec<Synthesized>> {
    let job = prepare(trainset, spec, pools, gen, plan, seed)?;
    (0..job.targets.len()).into_par_iter().map(|i| job.run(i)).collect()
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RunStamp {
    fingerprint: String,
    records: usize,
}

/// Generates a synthetic set under `out`: images in `out/images`, records in
/// `out/manifest.jsonl`. Work is split into shards written as they finish,
/// so an interrupted run resumes where it stopped. A finished or partial
/// run with a different configuration is refused.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset(
    trainset: &Dataset,
    dataset_name: &str,
    spec: &TranslationSpec,
    pools: &ReferencePools,
    gen: &Generator<'_>,
    plan: &TargetPlan,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    let job = prepare(trainset, spec, pools, gen, plan, seed)?;
    let referable: Vec<Vec<ClassId>> = (0..trainset.num_classes)
        .map(|c| pools.referable(ClassId::from_zero_based(c)).to_vec())
        .collect();
    let fp = fingerprint::combine(
        [
            spec.fingerprint(),
            fingerprint::of_json(&(pools.kind(), &referable)),
            fingerprint::of_json(&gen.sampler),
            fingerprint::of_json(&seed),
            trainset.fingerprint(),
            fingerprint::of_json(&gen.checkpoint),
            fingerprint::of_json(&job.targets),
        ]
        .iter()
        .map(String::as_str),
    );
    let header = ManifestHeader {
        version: MANIFEST_VERSION,
        dataset: dataset_name.to_string(),
        num_classes: trainset.num_classes,
        metaclass: gen.table.metaclass().to_string(),
        strategy: spec.strategy,
        spec_fingerprint: fp.clone(),
        checkpoint_fingerprint: gen.checkpoint.map(str::to_string),
        seed,
    };

    let manifest_path = out.join("manifest.jsonl");
    if manifest_path.exists() {
        let existing = DatasetManifest::load(&manifest_path)?;
        if existing.header != header {
            return Err(Error::FingerprintMismatch(format!(
                "{} was produced by a different configuration",
                manifest_path.display()
            )));
        }
        return Ok(existing);
    }

    let shards = out.join("shards");
    let stamp_path = shards.join("run.json");
    let stamp = RunStamp {
        fingerprint: fp,
        records: job.targets.len(),
    };
    if stamp_path.exists() {
        let found: RunStamp = serde_json::from_slice(&fs::read(&stamp_path).map_err(Error::io(&stamp_path))?)
            .map_err(|e| Error::format(stamp_path.display().to_string(), e))?;
        if found != stamp {
            return Err(Error::FingerprintMismatch(format!(
                "partial run in {} has a different configuration; remove it to start over",
                shards.display()
            )));
        }
    } else {
        fs::create_dir_all(&shards).map_err(Error::io(&shards))?;
        let bytes = serde_json::to_vec(&stamp).map_err(|e| Error::format("run stamp", e))?;
        fs::write(&stamp_path, bytes).map_err(Error::io(&stamp_path))?;
    }

    let total = job.targets.len();
    let starts: Vec<usize> = (0..total).step_by(SHARD).collect();
    let shard_path = |start: usize| shards.join(format!("shard-{start:08}.jsonl"));
    let pending: Vec<usize> = starts.iter().copied().filter(|&s| !shard_path(s).exists()).collect();
    if pending.len() < starts.len() {
        log::info!("resuming: {} of {} shards already done", starts.len() - pending.len(), starts.len());
    }
    let shape = IxDyn(&trainset.shape);
    pending.par_iter().try_for_each(|&start| -> Result<()> {
        let mut records = Vec::with_capacity(SHARD);
        for index in start..(start + SHARD).min(total) {
            let s = job.run(index)?;
            let arr = ArrayD::from_shape_vec(shape.clone(), s.image.to_vec())
                .map_err(|e| Error::invalid(e.to_string()))?;
            write_npy(&out.join(&s.record.image_ref), &arr)?;
            records.push(s.record);
        }
        let path = shard_path(start);
        let tmp = path.with_extension("tmp");
        write_jsonl(&tmp, &records)?;
        fs::rename(&tmp, &path).map_err(Error::io(&path))?;
        log::debug!("shard {start} done");
        Ok(())
    })?;

    let mut records = Vec::with_capacity(total);
    for &start in &starts {
        records.extend(read_jsonl::<SyntheticSample>(&shard_path(start))?);
    }
    if records.len() != total {
        return Err(Error::state(format!("merged {} records, expected {total}", records.len())));
    }
    let manifest = DatasetManifest { header, records };
    manifest.validate()?;
    manifest.save(&manifest_path)?;
    fs::remove_dir_all(&shards).map_err(Error::io(&shards))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ScheduleKind, ToyDenoiser, ToyDenoiserConfig};
    use crate::io::Example;
    use crate::personalization::ToyTextEncoder;
    use crate::rng::seeded;
    use crate::synthesis::ReferencePolicy;

    struct Fixture {
        data: Dataset,
        model: ToyDenoiser,
        table: IdentifierTable,
        encoder: ToyTextEncoder,
        sched: NoiseSchedule,
    }

    impl Fixture {
        fn new() -> Self {
            let counts = [4usize, 2, 2];
            let mut examples = Vec::new();
            for (c, &k) in counts.iter().enumerate() {
                for i in 0..k {
                    examples.push(Example {
                        image_ref: format!("{c}-{i}.npy"),
                        class: ClassId::from_zero_based(c),
                        image: Array1::from_vec(vec![c as f32, i as f32]),
                    });
                }
            }
            let data = Dataset::new(vec![2], 3, examples).unwrap();
            let mut cfg = ToyDenoiserConfig::new(2, 100, 0);
            cfg.hidden = 16;
            let model = ToyDenoiser::new(cfg).unwrap();
            let encoder = ToyTextEncoder::new(16);
            let names = vec!["red".to_string(), "green".into(), "blue".into()];
            let table =
                IdentifierTable::new("bird", 3, encoder.word("bird").view(), 0.1, 0, Some(names)).unwrap();
            let sched = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
            Fixture {
                data,
                model,
                table,
                encoder,
                sched,
            }
        }

        fn gen(&self, checkpoint: Option<&'static str>) -> Generator<'_> {
            Generator {
                model: &self.model,
                table: &self.table,
                encoder: &self.encoder,
                sampler: SamplerConfig {
                    steps: 10,
                    guidance_scale: 2.0,
                    ..SamplerConfig::default()
                },
                sched: &self.sched,
                checkpoint,
            }
        }
    }

    #[test]
    fn aug_records_are_intra_class_with_listed_strengths() {
        let f = Fixture::new();
        let gen = f.gen(Some("ck"));
        let pools = ReferencePools::build(&ReferencePolicy::intra_class(), &f.data).unwrap();
        let spec = TranslationSpec::new(Strategy::Aug, true);
        let mut rng = seeded(0);
        for _ in 0..30 {
            let s = synthesize_one(ClassId::new(2).unwrap(), &spec, &pools, &f.data, &gen, "x".into(), &mut rng)
                .unwrap();
            assert_eq!(s.record.reference_class, Some(s.record.target_class));
            assert!([0.5, 0.7, 0.9].contains(&s.record.strength.unwrap()));
            assert!(s.image.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_strength_returns_reference() {
        let f = Fixture::new();
        let gen = f.gen(Some("ck"));
        let pools = ReferencePools::build(&ReferencePolicy::full_set(), &f.data).unwrap();
        let mut spec = TranslationSpec::new(Strategy::Mix, true);
        spec.strengths = vec![0.0];
        let mut rng = seeded(3);
        for _ in 0..10 {
            let s = synthesize_one(ClassId::new(1).unwrap(), &spec, &pools, &f.data, &gen, "x".into(), &mut rng)
                .unwrap();
            let j = s.record.reference_class.unwrap();
            let refs: Vec<_> = f.data.examples.iter().filter(|e| e.class == j).collect();
            assert!(refs.iter().any(|e| e.image == s.image));
        }
    }

    #[test]
    fn mismatched_policy_and_missing_checkpoint() {
        let f = Fixture::new();
        let pools = ReferencePools::build(&ReferencePolicy::intra_class(), &f.data).unwrap();
        let spec = TranslationSpec::new(Strategy::Mix, false);
        let err = synthesize_one(ClassId::new(1).unwrap(), &spec, &pools, &f.data, &f.gen(None), "x".into(), &mut seeded(0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let gen_spec = TranslationSpec::new(Strategy::Gen, true);
        let err = synthesize_one(ClassId::new(1).unwrap(), &gen_spec, &pools, &f.data, &f.gen(None), "x".into(), &mut seeded(0));
        assert!(matches!(err, Err(Error::InvalidState(_))));
        let ok = synthesize_one(ClassId::new(1).unwrap(), &TranslationSpec::new(Strategy::Gen, false), &pools, &f.data, &f.gen(None), "x".into(), &mut seeded(0)).unwrap();
        assert_eq!((ok.record.reference_class, ok.record.strength), (None, None));
    }

    #[test]
    fn proportional_counts_and_determinism() {
        let f = Fixture::new();
        let gen = f.gen(Some("ck"));
        let pools = ReferencePools::build(&ReferencePolicy::full_set(), &f.data).unwrap();
        let spec = TranslationSpec::new(Strategy::Mix, true);
        let a = synthesize_in_memory(&f.data, &spec, &pools, &gen, &TargetPlan::Proportional, 7).unwrap();
        assert_eq!(a.len(), 40);
        let mut counts = [0usize; 3];
        for s in &a {
            counts[s.record.target_class.zero_based()] += 1;
        }
        assert_eq!(counts, [20, 10, 10]);
        let b = synthesize_in_memory(&f.data, &spec, &pools, &gen, &TargetPlan::Proportional, 7).unwrap();
        assert_eq!(a, b);
        let quotas = TargetPlan::Quotas(vec![(ClassId::new(3).unwrap(), 2), (ClassId::new(2).unwrap(), 1)]);
        assert_eq!(synthesize_in_memory(&f.data, &spec, &pools, &gen, &quotas, 7).unwrap().len(), 3);
    }

    #[test]
    fn dataset_runs_are_byte_identical_and_resumable() {
        let f = Fixture::new();
        let gen = f.gen(Some("ck"));
        let pools = ReferencePools::build(&ReferencePolicy::full_set(), &f.data).unwrap();
        let mut spec = TranslationSpec::new(Strategy::Mix, true);
        spec.multiplier = 20;
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let plan = TargetPlan::Proportional;
        let m1 = synthesize_dataset(&f.data, "toy", &spec, &pools, &gen, &plan, 1, d1.path()).unwrap();
        assert_eq!(m1.records.len(), 160);
        let m2 = synthesize_dataset(&f.data, "toy", &spec, &pools, &gen, &plan, 1, d2.path()).unwrap();
        assert_eq!(m1, m2);
        let bytes = |d: &Path| fs::read(d.join("manifest.jsonl")).unwrap();
        assert_eq!(bytes(d1.path()), bytes(d2.path()));
        assert_eq!(
            fs::read(d1.path().join(&m1.records[100].image_ref)).unwrap(),
            fs::read(d2.path().join(&m1.records[100].image_ref)).unwrap()
        );

        // Interrupted run: drop the manifest and one shard, then resume.
        let d3 = tempfile::tempdir().unwrap();
        synthesize_dataset(&f.data, "toy", &spec, &pools, &gen, &plan, 1, d3.path()).unwrap();
        fs::remove_file(d3.path().join("manifest.jsonl")).unwrap();
        let shards = d3.path().join("shards");
        fs::create_dir_all(&shards).unwrap();
        let stamp = RunStamp {
            fingerprint: m1.header.spec_fingerprint.clone(),
            records: 160,
        };
        fs::write(shards.join("run.json"), serde_json::to_vec(&stamp).unwrap()).unwrap();
        write_jsonl(&shards.join("shard-00000000.jsonl"), &m1.records[..64]).unwrap();
        let m3 = synthesize_dataset(&f.data, "toy", &spec, &pools, &gen, &plan, 1, d3.path()).unwrap();
        assert_eq!(m3, m1);

        let err = synthesize_dataset(&f.data, "toy", &spec, &pools, &gen, &plan, 2, d1.path()).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch(_)));
        fs::remove_file(d1.path().join("manifest.jsonl")).unwrap();
        fs::create_dir_all(d1.path().join("shards")).unwrap();
        fs::write(d1.path().join("shards/run.json"), serde_json::to_vec(&stamp).unwrap()).unwrap();
        let err = synthesize_dataset(&f.data, "toy", &spec, &pools, &gen, &plan, 2, d1.path()).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch(_)));
    }
}
