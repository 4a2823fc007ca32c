use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Adaptable, Container, FinetuneConfig, IdentifierTable, LowRankAdapter};
use crate::diffusion::{ToyDenoiser, ToyDenoiserConfig};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::nn::{self, Param, Parameterized};

const DENOISER_KIND: &str = "toy-denoiser";
const PERSONALIZED_KIND: &str = "personalization";

/// Snapshot of the toy denoiser, adapters included when attached.
pub fn save_denoiser(model: &ToyDenoiser, path: &Path) -> Result<String> {
    let meta = serde_json::to_value(model.config()).expect("serializable config");
    let mut c = Container::new(DENOISER_KIND, meta);
    for (name, p) in model.params() {
        c.push(name, p.value.clone());
    }
    c.save(path)
}

pub fn load_denoiser(path: &Path) -> Result<ToyDenoiser> {
    let c = Container::load(path)?.expect_kind(DENOISER_KIND)?;
    let config: ToyDenoiserConfig =
        serde_json::from_value(c.meta.clone()).map_err(|e| Error::format("denoiser checkpoint", e))?;
    let mut model = ToyDenoiser::new(config)?;
    let rank = c
        .arrays
        .iter()
        .find(|(n, _)| n.ends_with(".lora_a"))
        .map(|(_, a)| a.ncols());
    if let Some(rank) = rank {
        super::attach_adapters(&mut model, rank, 0)?;
    }
    assign(&mut model, &c)?;
    Ok(model)
}

fn assign<M: Parameterized + ?Sized>(model: &mut M, c: &Container) -> Result<()> {
    for (name, p) in model.params_mut() {
        let a = c.require(&name)?;
        if a.dim() != p.value.dim() {
            return Err(Error::format(
                "checkpoint",
                format!("{name} has shape {:?}, expected {:?}", a.dim(), p.value.dim()),
            ));
        }
        p.value.assign(a);
    }
    Ok(())
}

/// Checksum of a model's base weights, adapters excluded.
pub(crate) fn base_checksum<M: Parameterized + ?Sized>(model: &M) -> String {
    nn::checksum(model, |n| !n.contains(".lora_"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PersonalizedMeta {
    config: FinetuneConfig,
    config_fingerprint: String,
    dataset_fingerprint: String,
    base_fingerprint: String,
    metaclass: String,
    terminology_names: Option<Vec<String>>,
    targets: Vec<String>,
}

/// Result of fine-tuning: adapters per target and the identifier table,
/// tied to the base model and dataset they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedCheckpoint {
    pub config: FinetuneConfig,
    pub dataset_fingerprint: String,
    pub base_fingerprint: String,
    pub metaclass: String,
    pub terminology_names: Option<Vec<String>>,
    pub adapters: Vec<LowRankAdapter>,
    pub embeddings: Array2<f32>,
}

impl PersonalizedCheckpoint {
    pub fn to_container(&self) -> Container {
        let meta = PersonalizedMeta {
            config: self.config.clone(),
            config_fingerprint: self.config.fingerprint(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            base_fingerprint: self.base_fingerprint.clone(),
            metaclass: self.metaclass.clone(),
            terminology_names: self.terminology_names.clone(),
            targets: self.adapters.iter().map(|a| a.target.clone()).collect(),
        };
        let mut c = Container::new(PERSONALIZED_KIND, serde_json::to_value(meta).expect("serializable"));
        for ad in &self.adapters {
            c.push(format!("{}.lora_a", ad.target), ad.a.value.clone());
            c.push(format!("{}.lora_b", ad.target), ad.b.value.clone());
        }
        c.push("identifiers", self.embeddings.clone());
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind(PERSONALIZED_KIND)?;
        let meta: PersonalizedMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::format("personalization checkpoint", e))?;
        if meta.config_fingerprint != meta.config.fingerprint() {
            return Err(Error::FingerprintMismatch(
                "stored fine-tune config does not match its fingerprint".into(),
            ));
        }
        let adapters = meta
            .targets
            .iter()
            .map(|t| {
                Ok(LowRankAdapter {
                    target: t.clone(),
                    a: Param::new(c.require(&format!("{t}.lora_a"))?.clone()),
                    b: Param::new(c.require(&format!("{t}.lora_b"))?.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PersonalizedCheckpoint {
            config: meta.config,
            dataset_fingerprint: meta.dataset_fingerprint,
            base_fingerprint: meta.base_fingerprint,
            metaclass: meta.metaclass,
            terminology_names: meta.terminology_names,
            adapters,
            embeddings: c.require("identifiers")?.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::of_bytes(&self.to_container().to_bytes())
    }

    pub fn identifier_table(&self) -> Result<IdentifierTable> {
        IdentifierTable::from_parts(&self.metaclass, self.embeddings.clone(), self.terminology_names.clone())
    }

    /// Installs the adapters into `model`, which must be the exact base the
    /// checkpoint was trained from and carry no adapters yet.
    pub fn apply<M: Adaptable + Parameterized>(&self, model: &mut M) -> Result<()> {
        let base = base_checksum(model);
        if base != self.base_fingerprint {
            return Err(Error::FingerprintMismatch(format!(
                "checkpoint was trained on base {}, model is {}",
                short(&self.base_fingerprint),
                short(&base)
            )));
        }
        let mut targets = model.adapter_targets();
        for ad in &self.adapters {
            let (_, layer) = targets
                .iter_mut()
                .find(|(n, _)| *n == ad.target)
                .ok_or_else(|| Error::format("personalization checkpoint", format!("unknown target {}", ad.target)))?;
            if layer.adapter.is_some() {
                return Err(Error::state(format!("{} already carries an adapter", ad.target)));
            }
            if ad.a.value.nrows() != layer.outputs() || ad.b.value.nrows() != layer.inputs() {
                return Err(Error::format(
                    "personalization checkpoint",
                    format!("adapter {} does not fit its target", ad.target),
                ));
            }
            layer.adapter = Some(ad.clone());
        }
        Ok(())
    }
}

pub(crate) fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}
