use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{smooth_label, soft_label, SoftLabel};
use crate::class::ClassId;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::synthesis::SyntheticSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    /// A replacement shares the real item's class.
    ClassMatched,
    /// A replacement is drawn from the whole synthetic pool, whose class
    /// mix follows the long-tail quotas.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedSamplerConfig {
    pub replacement_probability: f64,
    /// Items per epoch; defaults to the real set size.
    pub epoch_length: Option<usize>,
    /// Label smoothing confidence; 1 disables smoothing.
    pub smoothing: f64,
    /// Overrides the γ stored with each synthetic record.
    pub gamma: Option<f64>,
    pub replacement: ReplacementMode,
    pub seed: u64,
}

impl Default for MixedSamplerConfig {
    fn default() -> Self {
        MixedSamplerConfig {
            replacement_probability: 0.1,
            epoch_length: None,
            smoothing: 1.0,
            gamma: None,
            replacement: ReplacementMode::ClassMatched,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Real(usize),
    Synthetic(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedItem {
    pub source: Source,
    pub label: SoftLabel,
}

impl MixedItem {
    pub fn is_synthetic(&self) -> bool {
        matches!(self.source, Source::Synthetic(_))
    }
}

/// Stream of training items where each real draw is swapped for a
/// synthetic record with probability `p`.
#[derive(Debug, Clone)]
pub struct MixedSampler<'a> {
    real: &'a [ClassId],
    synthetic: &'a [SyntheticSample],
    by_class: Vec<Vec<usize>>,
    num_classes: usize,
    cfg: MixedSamplerConfig,
}

impl<'a> MixedSampler<'a> {
    /// Fails fast when `p > 0` and some real class has no synthetic record
    /// to stand in for it.
    pub fn new(
        real: &'a [ClassId],
        synthetic: &'a [SyntheticSample],
        num_classes: usize,
        cfg: MixedSamplerConfig,
    ) -> Result<Self> {
        let p = cfg.replacement_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("replacement probability {p} outside [0, 1]")));
        }
        if real.is_empty() {
            return Err(Error::invalid("real training set is empty"));
        }
        if cfg.epoch_length == Some(0) {
            return Err(Error::invalid("epoch length must be at least 1"));
        }
        smooth_label(&SoftLabel::one_hot(ClassId::from_zero_based(0), num_classes)?, cfg.smoothing)?;
        let mut by_class = vec![Vec::new(); num_classes];
        for c in real {
            c.check(num_classes)?;
        }
        for (i, s) in synthetic.iter().enumerate() {
            by_class[s.target_class.check(num_classes)?.zero_based()].push(i);
        }
        if p > 0.0 {
            if synthetic.is_empty() {
                return Err(Error::state("replacement probability is positive but the synthetic set is empty"));
            }
            if cfg.replacement == ReplacementMode::ClassMatched {
                if let Some(c) = real.iter().find(|c| by_class[c.zero_based()].is_empty()) {
                    return Err(Error::state(format!("no synthetic record for class {c}")));
                }
            }
        }
        Ok(MixedSampler {
            real,
            synthetic,
            by_class,
            num_classes,
            cfg,
        })
    }

    pub fn config(&self) -> &MixedSamplerConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn real_len(&self) -> usize {
        self.real.len()
    }

    pub fn synthetic_len(&self) -> usize {
        self.synthetic.len()
    }

    fn real_label(&self, class: ClassId) -> Result<SoftLabel> {
        smooth_label(&SoftLabel::one_hot(class, self.num_classes)?, self.cfg.smoothing)
    }

    /// Label of a synthetic record under the sampler's γ and smoothing.
    pub fn synthetic_label(&self, record: &SyntheticSample) -> Result<SoftLabel> {
        let gamma = self.cfg.gamma.unwrap_or(record.gamma);
        let label = soft_label(
            record.target_class,
            record.reference_class,
            record.strength.unwrap_or(1.0),
            gamma,
            self.num_classes,
        )?;
        smooth_label(&label, self.cfg.smoothing)
    }

    fn resolve(&self, real_index: usize, rng: &mut Rng) -> Result<MixedItem> {
        let class = self.real[real_index];
        let p = self.cfg.replacement_probability;
        if p > 0.0 && rng.random_bool(p) {
            let pool: &[usize] = match self.cfg.replacement {
                ReplacementMode::ClassMatched => &self.by_class[class.zero_based()],
                ReplacementMode::Pool => &[],
            };
            let pick = if pool.is_empty() {
                rng.random_range(0..self.synthetic.len())
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            return Ok(MixedItem {
                source: Source::Synthetic(pick),
                label: self.synthetic_label(&self.synthetic[pick])?,
            });
        }
        Ok(MixedItem {
            source: Source::Real(real_index),
            label: self.real_label(class)?,
        })
    }

    /// `size` items from uniformly drawn real positions.
    pub fn sample_batch(&self, size: usize, rng: &mut Rng) -> Result<Vec<MixedItem>> {
        (0..size)
            .map(|_| {
                let i = rng.random_range(0..self.real.len());
                self.resolve(i, rng)
            })
            .collect()
    }

    /// One epoch: shuffled passes over the real set truncated to the epoch
    /// length, with replacement applied item by item. Deterministic in
    /// `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Result<Vec<MixedItem>> {
        let len = self.cfg.epoch_length.unwrap_or(self.real.len());
        let mut rng = rng::stream(self.cfg.seed, Stream::Batches, epoch as u64);
        let mut order = Vec::with_capacity(len);
        while order.len() < len {
            let mut pass: Vec<usize> = (0..self.real.len()).collect();
            rand::seq::SliceRandom::shuffle(pass.as_mut_slice(), &mut rng);
            order.extend(pass);
        }
        order.truncate(len);
        order.into_iter().map(|i| self.resolve(i, &mut rng)).collect()
    }
}
