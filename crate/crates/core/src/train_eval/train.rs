use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::TrainableClassifier;
use crate::datamix::{cutmix, mixup, MixedSampler, Source, SoftLabel};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::nn::{Adam, AdamConfig};
use crate::rng::{self, Stream};

/// Source of labeled training items, one list per epoch.
pub trait TrainStream {
    fn epoch(&self, epoch: usize) -> Result<Vec<(Array1<f32>, SoftLabel)>>;
}

/// A fixed list, replayed unchanged every epoch.
impl TrainStream for Vec<(Array1<f32>, SoftLabel)> {
    fn epoch(&self, _epoch: usize) -> Result<Vec<(Array1<f32>, SoftLabel)>> {
        Ok(self.clone())
    }
}

/// Resolves a mixed sampler's items against real and synthetic images.
pub struct MixedStream<'a> {
    sampler: MixedSampler<'a>,
    real: &'a Dataset,
    synthetic: &'a [Array1<f32>],
}

impl<'a> MixedStream<'a> {
    pub fn new(sampler: MixedSampler<'a>, real: &'a Dataset, synthetic: &'a [Array1<f32>]) -> Result<Self> {
        if sampler.real_len() != real.len() || sampler.synthetic_len() != synthetic.len() {
            return Err(Error::invalid("sampler and image sets disagree in size"));
        }
        if let Some(x) = synthetic.iter().find(|x| x.len() != real.dim()) {
            return Err(Error::invalid(format!(
                "synthetic image has {} values, real images have {}",
                x.len(),
                real.dim()
            )));
        }
        Ok(MixedStream {
            sampler,
            real,
            synthetic,
        })
    }
}

impl TrainStream for MixedStream<'_> {
    fn epoch(&self, epoch: usize) -> Result<Vec<(Array1<f32>, SoftLabel)>> {
        Ok(self
            .sampler
            .epoch(epoch)?
            .into_iter()
            .map(|item| {
                let x = match item.source {
                    Source::Real(i) => self.real.examples[i].image.clone(),
                    Source::Synthetic(i) => self.synthetic[i].clone(),
                };
                (x, item.label)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchAugment {
    Mixup { alpha: f64 },
    Cutmix { alpha: f64, shape: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub batch_augment: Option<BatchAugment>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
            batch_augment: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

pub fn train_classifier<M: TrainableClassifier>(
    stream: &dyn TrainStream,
    model: &mut M,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let items = stream.epoch(epoch)?;
        if items.is_empty() {
            return Err(Error::invalid("training stream is empty"));
        }
        let mut rng = rng::stream(cfg.seed, Stream::Augment, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in items.chunks(cfg.batch_size) {
            let (mut xs, mut ys): (Vec<Array1<f32>>, Vec<SoftLabel>) = chunk.iter().cloned().unzip();
            match cfg.batch_augment {
                Some(BatchAugment::Mixup { alpha }) => {
                    mixup(&mut xs, &mut ys, alpha, &mut rng)?;
                }
                Some(BatchAugment::Cutmix { alpha, shape }) => {
                    cutmix(&mut xs, &mut ys, shape, alpha, &mut rng)?;
                }
                None => {}
            }
            let dim = xs[0].len();
            let mut x = Array2::zeros((xs.len(), dim));
            for (mut row, v) in x.axis_iter_mut(Axis(0)).zip(&xs) {
                row.assign(v);
            }
            model.zero_grad();
            total += model.loss_backward(x.view(), &ys)?;
            adam.step(model.params_mut());
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        history.epoch_loss.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class::ClassId;
    use crate::datamix::MixedSamplerConfig;
    use crate::io::Example;
    use crate::train_eval::{evaluate_accuracy, MlpClassifier, MlpConfig};
    use ndarray::array;

    fn clf(seed: u64) -> MlpClassifier {
        MlpClassifier::new(MlpConfig {
            input_dim: 2,
            hidden: 8,
            num_classes: 2,
            seed,
        })
        .unwrap()
    }

    fn points() -> Dataset {
        let xs = [[-1.0f32, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let examples = xs
            .iter()
            .enumerate()
            .map(|(i, x)| Example {
                image_ref: format!("{i}"),
                class: ClassId::from_zero_based(usize::from(x[0] > 0.0)),
                image: array![x[0], x[1]],
            })
            .collect();
        Dataset::new(vec![2], 2, examples).unwrap()
    }

    #[test]
    fn loss_decreases_on_separable_points() {
        let d = points();
        let stream: Vec<_> = d
            .examples
            .iter()
            .map(|e| (e.image.clone(), SoftLabel::one_hot(e.class, 2).unwrap()))
            .collect();
        let mut m = clf(0);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 4,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let h = train_classifier(&stream, &mut m, &cfg).unwrap();
        assert!(h.epoch_loss.last().unwrap() < &h.epoch_loss[0]);
        assert_eq!(evaluate_accuracy(&m, &d).unwrap(), 1.0);
        let empty: Vec<(Array1<f32>, SoftLabel)> = Vec::new();
        assert!(train_classifier(&empty, &mut clf(0), &cfg).is_err());
    }

    #[test]
    fn p_zero_matches_real_only_training() {
        let d = points();
        let classes = d.classes();
        let syn = vec![];
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let s = MixedSampler::new(
                &classes,
                &syn,
                2,
                MixedSamplerConfig {
                    replacement_probability: 0.0,
                    seed: 4,
                    ..MixedSamplerConfig::default()
                },
            )
            .unwrap();
            let stream = MixedStream::new(s, &d, &[]).unwrap();
            let mut m = clf(1);
            (train_classifier(&stream, &mut m, &cfg).unwrap(), m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn mixup_and_cutmix_run() {
        let d = points();
        let stream: Vec<_> = d
            .examples
            .iter()
            .map(|e| (e.image.clone(), SoftLabel::one_hot(e.class, 2).unwrap()))
            .collect();
        for aug in [
            BatchAugment::Mixup { alpha: 0.2 },
            BatchAugment::Cutmix {
                alpha: 1.0,
                shape: [1, 1, 2],
            },
        ] {
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 4,
                batch_augment: Some(aug),
                ..TrainConfig::default()
            };
            let h = train_classifier(&stream, &mut clf(2), &cfg).unwrap();
            assert!(h.epoch_loss.iter().all(|l| l.is_finite()));
        }
    }
}
