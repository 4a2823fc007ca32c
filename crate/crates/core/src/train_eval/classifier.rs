use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datamix::SoftLabel;
use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Linear, Param, Parameterized};
use crate::personalization::Container;
use crate::rng::{self, Stream};

pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// One row of `num_classes` logits per input row.
    fn predict_logits(&self, images: ArrayView2<f32>) -> Array2<f32>;
}

pub trait TrainableClassifier: Classifier + Parameterized {
    /// Mean soft cross-entropy over the batch. Gradients are accumulated
    /// into the parameters.
    fn loss_backward(&mut self, images: ArrayView2<f32>, labels: &[SoftLabel]) -> Result<f64>;
}

fn log_softmax(logits: ArrayView1<f32>) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// `−Σ_c label_c · log softmax(logits)_c`.
pub fn soft_cross_entropy(logits: ArrayView1<f32>, label: &SoftLabel) -> Result<f64> {
    if logits.len() != label.num_classes() {
        return Err(Error::invalid(format!(
            "{} logits for a {}-class label",
            logits.len(),
            label.num_classes()
        )));
    }
    Ok(-log_softmax(logits)
        .iter()
        .zip(label.probs())
        .filter(|(_, &p)| p > 0.0)
        .map(|(l, p)| p * l)
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub seed: u64,
}

/// Two-layer network: linear, SiLU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    config: MlpConfig,
    hidden: Linear,
    output: Linear,
}

impl MlpClassifier {
    pub fn new(config: MlpConfig) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.num_classes < 2 {
            return Err(Error::invalid(format!("unusable classifier shape {config:?}")));
        }
        let mut rng = rng::stream(config.seed, Stream::Init, 0);
        Ok(MlpClassifier {
            config,
            hidden: Linear::new(config.input_dim, config.hidden, &mut rng),
            output: Linear::new(config.hidden, config.num_classes, &mut rng),
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }
}

impl Classifier for MlpClassifier {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict_logits(&self, images: ArrayView2<f32>) -> Array2<f32> {
        self.output.apply(silu(&self.hidden.apply(images)).view())
    }
}

impl Parameterized for MlpClassifier {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.hidden.visit("hidden", &mut out);
        self.output.visit("output", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.hidden.visit_mut("hidden", &mut out);
        self.output.visit_mut("output", &mut out);
        out
    }
}

impl TrainableClassifier for MlpClassifier {
    fn loss_backward(&mut self, images: ArrayView2<f32>, labels: &[SoftLabel]) -> Result<f64> {
        if images.nrows() != labels.len() || images.nrows() == 0 {
            return Err(Error::invalid("batch needs one label per image and at least one image"));
        }
        if images.ncols() != self.config.input_dim {
            return Err(Error::invalid(format!(
                "images have {} values, classifier expects {}",
                images.ncols(),
                self.config.input_dim
            )));
        }
        let (pre, c1) = self.hidden.forward(images);
        let act = silu(&pre);
        let (logits, c2) = self.output.forward(act.view());
        let scale = 1.0 / labels.len() as f64;
        let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for ((row, label), mut d) in logits.axis_iter(Axis(0)).zip(labels).zip(dlogits.axis_iter_mut(Axis(0))) {
            loss += soft_cross_entropy(row, label)?;
            for ((g, lp), p) in d.iter_mut().zip(log_softmax(row)).zip(label.probs()) {
                *g = ((lp.exp() - p) * scale) as f32;
            }
        }
        let dact = self.output.backward(&c2, dlogits.view());
        let dpre = silu_backward(&pre, &dact);
        self.hidden.backward(&c1, dpre.view());
        Ok(loss * scale)
    }
}

const KIND: &str = "mlp-classifier";

pub fn save_classifier(model: &MlpClassifier, path: &Path) -> Result<String> {
    let meta = serde_json::to_value(model.config).map_err(|e| Error::format(KIND, e))?;
    let mut c = Container::new(KIND, meta);
    for (name, p) in model.params() {
        c.push(&name, p.value.clone());
    }
    c.save(path)
}

pub fn load_classifier(path: &Path) -> Result<MlpClassifier> {
    let c = Container::load(path)?.expect_kind(KIND)?;
    let config: MlpConfig = serde_json::from_value(c.meta.clone()).map_err(|e| Error::format(KIND, e))?;
    let mut model = MlpClassifier::new(config)?;
    for (name, p) in model.params_mut() {
        let stored = c.require(&name)?;
        if stored.dim() != p.value.dim() {
            return Err(Error::format(KIND, format!("{name} has shape {:?}", stored.dim())));
        }
        p.value.assign(stored);
    }
    Ok(model)
}
