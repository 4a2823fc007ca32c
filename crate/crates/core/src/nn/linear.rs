use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Uniform};

use super::{LowRankAdapter, Param};
use crate::error::Result;
use crate::rng::Rng;

/// Dense layer `y = x·Wᵀ + b (+ (x·B)·Aᵀ when adapted)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub adapter: Option<LowRankAdapter>,
}

pub struct LinearCache {
    input: Array2<f32>,
    projected: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / inputs as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = Array2::from_shape_fn((outputs, inputs), |_| dist.sample(rng));
        Linear {
            weight: Param::new(w),
            bias: Param::zeros(1, outputs),
            adapter: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn attach(&mut self, target: &str, rank: usize, rng: &mut Rng) -> Result<()> {
        let adapter = LowRankAdapter::new(target, self.outputs(), self.inputs(), rank, rng)?;
        self.adapter = Some(adapter);
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> (Array2<f32>, LinearCache) {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value.row(0);
        let projected = self.adapter.as_ref().map(|ad| {
            let p = x.dot(&ad.b.value);
            y += &p.dot(&ad.a.value.t());
            p
        });
        (
            y,
            LinearCache {
                input: x.to_owned(),
                projected,
            },
        )
    }

    pub fn apply(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value.row(0);
        if let Some(ad) = &self.adapter {
            y += &x.dot(&ad.b.value).dot(&ad.a.value.t());
        }
        y
    }

    /// Accumulates gradients into trainable parameters and returns `∂L/∂x`.
    pub fn backward(&mut self, cache: &LinearCache, dy: ArrayView2<f32>) -> Array2<f32> {
        if self.weight.trainable {
            self.weight.grad += &dy.t().dot(&cache.input);
        }
        if self.bias.trainable {
            self.bias.grad.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
        let mut dx = dy.dot(&self.weight.value);
        if let Some(ad) = self.adapter.as_mut() {
            let projected = cache.projected.as_ref().expect("adapter attached after forward");
            let dp = dy.dot(&ad.a.value);
            if ad.a.trainable {
                ad.a.grad += &dy.t().dot(projected);
            }
            if ad.b.trainable {
                ad.b.grad += &cache.input.t().dot(&dp);
            }
            dx += &dp.dot(&ad.b.value.t());
        }
        dx
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
        if let Some(ad) = &self.adapter {
            out.push((format!("{prefix}.lora_a"), &ad.a));
            out.push((format!("{prefix}.lora_b"), &ad.b));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
        if let Some(ad) = &mut self.adapter {
            out.push((format!("{prefix}.lora_a"), &mut ad.a));
            out.push((format!("{prefix}.lora_b"), &mut ad.b));
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient through SiLU given the pre-activation.
pub fn silu_backward(pre: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &x| {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    });
    out
}
