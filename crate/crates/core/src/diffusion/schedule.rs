use ndarray::{Array, ArrayView, Dimension, NdFloat, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Explicit per-step retention factors.
    Custom,
}

/// Retention factors `α_t` and their running products `ᾱ_t` for the
/// training discretization `t = 1..=T`. Kept in double precision: at
/// `T = 1000` the tail of `ᾱ` underflows single precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                // Endpoints rescaled so that any T covers the same noise range as T = 1000.
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (scale * LINEAR_BETA_START, scale * LINEAR_BETA_END);
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                        (lo + (hi - lo) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Custom => {
                return Err(Error::invalid("custom schedules are built with from_alphas"))
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(0.0, MAX_BETA))
                    .collect()
            }
        };
        Self::from_parts(kind, betas.iter().map(|b| 1.0 - b).collect())
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::invalid(format!("retention factor {a} outside (0, 1)")));
        }
        Self::from_parts(ScheduleKind::Custom, alphas)
    }

    fn from_parts(kind: ScheduleKind, alphas: Vec<f64>) -> Result<Self> {
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn train_steps(&self) -> usize {
        self.alphas.len()
    }

    /// `α_t`, `t ∈ 1..=T`.
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `ᾱ_t` for `t ∈ 1..=T`; element 0 is `α_1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` with the convention `ᾱ_0 = 1` (clean data).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Training timesteps visited by a `steps`-step sampler: an evenly spaced
    /// subsequence `τ_0 = 0 < τ_1 < … < τ_steps = T`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.train_steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!(
                "inference steps {steps} must lie in [1, {total}]"
            )));
        }
        Ok((0..=steps).map(|k| k * total / steps).collect())
    }
}

/// Element types the diffusion math runs in.
pub trait Scalar: NdFloat {
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Closed-form marginal `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise<A: Scalar, D: Dimension>(
    x0: ArrayView<A, D>,
    t: usize,
    eps: ArrayView<A, D>,
    sched: &NoiseSchedule,
) -> Result<Array<A, D>> {
    if x0.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    if t == 0 || t > sched.train_steps() {
        return Err(Error::invalid(format!(
            "step {t} outside [1, {}]",
            sched.train_steps()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (A::from_f64(ab.sqrt()), A::from_f64((1.0 - ab).sqrt()));
    Ok(Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| signal * x + noise * e))
}
