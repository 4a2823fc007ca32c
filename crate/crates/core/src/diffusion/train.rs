use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::rng::Rng;

/// Noise predictor `ε_θ(x_t, c, t)` over row-major batches.
pub trait Denoiser: Sync {
    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;

    /// Predicted noise, same shape as `x_t`. `t` holds one training step per row.
    fn predict(&self, x_t: ArrayView2<f32>, t: &[usize], cond: ArrayView2<f32>) -> Array2<f32>;
}

pub trait TrainableDenoiser: Denoiser + Parameterized {
    /// Squared-error loss `mean_b ‖target_b − ε_θ(x_t, c, t)_b‖²`. Accumulates
    /// parameter gradients and returns the loss with `∂loss/∂cond`.
    fn mse_backward(
        &mut self,
        x_t: ArrayView2<f32>,
        t: &[usize],
        cond: ArrayView2<f32>,
        target: ArrayView2<f32>,
    ) -> (f64, Array2<f32>);
}

/// Clean samples with their condition vectors, one row each.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Array2<f32>,
    pub cond: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    /// Gradient of the loss with respect to each row's condition; zero on
    /// rows whose condition was dropped.
    pub cond_grad: Array2<f32>,
    pub dropped: Vec<bool>,
}

/// One noise-prediction step: draw `t ~ U{1..T}` and `ε ~ N(0, I)` per row,
/// noise the batch, and backpropagate the squared error. Rows have their
/// condition replaced by the null (zero) vector with probability
/// `cond_dropout`, which is what classifier-free guidance samples against.
/// Only parameters marked trainable receive gradient; the caller steps the
/// optimizer.
pub fn train_step<M: TrainableDenoiser + ?Sized>(
    model: &mut M,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    cond_dropout: f64,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let rows = batch.x0.nrows();
    if rows == 0 {
        return Err(Error::invalid("training batch is empty"));
    }
    if batch.cond.nrows() != rows {
        return Err(Error::invalid(format!(
            "batch has {rows} samples but {} conditions",
            batch.cond.nrows()
        )));
    }
    if !(0.0..=1.0).contains(&cond_dropout) {
        return Err(Error::invalid(format!("condition dropout {cond_dropout} outside [0, 1]")));
    }
    let total = sched.train_steps();
    let dim = batch.x0.ncols();
    let mut t = Vec::with_capacity(rows);
    let mut eps = Array2::<f32>::zeros((rows, dim));
    let mut x_t = Array2::<f32>::zeros((rows, dim));
    let mut cond = batch.cond.clone();
    let mut dropped = Vec::with_capacity(rows);
    for (r, mut noise) in eps.axis_iter_mut(Axis(0)).enumerate() {
        let step = rng.random_range(1..=total);
        noise.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        });
        let ab = sched.alpha_bar(step);
        let (signal, spread) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x_t.row_mut(r)
            .assign(&(&batch.x0.row(r) * signal + &noise * spread));
        let drop = cond_dropout > 0.0 && rng.random_bool(cond_dropout);
        if drop {
            cond.row_mut(r).fill(0.0);
        }
        t.push(step);
        dropped.push(drop);
    }
    model.zero_grad();
    let (loss, mut cond_grad) = model.mse_backward(x_t.view(), &t, cond.view(), eps.view());
    for (r, &d) in dropped.iter().enumerate() {
        if d {
            cond_grad.row_mut(r).fill(0.0);
        }
    }
    Ok(StepOutcome {
        loss,
        cond_grad,
        dropped,
    })
}
