//! Small residual MLP noise predictor for desk-scale runs.
//!
//! The network embeds the step sinusoidally and injects the condition vector
//! through a conditioning block per layer. With a single context token,
//! cross-attention reduces to a value projection of the condition followed
//! by an output projection, so each block's `query`, `context` and `out`
//! matrices play the role of a U-Net's attention weights: they are the
//! targets low-rank adapters attach to.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Denoiser, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Linear, LinearCache, Param, Parameterized};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub blocks: usize,
    /// Training discretization the step embedding is normalized against.
    pub train_steps: usize,
    pub seed: u64,
}

impl ToyDenoiserConfig {
    pub fn new(data_dim: usize, train_steps: usize, seed: u64) -> Self {
        ToyDenoiserConfig {
            data_dim,
            cond_dim: 16,
            hidden: 64,
            time_dim: 16,
            blocks: 2,
            train_steps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CondBlock {
    query: Linear,
    context: Linear,
    time: Linear,
    out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    input: Linear,
    time: Linear,
    blocks: Vec<CondBlock>,
    output: Linear,
}

struct BlockCache {
    h_in: Array2<f32>,
    pre: Array2<f32>,
    query: LinearCache,
    context: LinearCache,
    time: LinearCache,
    out: LinearCache,
}

struct ForwardCache {
    input: LinearCache,
    time: LinearCache,
    blocks: Vec<BlockCache>,
    h_final: Array2<f32>,
    output: LinearCache,
}

impl ToyDenoiser {
    pub fn new(config: ToyDenoiserConfig) -> Result<Self> {
        if config.data_dim == 0 || config.cond_dim == 0 || config.hidden == 0 || config.train_steps == 0 {
            return Err(Error::invalid("toy denoiser dimensions must be positive"));
        }
        if config.time_dim == 0 || !config.time_dim.is_multiple_of(2) {
            return Err(Error::invalid("time embedding width must be a positive even number"));
        }
        let mut rng = rng::stream(config.seed, Stream::Init, 0);
        let (d, c, h, e) = (config.data_dim, config.cond_dim, config.hidden, config.time_dim);
        let input = Linear::new(d, h, &mut rng);
        let time = Linear::new(e, h, &mut rng);
        let blocks = (0..config.blocks)
            .map(|_| CondBlock {
                query: Linear::new(h, h, &mut rng),
                context: Linear::new(c, h, &mut rng),
                time: Linear::new(e, h, &mut rng),
                out: Linear::new(h, h, &mut rng),
            })
            .collect();
        let output = Linear::new(h, d, &mut rng);
        Ok(ToyDenoiser {
            config,
            input,
            time,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    /// Names of the matrices adapters attach to, in visiting order.
    pub fn attention_targets(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|k| {
                ["query", "context", "out"]
                    .into_iter()
                    .map(move |n| format!("blocks.{k}.attn.{n}"))
            })
            .collect()
    }

    pub(crate) fn attention_layers_mut(&mut self) -> Vec<(String, &mut Linear)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{k}.attn.query"), &mut b.query));
            out.push((format!("blocks.{k}.attn.context"), &mut b.context));
            out.push((format!("blocks.{k}.attn.out"), &mut b.out));
        }
        out
    }

    pub(crate) fn attention_layers(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{k}.attn.query"), &b.query));
            out.push((format!("blocks.{k}.attn.context"), &b.context));
            out.push((format!("blocks.{k}.attn.out"), &b.out));
        }
        out
    }

    pub fn has_adapters(&self) -> bool {
        self.attention_layers().iter().any(|(_, l)| l.adapter.is_some())
    }

    /// Removes every adapter, returning the model to its base weights.
    pub fn detach_adapters(&mut self) {
        for (_, layer) in self.attention_layers_mut() {
            layer.adapter = None;
        }
    }

    fn time_embedding(&self, t: &[usize]) -> Array2<f32> {
        let half = self.config.time_dim / 2;
        let scale = 1000.0 / self.config.train_steps as f64;
        Array2::from_shape_fn((t.len(), self.config.time_dim), |(r, c)| {
            let i = c % half;
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t[r] as f64 * scale * freq;
            (if c < half { arg.sin() } else { arg.cos() }) as f32
        })
    }

    fn forward(&self, x: ArrayView2<f32>, t: &[usize], cond: ArrayView2<f32>) -> (Array2<f32>, ForwardCache) {
        let temb = self.time_embedding(t);
        let (a, input) = self.input.forward(x);
        let (b, time) = self.time.forward(temb.view());
        let mut h = a + b;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (q, query) = blk.query.forward(silu(&h).view());
            let (v, context) = blk.context.forward(cond);
            let (u, time) = blk.time.forward(temb.view());
            let pre = q + v + u;
            let (o, out) = blk.out.forward(silu(&pre).view());
            let h_in = std::mem::replace(&mut h, o);
            h += &h_in;
            blocks.push(BlockCache {
                h_in,
                pre,
                query,
                context,
                time,
                out,
            });
        }
        let (y, output) = self.output.forward(silu(&h).view());
        (
            y,
            ForwardCache {
                input,
                time,
                blocks,
                h_final: h,
                output,
            },
        )
    }

    fn backward(&mut self, cache: ForwardCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let ds = self.output.backward(&cache.output, dy);
        let mut dh = silu_backward(&cache.h_final, &ds);
        let mut dcond: Option<Array2<f32>> = None;
        for (blk, bc) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            let dz = blk.out.backward(&bc.out, dh.view());
            let dpre = silu_backward(&bc.pre, &dz);
            blk.time.backward(&bc.time, dpre.view());
            let dc = blk.context.backward(&bc.context, dpre.view());
            dcond = Some(match dcond {
                Some(acc) => acc + dc,
                None => dc,
            });
            let dq = blk.query.backward(&bc.query, dpre.view());
            dh += &silu_backward(&bc.h_in, &dq);
        }
        self.input.backward(&cache.input, dh.view());
        self.time.backward(&cache.time, dh.view());
        dcond.unwrap_or_else(|| Array2::zeros((dy.nrows(), self.config.cond_dim)))
    }
}

impl Denoiser for ToyDenoiser {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn predict(&self, x_t: ArrayView2<f32>, t: &[usize], cond: ArrayView2<f32>) -> Array2<f32> {
        let temb = self.time_embedding(t);
        let mut h = self.input.apply(x_t) + self.time.apply(temb.view());
        for blk in &self.blocks {
            let pre = blk.query.apply(silu(&h).view()) + blk.context.apply(cond) + blk.time.apply(temb.view());
            h += &blk.out.apply(silu(&pre).view());
        }
        self.output.apply(silu(&h).view())
    }
}

impl Parameterized for ToyDenoiser {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.input.visit("input", &mut out);
        self.time.visit("time", &mut out);
        for (k, b) in self.blocks.iter().enumerate() {
            b.query.visit(&format!("blocks.{k}.attn.query"), &mut out);
            b.context.visit(&format!("blocks.{k}.attn.context"), &mut out);
            b.time.visit(&format!("blocks.{k}.time"), &mut out);
            b.out.visit(&format!("blocks.{k}.attn.out"), &mut out);
        }
        self.output.visit("output", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.input.visit_mut("input", &mut out);
        self.time.visit_mut("time", &mut out);
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.query.visit_mut(&format!("blocks.{k}.attn.query"), &mut out);
            b.context.visit_mut(&format!("blocks.{k}.attn.context"), &mut out);
            b.time.visit_mut(&format!("blocks.{k}.time"), &mut out);
            b.out.visit_mut(&format!("blocks.{k}.attn.out"), &mut out);
        }
        self.output.visit_mut("output", &mut out);
        out
    }
}

impl TrainableDenoiser for ToyDenoiser {
    fn mse_backward(
        &mut self,
        x_t: ArrayView2<f32>,
        t: &[usize],
        cond: ArrayView2<f32>,
        target: ArrayView2<f32>,
    ) -> (f64, Array2<f32>) {
        let (pred, cache) = self.forward(x_t, t, cond);
        let rows = pred.nrows() as f64;
        let diff = pred - target;
        let loss = diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / rows;
        let dy = diff * (2.0 / rows as f32);
        let dcond = self.backward(cache, dy.view());
        (loss, dcond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{train_step, NoiseSchedule, ScheduleKind, TrainBatch};
    use crate::nn::{Adam, AdamConfig};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn small(seed: u64) -> ToyDenoiser {
        ToyDenoiser::new(ToyDenoiserConfig {
            data_dim: 3,
            cond_dim: 4,
            hidden: 8,
            time_dim: 4,
            blocks: 2,
            train_steps: 100,
            seed,
        })
        .unwrap()
    }

    fn loss(m: &ToyDenoiser, x: &Array2<f32>, t: &[usize], c: &Array2<f32>, target: &Array2<f32>) -> f64 {
        let p = m.predict(x.view(), t, c.view());
        (p - target).iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / x.nrows() as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = small(1);
        let mut rng = seeded(2);
        for (_, layer) in m.attention_layers_mut() {
            layer.attach("probe", 2, &mut rng).unwrap();
            if let Some(ad) = layer.adapter.as_mut() {
                ad.b.value.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        let x = Array2::from_shape_fn((3, 3), |(r, c)| (r as f32 - c as f32) * 0.4);
        let c = Array2::from_shape_fn((3, 4), |(r, c)| ((r * 4 + c) as f32).sin());
        let target = Array2::from_shape_fn((3, 3), |(r, c)| (r + c) as f32 * 0.1);
        let t = [5usize, 50, 99];

        m.zero_grad();
        let (l0, dcond) = m.mse_backward(x.view(), &t, c.view(), target.view());
        assert!((l0 - loss(&m, &x, &t, &c, &target)).abs() < 1e-5);

        let h = 1e-2f32;
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let grad = m.params().into_iter().find(|(n, _)| *n == name).unwrap().1.grad.clone();
            let idx = (0, grad.ncols() - 1);
            let shift = |m: &ToyDenoiser, delta: f32| {
                let mut m = m.clone();
                m.params_mut().into_iter().find(|(n, _)| *n == name).unwrap().1.value[idx] += delta;
                loss(&m, &x, &t, &c, &target)
            };
            let numeric = (shift(&m, h) - shift(&m, -h)) / (2.0 * h as f64);
            let analytic = grad[idx] as f64;
            assert!(
                (numeric - analytic).abs() < 2e-2 * (1.0 + numeric.abs()),
                "{name}: analytic {analytic} numeric {numeric}"
            );
        }
        for (r, col) in [(0, 0), (2, 3)] {
            let mut cp = c.clone();
            cp[[r, col]] += h;
            let mut cm = c.clone();
            cm[[r, col]] -= h;
            let numeric = (loss(&m, &x, &t, &cp, &target) - loss(&m, &x, &t, &cm, &target)) / (2.0 * h as f64);
            assert!((numeric - dcond[[r, col]] as f64).abs() < 2e-2 * (1.0 + numeric.abs()));
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let m = small(0);
        let x = Array2::zeros((7, 3));
        let c = Array2::zeros((7, 4));
        assert_eq!(m.predict(x.view(), &[1; 7], c.view()).dim(), (7, 3));
    }

    #[test]
    fn rejects_odd_time_width() {
        let mut cfg = ToyDenoiserConfig::new(2, 100, 0);
        cfg.time_dim = 5;
        assert!(ToyDenoiser::new(cfg).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
        let mut model = ToyDenoiser::new(ToyDenoiserConfig::new(2, 100, 7)).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(2e-3));
        let mut rng = seeded(1);
        let x0 = Array2::from_shape_fn((64, 2), |(r, c)| if (r + c) % 2 == 0 { 1.5 } else { -1.5 });
        let batch = TrainBatch {
            x0,
            cond: Array2::zeros((64, 16)),
        };
        let mut losses = Vec::new();
        for _ in 0..200 {
            let out = train_step(&mut model, &batch, &sched, 0.0, &mut rng).unwrap();
            losses.push(out.loss);
            opt.step(model.params_mut());
        }
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "head {head} tail {tail}");
    }
}
