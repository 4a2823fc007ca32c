use ndarray::{Array, Array2, ArrayView, ArrayView2, Dimension, ShapeBuilder, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{forward_noise, Denoiser, NoiseSchedule, Scalar};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Stochastic DDPM posterior sampling on the inference grid.
    Ancestral,
    /// Deterministic second-order multistep solver of the probability-flow
    /// ODE in data-prediction form (DPM-Solver++ 2M).
    HighOrderOde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub solver: Solver,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            guidance_scale: 7.5,
            solver: Solver::HighOrderOde,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one inference step"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "guidance scale {} must be finite and nonnegative",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Inference step `⌊s·T⌋` at which a reference enters the reverse process.
pub fn insertion_step(strength: f64, infer_steps: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!("strength {strength} outside [0, 1]")));
    }
    // The epsilon absorbs binary representation error (0.29 * 100 = 28.999…).
    Ok(((strength * infer_steps as f64) + 1e-9).floor() as usize)
}

/// Noises `x_ref` to the inference step selected by `strength`. Returns the
/// noised image and the step to resume denoising from; at strength 0 the
/// reference comes back untouched with step 0.
pub fn insert_reference<A: Scalar, D: Dimension>(
    x_ref: ArrayView<A, D>,
    strength: f64,
    eps: ArrayView<A, D>,
    sched: &NoiseSchedule,
    infer_steps: usize,
) -> Result<(Array<A, D>, usize)> {
    let k = insertion_step(strength, infer_steps)?;
    if x_ref.shape() != eps.shape() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match image shape {:?}",
            eps.shape(),
            x_ref.shape()
        )));
    }
    if k == 0 {
        return Ok((x_ref.to_owned(), 0));
    }
    let grid = sched.inference_timesteps(infer_steps)?;
    Ok((forward_noise(x_ref, grid[k], eps, sched)?, k))
}

fn guided(
    model: &dyn Denoiser,
    x: ArrayView2<f32>,
    t: &[usize],
    cond: ArrayView2<f32>,
    uncond: Option<ArrayView2<f32>>,
    scale: f32,
) -> Array2<f32> {
    let eps_c = model.predict(x, t, cond);
    match uncond {
        None => eps_c,
        Some(u) => {
            let mut eps = model.predict(x, t, u);
            Zip::from(&mut eps)
                .and(&eps_c)
                .for_each(|e_u, &e_c| *e_u += scale * (e_c - *e_u));
            eps
        }
    }
}

/// Runs the reverse process from inference step `t_start` down to 0 with
/// guided noise `ε_u + w·(ε_c − ε_u)`. Without `uncond` the conditional
/// prediction is used as is. The result is a pure function of the inputs
/// and `cfg.seed`.
pub fn denoise_from(
    x_start: ArrayView2<f32>,
    t_start: usize,
    cond: ArrayView2<f32>,
    uncond: Option<ArrayView2<f32>>,
    model: &dyn Denoiser,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Array2<f32>> {
    cfg.validate()?;
    if t_start > cfg.steps {
        return Err(Error::invalid(format!(
            "start step {t_start} outside [0, {}]",
            cfg.steps
        )));
    }
    if cond.nrows() != x_start.nrows() || uncond.is_some_and(|u| u.nrows() != x_start.nrows()) {
        return Err(Error::invalid("one condition row is required per sample"));
    }
    let mut x = x_start.to_owned();
    if t_start == 0 {
        return Ok(x);
    }
    let grid = sched.inference_timesteps(cfg.steps)?;
    let scale = cfg.guidance_scale as f32;
    let rows = x.nrows();
    let mut rng = rng::stream(cfg.seed, Stream::Sample, 0);
    let mut previous: Option<(Array2<f32>, f64)> = None;

    for k in (1..=t_start).rev() {
        let (t, s) = (grid[k], grid[k - 1]);
        let steps = vec![t; rows];
        let eps = guided(model, x.view(), &steps, cond, uncond, scale);
        let (ab_t, ab_s) = (sched.alpha_bar(t), sched.alpha_bar(s));
        let (alpha_t, sigma_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let x0 = Zip::from(&x)
            .and(&eps)
            .map_collect(|&xv, &e| ((xv as f64 - sigma_t * e as f64) / alpha_t) as f32);

        if s == 0 {
            x = x0;
            break;
        }
        let (alpha_s, sigma_s) = (ab_s.sqrt(), (1.0 - ab_s).sqrt());
        match cfg.solver {
            Solver::Ancestral => {
                let var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s);
                let dir = (1.0 - ab_s - var).max(0.0).sqrt();
                let std = var.max(0.0).sqrt();
                Zip::from(&mut x).and(&x0).and(&eps).for_each(|xv, &x0v, &e| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xv = (alpha_s * x0v as f64 + dir * e as f64 + std * z) as f32;
                });
            }
            Solver::HighOrderOde => {
                let lambda = |a: f64, sg: f64| (a / sg).ln();
                let (lam_t, lam_s) = (lambda(alpha_t, sigma_t), lambda(alpha_s, sigma_s));
                let h = lam_s - lam_t;
                let data = match &previous {
                    Some((prev_x0, prev_lam)) => {
                        let r = (lam_t - prev_lam) / h;
                        let (c0, c1) = ((1.0 + 0.5 / r) as f32, (0.5 / r) as f32);
                        Zip::from(&x0).and(prev_x0).map_collect(|&a, &b| c0 * a - c1 * b)
                    }
                    None => x0.clone(),
                };
                let keep = sigma_s / sigma_t;
                let push = -alpha_s * ((-h).exp() - 1.0);
                Zip::from(&mut x).and(&data).for_each(|xv, &d| {
                    *xv = (keep * *xv as f64 + push * d as f64) as f32;
                });
                previous = Some((x0, lam_t));
            }
        }
    }
    Ok(x)
}

/// Draws a standard normal array for insertion noise.
pub(crate) fn normal_array<Sh: ShapeBuilder>(shape: Sh, rng: &mut Rng) -> Array<f32, Sh::Dim> {
    Array::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use ndarray::{array, Array1};

    /// Exact noise predictor for data distributed as N(μ, σ0²·I).
    struct GaussianOracle {
        mean: Vec<f32>,
        var: f64,
        sched: NoiseSchedule,
    }

    impl Denoiser for GaussianOracle {
        fn data_dim(&self) -> usize {
            self.mean.len()
        }
        fn cond_dim(&self) -> usize {
            1
        }
        fn predict(&self, x: ArrayView2<f32>, t: &[usize], _: ArrayView2<f32>) -> Array2<f32> {
            let mut out = x.to_owned();
            for (r, &step) in t.iter().enumerate() {
                let ab = self.sched.alpha_bar(step);
                let denom = ab * self.var + 1.0 - ab;
                for c in 0..out.ncols() {
                    let centered = x[[r, c]] as f64 - ab.sqrt() * self.mean[c] as f64;
                    out[[r, c]] = ((1.0 - ab).sqrt() * centered / denom) as f32;
                }
            }
            out
        }
    }

    #[test]
    fn insertion_step_examples() {
        assert_eq!(insertion_step(0.7, 25).unwrap(), 17);
        assert_eq!(insertion_step(1.0, 25).unwrap(), 25);
        assert_eq!(insertion_step(0.0, 25).unwrap(), 0);
        assert_eq!(insertion_step(0.29, 100).unwrap(), 29);
        assert!(insertion_step(-0.1, 25).is_err());
        assert!(insertion_step(1.01, 25).is_err());
        assert!(insertion_step(f64::NAN, 25).is_err());
    }

    #[test]
    fn full_strength_keeps_some_reference_signal() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
        let x = array![1.0f64, -1.0];
        let (out, k) = insert_reference(x.view(), 1.0, Array1::zeros(2).view(), &sched, 25).unwrap();
        assert_eq!(k, 25);
        assert!(sched.alpha_bar(1000) > 0.0);
        assert!(out[0] > 0.0 && out[1] < 0.0);
    }

    #[test]
    fn zero_start_is_identity() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
        let model = GaussianOracle {
            mean: vec![0.0, 0.0],
            var: 1.0,
            sched: sched.clone(),
        };
        let x = array![[0.25f32, -3.0]];
        let c = Array2::zeros((1, 1));
        let out = denoise_from(x.view(), 0, c.view(), None, &model, &SamplerConfig::default(), &sched).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn unit_guidance_with_equal_conditions_matches_unguided() {
        let sched = NoiseSchedule::build(ScheduleKind::Cosine, 200).unwrap();
        let model = GaussianOracle {
            mean: vec![1.0, -2.0],
            var: 0.5,
            sched: sched.clone(),
        };
        let mut rng = rng::seeded(4);
        let x = normal_array((8, 2), &mut rng);
        let c = Array2::from_elem((8, 1), 0.3f32);
        for solver in [Solver::Ancestral, Solver::HighOrderOde] {
            let cfg = SamplerConfig {
                steps: 20,
                guidance_scale: 1.0,
                solver,
                seed: 11,
            };
            let guided = denoise_from(x.view(), 20, c.view(), Some(c.view()), &model, &cfg, &sched).unwrap();
            let plain = denoise_from(x.view(), 20, c.view(), None, &model, &cfg, &sched).unwrap();
            assert_eq!(guided, plain);
        }
    }

    #[test]
    fn rejects_out_of_range_start() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
        let model = GaussianOracle {
            mean: vec![0.0],
            var: 1.0,
            sched: sched.clone(),
        };
        let x = array![[0.0f32]];
        let cfg = SamplerConfig {
            steps: 10,
            ..SamplerConfig::default()
        };
        assert!(denoise_from(x.view(), 11, x.view(), None, &model, &cfg, &sched).is_err());
    }

    fn moments(samples: &Array2<f32>, col: usize) -> (f64, f64) {
        let n = samples.nrows() as f64;
        let mean = samples.column(col).iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = samples
            .column(col)
            .iter()
            .map(|v| (*v as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn both_solvers_recover_a_gaussian_target() {
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
        let model = GaussianOracle {
            mean: vec![2.0, -1.0],
            var: 0.25,
            sched: sched.clone(),
        };
        let mut rng = rng::seeded(5);
        let noise = normal_array((4000, 2), &mut rng);
        let c = Array2::zeros((4000, 1));
        let mut results = Vec::new();
        for solver in [Solver::Ancestral, Solver::HighOrderOde] {
            let cfg = SamplerConfig {
                steps: 200,
                guidance_scale: 1.0,
                solver,
                seed: 3,
            };
            let out = denoise_from(noise.view(), 200, c.view(), None, &model, &cfg, &sched).unwrap();
            let (m0, v0) = moments(&out, 0);
            let (m1, v1) = moments(&out, 1);
            assert!((m0 - 2.0).abs() < 0.05, "{solver:?} mean {m0}");
            assert!((m1 + 1.0).abs() < 0.05, "{solver:?} mean {m1}");
            assert!((v0 - 0.25).abs() < 0.03, "{solver:?} var {v0}");
            assert!((v1 - 0.25).abs() < 0.03, "{solver:?} var {v1}");
            results.push((m0, v0));
        }
        assert!((results[0].0 - results[1].0).abs() < 0.05);
        assert!((results[0].1 - results[1].1).abs() < 0.03);
    }

    #[test]
    fn ode_solver_is_accurate_with_few_steps() {
        // Deterministic map: coarse grids converge to the fine-grid solution.
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
        let model = GaussianOracle {
            mean: vec![1.5],
            var: 0.1,
            sched: sched.clone(),
        };
        let mut rng = rng::seeded(8);
        let noise = normal_array((64, 1), &mut rng);
        let c = Array2::zeros((64, 1));
        let run = |steps| {
            let cfg = SamplerConfig {
                steps,
                guidance_scale: 1.0,
                solver: Solver::HighOrderOde,
                seed: 0,
            };
            denoise_from(noise.view(), steps, c.view(), None, &model, &cfg, &sched).unwrap()
        };
        let fine = run(1000);
        let errors: Vec<f32> = [10usize, 25, 50, 100]
            .into_iter()
            .map(|st| (&run(st) - &fine).mapv(f32::abs).fold(0.0f32, |a, b| a.max(*b)))
            .collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        assert!(errors[2] < 0.02, "{errors:?}");
    }
}
