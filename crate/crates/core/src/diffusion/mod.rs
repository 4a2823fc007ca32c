//! Backend-agnostic diffusion machinery: noise schedules, forward noising,
//! strength-controlled reference insertion, guided reverse sampling and the
//! noise-prediction training step. A small conditional denoiser ships in
//! [`toy`] so the whole pipeline runs on a laptop.

pub(crate) mod sampler;
mod schedule;
mod train;
pub mod toy;

pub use sampler::{denoise_from, insert_reference, insertion_step, SamplerConfig, Solver};
pub use schedule::{forward_noise, NoiseSchedule, Scalar, ScheduleKind};
pub use train::{train_step, Denoiser, StepOutcome, TrainBatch, TrainableDenoiser};
pub use toy::{ToyDenoiser, ToyDenoiserConfig};
