pub mod class;
pub mod datamix;
pub mod diffusion;
pub mod error;
pub mod fingerprint;
pub mod io;
pub mod nn;
pub mod personalization;
pub mod rng;
pub mod synthesis;
pub mod toy;
pub mod train_eval;

pub use class::ClassId;

pub use datamix::{LongTailSpec, MixedSamplerConfig, SoftLabel};
pub use diffusion::{NoiseSchedule, SamplerConfig, ScheduleKind, Solver};
pub use error::{Error, Result};
pub use personalization::{FinetuneConfig, FinetuneStrategy, IdentifierTable, LowRankAdapter};
pub use synthesis::{DatasetManifest, ReferencePolicy, SyntheticSample, TranslationSpec};
pub use train_eval::{GroupSpec, MetricsReport};



