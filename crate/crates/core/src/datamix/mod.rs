//! Label algebra, few-shot and long-tail subset construction, the mixed
//! real/synthetic batch sampler, and the Mixup/CutMix baselines.

mod labels;
mod mixing;
mod sampler;
mod subsets;

pub use labels::{smooth_label, soft_label, SoftLabel};
pub use mixing::{cutmix, cutmix_with_box, mixup, mixup_with, CutBox};
pub use sampler::{MixedItem, MixedSampler, MixedSamplerConfig, ReplacementMode, Source};
pub use subsets::{make_longtail, subsample_fewshot, synthetic_target_counts, LongTailSpec, Shots};
