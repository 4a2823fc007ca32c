mod clean;
mod generate;
mod manifest;
mod policy;
mod spec;

pub use clean::{clean, clean_scores, clip_confidence, score_records, CleanMode, ContrastiveScorer, ToyScorer};
pub use generate::{
    synthesize_dataset, synthesize_in_memory, synthesize_one, translate, Generator, Synthesized, TargetPlan,
};
pub use manifest::{DatasetManifest, ManifestHeader, SyntheticSample, MANIFEST_VERSION};
pub use policy::{select_reference, ReferenceKind, ReferencePolicy, ReferencePools};
pub use spec::{Strategy, TranslationSpec};
