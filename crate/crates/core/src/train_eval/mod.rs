mod classifier;
mod fid;
mod metrics;
mod train;

pub use classifier::{
    load_classifier, save_classifier, soft_cross_entropy, Classifier, MlpClassifier, MlpConfig, TrainableClassifier,
};
pub use fid::{fid, fid_f32};
pub use metrics::{
    evaluate_accuracy, group_accuracy, predict, shot_band_accuracy, Band, GroupAccuracy, GroupSpec, MetricsReport,
};
pub use train::{train_classifier, BatchAugment, MixedStream, TrainConfig, TrainHistory, TrainStream};
