//! Cross-domain compositional mixing for LiDAR semantic segmentation.
//!
//! Patches of semantically labeled points are exchanged between a labeled
//! source domain and a pseudo-labeled target domain, and a pointwise network
//! is adapted on the mixed clouds with a teacher-student scheme.

pub mod error;
pub mod kitti;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod toy;
pub mod trainer;
pub mod types;

pub use error::{Error, ErrorClass, Result};
pub use metrics::{ConfusionMatrix, IouReport};
pub use mixing::{
    global_augment_r, local_augment_h, mix_s_to_t, mix_t_to_s, GlobalAugConfig, Interval, LocalAugConfig, MixConfig,
    MixedSample, Provenance, SupervisedPatches,
};
pub use model::{backward, dice_loss, forward, predict, ClassProbs, DiceClasses, ModelParams};
pub use rng::Rng;
pub use scalar::Scalar;
pub use selection::{
    filter_pseudo_labels_g, select_classes, select_classes_f, ClassWeighting, PatchSelection, SelectionConfig,
};
pub use trainer::{
    adapt, ema_update, evaluate, finetune_ssda, pretrain, AdaptData, AdaptOutput, Mode, Toggles, TrainConfig,
    TrainObserver, TrainStats,
};
pub use types::{
    ClassFrequencyDistribution, ClassSet, Dataset, Frame, Label, LabelKind, LabelSet, LabeledCloud, PointCloud,
};

pub type ModelParamsF32 = ModelParams<f32>;
pub type ModelParamsF64 = ModelParams<f64>;
pub type ClassProbsF32 = ClassProbs<f32>;
pub type ClassProbsF64 = ClassProbs<f64>;
pub type AdaptOutputF32 = AdaptOutput<f32>;
