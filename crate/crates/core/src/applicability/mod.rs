//! The applicability function, masks and the learned classifier.

mod classifier;
mod mask;
mod sampler;
mod source;

pub use classifier::{classifier_extractor_layers, classifier_head_layers, ClassifierNet, ClassifierOptimizer};
pub use mask::{masked_distribution, Mask, MaskedDistribution, MASKED_LOGIT};
pub use sampler::{balanced_batch, train_classifier_epoch, BalancedBatch, BalancedSampler, LabeledRows};
pub use source::{
    build_mask, exhaustive_accuracy, heatmap, initiation_set, label_applicability, observe_batch, ClassifierSource,
    FlagContext, HeatCell, Heatmap, KnowledgeSource,
};
