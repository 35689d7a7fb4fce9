//! Prototype classification with optional text priors, linear probing,
//! LoRA fine-tuning, evaluation, and embedding-space compactness analysis.

pub mod compactness;
pub mod embed;
pub mod metrics;
pub mod pretrain;
pub mod prototype;
pub mod text_priors;
pub mod train;

pub use compactness::{compactness_report, pca_2d, CompactnessReport};
pub use embed::{embed_images, embed_raw, Embeddings};
pub use metrics::{EpochMetrics, MetricsRecord, StepMetrics};
pub use pretrain::{pretrain_encoder, warm_start, PretrainConfig};
pub use prototype::{
    classify_by_prototype, hybrid_prototype, prototype_accuracy, run_prototype_strategy, textual_prototype,
    visual_prototype, PrototypeSet,
};
pub use text_priors::{read_embeddings, write_embeddings, EmbeddingRow, PriorMode, TextPriorProvider};
pub use train::{
    evaluate, run_linear_probe, run_lora, run_training, Evaluator, ModelBundle, Strategy, TrainOutcome,
    TrainRunConfig, Trainer,
};
