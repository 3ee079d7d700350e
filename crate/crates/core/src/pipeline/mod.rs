//! End-to-end training, inference and ablation.
//!
//! Training: text features `T` and pseudo image features `S` are loaded (or
//! synthesized in toy mode), `S` is optionally refined toward `T`, and every
//! item is turned into a decoder prefix by [`FeatureBridge`]. Inference runs
//! real image features through the same bridge and decodes.

mod bridge;
mod config;
mod data;
mod run;

pub use bridge::FeatureBridge;
pub use config::{DecodeStrategy, Paths, PipelineConfig, Toggles, ToyConfig, VARIANTS};
pub use data::{
    load_inference_data, load_training_data, read_captions, read_references, toy_inference_data,
    toy_training_data, write_captions, CaptionOutput, ImageRecord, InferenceData, TrainingData,
};
pub use run::{
    run_ablation, run_inference, run_training, score_captions, train_in_memory, AblationReport,
    Captioner, InferenceOutcome, TrainedPipeline, TrainingReport, VariantResult,
};
