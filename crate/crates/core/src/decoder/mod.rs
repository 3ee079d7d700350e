//! Caption decoder: a small pre-norm transformer conditioned on an image-side
//! prefix, trained by teacher-forced cross-entropy.

pub mod generate;
pub mod layers;
pub mod model;
pub mod train;

pub use generate::{beam_search, greedy_decode, DEFAULT_BEAM_WIDTH};
pub use model::{
    loss_and_backward, reconstruction_loss, AuxInput, DecoderConfig, DecoderModel, Dropout,
    ModelShape, PrefixInput, TensorView,
};
pub use train::{train_decoder, TrainingExample};
