use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{loss_and_backward, DecoderConfig, DecoderModel, Dropout, PrefixInput};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::refine::EpochLoss;

/// One caption with its conditioning prefix. `caption` is `BOS w_1 .. w_n EOS`.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub prefix: PrefixInput,
    pub caption: Vec<usize>,
}

/// Global gradient-norm ceiling applied to every mini-batch.
const GRAD_CLIP: f64 = 1.0;

/// Mini-batch Adam on the mean per-caption cross-entropy.
///
/// Shuffling and dropout masks come from a single ChaCha8 stream seeded with
/// `cfg.seed`, so a run is reproducible bit for bit.
pub fn train_decoder(
    model: &mut DecoderModel,
    examples: &[TrainingExample],
    cfg: &DecoderConfig,
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("no training captions".into()));
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut states: Vec<AdamState> = model
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.data.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grads = model.zeros_like();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let mut dropout = Dropout {
                    rate: cfg.dropout,
                    rng: &mut rng,
                };
                batch_loss +=
                    loss_and_backward(model, &ex.prefix, &ex.caption, &mut dropout, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("caption loss is {batch_loss}"),
                });
            }
            total += batch_loss;
            let mut scale = 1.0 / batch.len() as f64;
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt()
                * scale;
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("gradient norm is {norm}"),
                });
            }
            if norm > GRAD_CLIP {
                scale *= GRAD_CLIP / norm;
            }
            grads.scale(scale);
            let grad_data: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.data).collect();
            for ((param, g), state) in model
                .tensors_mut()
                .into_iter()
                .zip(grad_data)
                .zip(&mut states)
            {
                state.step(&adam, param, g);
            }
        }
        history.push(EpochLoss {
            epoch,
            mean_loss: total / examples.len() as f64,
        });
    }
    Ok(history)
}
