//! Deterministic stand-ins for a contrastive text/image encoder pair.
//!
//! Text features are sums of per-token hash vectors. Image features add a
//! fixed "modality gap" direction scaled by `gap_scale` plus per-item
//! Gaussian noise scaled by `noise_scale`, then renormalize.

use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, SplitMix64};
use crate::linalg::normalized;

const GAP_SALT: u64 = 0x6761_705F; // "gap_"

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEncoderSpec {
    pub dim: usize,
    pub seed: u64,
    pub gap_scale: f64,
    pub noise_scale: f64,
}

impl Default for ToyEncoderSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 7,
            gap_scale: 0.5,
            noise_scale: 0.1,
        }
    }
}

impl ToyEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "toy encoder dim must be >= 2, got {}",
                self.dim
            )));
        }
        if !(self.gap_scale >= 0.0 && self.gap_scale.is_finite()) {
            return Err(Error::Config(format!(
                "gap_scale must be >= 0, got {}",
                self.gap_scale
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

fn expand(state: u64, dim: usize) -> Vec<f64> {
    let mut s = SplitMix64::new(state);
    (0..dim).map(|_| s.next_signed_unit()).collect()
}

pub fn toy_text_encode<S: AsRef<str>>(tokens: &[S], spec: &ToyEncoderSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if tokens.is_empty() {
        return Err(Error::Empty(
            "toy text encoder needs at least one token".into(),
        ));
    }
    let mut sum = vec![0.0; spec.dim];
    for tok in tokens {
        let h = fnv1a64(tok.as_ref().as_bytes()) ^ spec.seed;
        for (acc, v) in sum.iter_mut().zip(expand(h, spec.dim)) {
            *acc += v;
        }
    }
    normalized(&sum).ok_or_else(|| {
        Error::ZeroVector(format!(
            "token vectors for {:?} cancel exactly",
            tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>()
        ))
    })
}

/// Unit direction shared by every toy image feature.
pub fn gap_direction(spec: &ToyEncoderSpec) -> Result<Vec<f64>> {
    normalized(&expand(spec.seed ^ GAP_SALT, spec.dim))
        .ok_or_else(|| Error::ZeroVector("gap direction".into()))
}

/// `dim` standard normals via Box-Muller over a splitmix64 stream.
///
/// Each pair consumes two draws `u1, u2 ∈ [0,1)`; with `r = sqrt(-2 ln(1 - u1))`
/// the pair is `(r cos 2πu2, r sin 2πu2)`.
pub fn item_noise(seed: u64, item_index: u64, dim: usize) -> Vec<f64> {
    let mut s = SplitMix64::new(seed ^ item_index);
    let mut out = Vec::with_capacity(dim + 1);
    while out.len() < dim {
        let u1 = s.next_unit();
        let u2 = s.next_unit();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        out.push(r * theta.sin());
    }
    out.truncate(dim);
    out
}

pub fn toy_image_encode<S: AsRef<str>>(
    tokens: &[S],
    item_index: u64,
    spec: &ToyEncoderSpec,
) -> Result<Vec<f64>> {
    let text = toy_text_encode(tokens, spec)?;
    let gap = gap_direction(spec)?;
    let noise = item_noise(spec.seed, item_index, spec.dim);
    let raw: Vec<f64> = (0..spec.dim)
        .map(|k| text[k] + spec.gap_scale * gap[k] + spec.noise_scale * noise[k])
        .collect();
    normalized(&raw)
        .ok_or_else(|| Error::ZeroVector(format!("toy image feature for item {item_index}")))
}

/// Toy text encoder as a [`TextEncoder`], used for object tags.
#[derive(Debug, Clone, Copy)]
pub struct ToyTextEncoder(pub ToyEncoderSpec);

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        toy_text_encode(&crate::corpus::tokenize(text), &self.0)
    }
}
