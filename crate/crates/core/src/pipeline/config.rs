use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::ToyGrammar;
use crate::decoder::{DecoderConfig, DEFAULT_BEAM_WIDTH};
use crate::error::{Error, Result};
use crate::hash::sub_seed;
use crate::projection::{ProjectionConfig, TEMPERATURE_COCO};
use crate::refine::RefineConfig;
use crate::toy_encoder::ToyEncoderSpec;

/// Which of the three feature stages are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Contrastive refinement of the pseudo image features.
    pub fo: bool,
    /// Projection onto the text support set.
    pub fp: bool,
    /// Object-tag auxiliary feature.
    pub af: bool,
}

impl Toggles {
    pub const fn new(fo: bool, fp: bool, af: bool) -> Self {
        Self { fo, fp, af }
    }

    pub fn name(&self) -> &'static str {
        match (self.fo, self.fp, self.af) {
            (false, false, false) => "Baseline",
            (true, false, false) => "+FO",
            (false, true, false) => "+FP",
            (false, false, true) => "+AF",
            (true, false, true) => "+FO&AF",
            (true, true, false) => "+FP&FO",
            (false, true, true) => "+FP&AF",
            (true, true, true) => "Full",
        }
    }
}

/// The eight ablation variants in report order.
pub const VARIANTS: [Toggles; 8] = [
    Toggles::new(false, false, false),
    Toggles::new(true, false, false),
    Toggles::new(false, true, false),
    Toggles::new(false, false, true),
    Toggles::new(true, false, true),
    Toggles::new(true, true, false),
    Toggles::new(false, true, true),
    Toggles::new(true, true, true),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam {
        #[serde(default = "default_beam_width")]
        width: usize,
    },
}

fn default_beam_width() -> usize {
    DEFAULT_BEAM_WIDTH
}

impl Default for DecodeStrategy {
    fn default() -> Self {
        Self::Beam {
            width: DEFAULT_BEAM_WIDTH,
        }
    }
}

/// Synthetic benchmark: captions from [`ToyGrammar`], features from the toy
/// encoders. Held-out items are combinations absent from training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub enabled: bool,
    pub n_train: usize,
    pub n_test: usize,
    pub encoder: ToyEncoderSpec,
    pub grammar: ToyGrammar,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            n_train: 500,
            n_test: 100,
            encoder: ToyEncoderSpec::default(),
            grammar: ToyGrammar::default(),
        }
    }
}

/// File locations. Every path is optional; each stage checks for the ones it
/// needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training caption corpus (JSONL).
    pub corpus: Option<PathBuf>,
    /// Text features of `corpus`, row-aligned.
    pub text_embeddings: Option<PathBuf>,
    /// Pseudo image features of `corpus`, row-aligned.
    pub pseudo_embeddings: Option<PathBuf>,
    /// Support set for projection. Defaults to `text_embeddings`.
    pub support: Option<PathBuf>,
    /// Real image features for inference.
    pub image_embeddings: Option<PathBuf>,
    /// Per-image ids, object tags and optional reference captions (JSONL).
    pub image_corpus: Option<PathBuf>,
    /// Object-tag feature table and its tag names, one per line.
    pub tag_features: Option<PathBuf>,
    pub tag_names: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Generated captions (JSONL).
    pub captions: Option<PathBuf>,
    /// Directory for JSON reports.
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream; `refine.seed` and `decoder.seed` are
    /// replaced by named sub-seeds of it.
    pub seed: u64,
    pub toggles: Toggles,
    /// Projection temperature.
    pub tau_proj: f64,
    pub top_k: Option<usize>,
    pub min_freq: usize,
    pub decode: DecodeStrategy,
    /// `refine.temperature` is the contrastive temperature.
    pub refine: RefineConfig,
    pub decoder: DecoderConfig,
    pub toy: ToyConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            toggles: Toggles::new(true, true, true),
            tau_proj: TEMPERATURE_COCO,
            top_k: None,
            min_freq: 5,
            decode: DecodeStrategy::default(),
            refine: RefineConfig::default(),
            decoder: DecoderConfig::default(),
            toy: ToyConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings for the synthetic benchmark: toy data on, a decoder small
    /// enough to train all eight ablation variants on one CPU core.
    pub fn toy() -> Self {
        Self {
            min_freq: 1,
            decode: DecodeStrategy::Greedy,
            decoder: DecoderConfig {
                layers: 4,
                heads: 4,
                model_dim: 64,
                ff_dim: 256,
                max_len: 16,
                dropout: 0.1,
                fusion_heads: 4,
                learning_rate: 1e-3,
                epochs: 15,
                batch_size: 16,
                seed: 0,
            },
            toy: ToyConfig {
                enabled: true,
                ..ToyConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        self.decoder.validate()?;
        self.projection().validate()?;
        if let DecodeStrategy::Beam { width: 0 } = self.decode {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        if self.toy.enabled {
            self.toy.encoder.validate()?;
            if self.toy.n_train == 0 || self.toy.n_test == 0 {
                return Err(Error::Config("toy n_train and n_test must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            temperature: self.tau_proj,
            top_k: self.top_k,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            seed: sub_seed(self.seed, "refine"),
            ..self.refine
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            seed: sub_seed(self.seed, "train"),
            ..self.decoder
        }
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn eight_distinct_variants() {
        let names: HashSet<&str> = VARIANTS.iter().map(|t| t.name()).collect();
        assert_eq!(names.len(), 8);
        assert_eq!(VARIANTS[0].name(), "Baseline");
        assert_eq!(VARIANTS[7], Toggles::new(true, true, true));
    }

    #[test]
    fn sub_seeds_differ() {
        let c = PipelineConfig::default();
        assert_ne!(c.refine_config().seed, c.decoder_config().seed);
        assert_ne!(c.init_seed(), c.decoder_config().seed);
    }

    #[test]
    fn toy_config_is_valid() {
        PipelineConfig::toy().validate().unwrap();
        PipelineConfig::default().validate().unwrap();
    }
}
