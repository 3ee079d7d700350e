//! Text encoders used for object tags.
//!
//! The pipeline never runs a neural encoder itself. Object-tag features come
//! either from the toy encoder or from a precomputed table: a SYNE file whose
//! row `k` is the feature of the `k`-th line of a companion tag-list file.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{load_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::toy_encoder::{ToyEncoderSpec, ToyTextEncoder};

pub trait TextEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Where object-tag features come from; stored in checkpoints so inference
/// rebuilds the same encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectEncoderConfig {
    Toy(ToyEncoderSpec),
    Table { features: PathBuf, names: PathBuf },
}

impl ObjectEncoderConfig {
    pub fn build(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            Self::Toy(spec) => {
                spec.validate()?;
                Box::new(ToyTextEncoder(*spec))
            }
            Self::Table { features, names } => Box::new(TagTable::load(features, names)?),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TagTable {
    index: HashMap<String, usize>,
    features: EmbeddingMatrix,
}

impl TagTable {
    pub fn new(tags: Vec<String>, features: EmbeddingMatrix) -> Result<Self> {
        if tags.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} tag names for {} feature rows",
                tags.len(),
                features.rows()
            )));
        }
        let mut index = HashMap::with_capacity(tags.len());
        for (k, tag) in tags.into_iter().enumerate() {
            if index.insert(tag.clone(), k).is_some() {
                return Err(Error::DuplicateId(tag));
            }
        }
        Ok(Self { index, features })
    }

    /// `names` holds one tag per line; blank lines are ignored.
    pub fn load(features: impl AsRef<Path>, names: impl AsRef<Path>) -> Result<Self> {
        let features = load_embeddings(features)?;
        let tags = fs::read_to_string(names)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        Self::new(tags, features)
    }
}

impl TextEncoder for TagTable {
    fn dim(&self) -> usize {
        self.features.dim()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let k = self.index.get(text).ok_or_else(|| {
            Error::Config(format!("object tag {text:?} missing from the tag table"))
        })?;
        Ok(self.features.row_f64(*k))
    }
}
