use super::config::Toggles;
use crate::decoder::{AuxInput, PrefixInput};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::fusion::encode_objects;
use crate::projection::{project, SupportSet};

/// The one function from an image-side feature to a decoder prefix.
///
/// Training feeds it (possibly refined) pseudo features and inference feeds
/// it real ones; nothing else differs between the two paths.
pub struct FeatureBridge {
    dim: usize,
    support: Option<SupportSet>,
    objects: Option<Box<dyn TextEncoder>>,
}

impl FeatureBridge {
    /// `support` must be present exactly when `toggles.fp`, the object
    /// encoder exactly when `toggles.af`.
    pub fn new(
        dim: usize,
        toggles: Toggles,
        support: Option<SupportSet>,
        objects: Option<Box<dyn TextEncoder>>,
    ) -> Result<Self> {
        if toggles.fp != support.is_some() {
            return Err(Error::Config(format!(
                "projection is {} but a support set was{} given",
                if toggles.fp { "on" } else { "off" },
                if support.is_some() { "" } else { " not" }
            )));
        }
        if toggles.af != objects.is_some() {
            return Err(Error::Config(
                "object encoder must be given exactly when the auxiliary feature is on".into(),
            ));
        }
        if let Some(s) = &support {
            if s.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "support set dim {} vs feature dim {dim}",
                    s.dim()
                )));
            }
        }
        if let Some(e) = &objects {
            if e.dim() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "object encoder dim {} vs feature dim {dim}",
                    e.dim()
                )));
            }
        }
        Ok(Self {
            dim,
            support,
            objects,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> Option<&SupportSet> {
        self.support.as_ref()
    }

    pub fn prefix(&self, feature: &[f64], objects: &[String]) -> Result<PrefixInput> {
        if feature.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} vs {}",
                feature.len(),
                self.dim
            )));
        }
        let v = match &self.support {
            Some(s) => project(feature, s)?,
            None => feature.to_vec(),
        };
        let aux = match &self.objects {
            Some(enc) => Some(AuxInput {
                query: feature.to_vec(),
                objects: encode_objects(objects, enc.as_ref())?,
            }),
            None => None,
        };
        Ok(PrefixInput { v, aux })
    }
}
