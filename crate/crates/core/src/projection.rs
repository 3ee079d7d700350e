//! Softmax-weighted projection of image-side features onto a support set of
//! text features.
//!
//! For a query `q`, `w_j = softmax_j(cos(q, t_j) / τ)` and the projection is
//! `Σ_j w_j t_j` over the raw (not normalized) support rows.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, softmax_in_place, Matrix};

/// Default projection temperatures for in-domain caption corpora.
pub const TEMPERATURE_COCO: f64 = 1.0 / 100.0;
pub const TEMPERATURE_FLICKR: f64 = 1.0 / 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub temperature: f64,
    /// Keep only the `k` largest weights. `None` uses the whole support set.
    pub top_k: Option<usize>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            temperature: TEMPERATURE_COCO,
            top_k: None,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "projection temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SupportSet {
    features: Matrix,
    unit: Matrix,
    temperature: f64,
    top_k: Option<usize>,
}

pub fn build_support_set(text: &EmbeddingMatrix, temperature: f64) -> Result<SupportSet> {
    SupportSet::new(
        text,
        ProjectionConfig {
            temperature,
            top_k: None,
        },
    )
}

impl SupportSet {
    pub fn new(text: &EmbeddingMatrix, cfg: ProjectionConfig) -> Result<Self> {
        if text.rows() == 0 {
            return Err(Error::Empty("support set has no rows".into()));
        }
        cfg.validate()?;
        let features = text.to_matrix();
        let mut unit = features.clone();
        for i in 0..unit.rows() {
            let n = norm(unit.row(i));
            if n == 0.0 {
                return Err(Error::ZeroVector(format!("support row {i}")));
            }
            unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            features,
            unit,
            temperature: cfg.temperature,
            top_k: cfg.top_k,
        })
    }

    pub fn with_top_k(mut self, top_k: Option<usize>) -> Self {
        self.top_k = top_k;
        self
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn top_k(&self) -> Option<usize> {
        self.top_k
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    fn similarities(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "query has dim {}, support set {}",
                query.len(),
                self.dim()
            )));
        }
        let qn = norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::ZeroVector("projection query".into()));
        }
        Ok(self.unit.iter_rows().map(|t| dot(query, t) / qn).collect())
    }

    /// Index of the most similar support row; ties go to the lowest index.
    pub fn nearest(&self, query: &[f64]) -> Result<usize> {
        let sims = self.similarities(query)?;
        let mut best = 0;
        for (j, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = j;
            }
        }
        Ok(best)
    }
}

pub fn projection_weights(query: &[f64], support: &SupportSet) -> Result<Vec<f64>> {
    let mut w = support.similarities(query)?;
    w.iter_mut().for_each(|s| *s /= support.temperature);
    softmax_in_place(&mut w);
    if let Some(k) = support.top_k.filter(|&k| k < w.len()) {
        let mut order: Vec<usize> = (0..w.len()).collect();
        // Stable sort keeps lower indices first among equal weights.
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
        let mut kept = vec![0.0; w.len()];
        let mut total = 0.0;
        for &j in &order[..k] {
            kept[j] = w[j];
            total += w[j];
        }
        kept.iter_mut().for_each(|v| *v /= total);
        w = kept;
    }
    Ok(w)
}

pub fn project(query: &[f64], support: &SupportSet) -> Result<Vec<f64>> {
    let w = projection_weights(query, support)?;
    let mut out = vec![0.0; support.dim()];
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            axpy(&mut out, wj, support.features.row(j));
        }
    }
    Ok(out)
}

pub fn project_all(queries: &EmbeddingMatrix, support: &SupportSet) -> Result<EmbeddingMatrix> {
    let rows = (0..queries.rows())
        .map(|i| project(&queries.row_f64(i), support))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_f64_rows(&rows, support.dim())
}
