//! Contrastive refinement of pseudo image features.
//!
//! Each pseudo feature `s_i` is pulled toward its paired text feature `t_i`
//! and away from the other texts in its mini-batch by minimizing
//!
//! ```text
//! L = -(1/b) Σ_i log( exp(cos(s_i, t_i)/τ) / Σ_j exp(cos(s_i, t_j)/τ) )
//! ```
//!
//! with respect to the `s_i` only. Text features are frozen.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, norm, Matrix};
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            learning_rate: 1e-5,
            epochs: 5,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "refine temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "refine learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "refine batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn unit_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector(format!("{what} row {i}")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn check_pair(s: &Matrix, t: &Matrix) -> Result<()> {
    if s.rows() != t.rows() || s.cols() != t.cols() {
        return Err(Error::ShapeMismatch(format!(
            "pseudo features are {}x{}, text features {}x{}",
            s.rows(),
            s.cols(),
            t.rows(),
            t.cols()
        )));
    }
    if s.rows() == 0 {
        return Err(Error::Empty("contrastive batch has no rows".into()));
    }
    Ok(())
}

/// Loss and gradient w.r.t. `s` given already-normalized text rows.
fn loss_and_grad(s: &Matrix, t_unit: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    let b = s.rows();
    let (s_unit, s_norms) = unit_rows(s, "pseudo feature")?;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, s.cols());
    let mut logits = vec![0.0; b];
    for i in 0..b {
        let si = s_unit.row(i);
        for (j, z) in logits.iter_mut().enumerate() {
            *z = dot(si, t_unit.row(j)) / tau;
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[i];

        // dL/dŝ_i = (1/bτ) Σ_j (p_ij - δ_ij) t̂_j
        let mut g_unit = vec![0.0; s.cols()];
        for j in 0..b {
            let coef = (logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 };
            if coef != 0.0 {
                let c = coef / (b as f64 * tau);
                for (g, tv) in g_unit.iter_mut().zip(t_unit.row(j)) {
                    *g += c * tv;
                }
            }
        }
        // Back through ŝ = s/‖s‖: (I - ŝŝᵀ) g / ‖s‖
        let radial = dot(&g_unit, si);
        for ((g, gu), sv) in grad.row_mut(i).iter_mut().zip(&g_unit).zip(si) {
            *g = (gu - radial * sv) / s_norms[i];
        }
    }
    Ok((loss / b as f64, grad))
}

pub fn contrastive_loss(s: &Matrix, t: &Matrix, temperature: f64) -> Result<f64> {
    check_pair(s, t)?;
    let (t_unit, _) = unit_rows(t, "text feature")?;
    Ok(loss_and_grad(s, &t_unit, temperature)?.0)
}

pub fn contrastive_grad(s: &Matrix, t: &Matrix, temperature: f64) -> Result<Matrix> {
    check_pair(s, t)?;
    let (t_unit, _) = unit_rows(t, "text feature")?;
    Ok(loss_and_grad(s, &t_unit, temperature)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub features: EmbeddingMatrix,
    pub history: Vec<EpochLoss>,
}

/// Row-weighted mean loss over consecutive batches in index order.
fn partition_loss(s: &Matrix, t_unit: &Matrix, cfg: &RefineConfig) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..s.rows()).collect();
    for batch in idx.chunks(cfg.batch_size) {
        if batch.len() < 2 {
            continue;
        }
        let (loss, _) = loss_and_grad(
            &s.select_rows(batch),
            &t_unit.select_rows(batch),
            cfg.temperature,
        )?;
        total += loss * batch.len() as f64;
        count += batch.len();
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

/// Mini-batch Adam over the pseudo features for `cfg.epochs` epochs.
///
/// Each row carries its own Adam moments and is stepped only when its batch
/// is processed. A trailing batch of one row is skipped: its loss is
/// identically zero.
///
/// The recorded loss for an epoch is measured after its updates, over a
/// fixed partition of the rows into consecutive batches. The running mean
/// over shuffled batches mostly tracks which negatives share a batch, so it
/// is not comparable between epochs.
pub fn refine_features(
    pseudo: &EmbeddingMatrix,
    text: &EmbeddingMatrix,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    let t = text.to_matrix();
    let mut s = pseudo.to_matrix();
    check_pair(&s, &t)?;
    let (t_unit, _) = unit_rows(&t, "text feature")?;
    unit_rows(&s, "pseudo feature")?;

    let adam = cfg.adam();
    let n = s.rows();
    let mut states: Vec<AdamState> = (0..n).map(|_| AdamState::new(s.cols())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let sb = s.select_rows(batch);
            let tb = t_unit.select_rows(batch);
            let (loss, grad) = loss_and_grad(&sb, &tb, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("contrastive loss is {loss}"),
                });
            }
            for (k, &row) in batch.iter().enumerate() {
                states[row].step(&adam, s.row_mut(row), grad.row(k));
            }
        }
        let mean_loss = partition_loss(&s, &t_unit, cfg)?;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("contrastive loss is {mean_loss}"),
            });
        }
        history.push(EpochLoss { epoch, mean_loss });
    }

    Ok(RefineOutcome {
        features: EmbeddingMatrix::from_matrix(&s)?,
        history,
    })
}

pub fn write_loss_history<W: Write>(history: &[EpochLoss], mut sink: W) -> Result<()> {
    for h in history {
        serde_json::to_writer(&mut sink, h).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Mean over rows of `cos(a_i, b_i)`.
pub fn mean_paired_cosine(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64> {
    if a.rows() != b.rows() || a.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} rows",
            a.rows(),
            b.rows()
        )));
    }
    let mut total = 0.0;
    for i in 0..a.rows() {
        total += cosine_sim(&a.row_f64(i), &b.row_f64(i))?;
    }
    Ok(total / a.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::SplitMix64;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = SplitMix64::new(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| s.next_signed_unit()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[2.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(
            (cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-6
        );
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn identity_similarity_batch_of_two() {
        // S = T = I₂, so the similarity matrix is I₂; at τ = 1 each row's
        // loss is -ln(e/(e+1)).
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = contrastive_loss(&eye, &eye, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3132617).abs() < 1e-7);
    }

    #[test]
    fn strong_diagonal_at_low_temperature() {
        let eye = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!(contrastive_loss(&eye, &eye, 1e-3).unwrap() < 1e-3);
    }

    #[test]
    fn single_row_batch_has_zero_loss_and_gradient() {
        let s = random(1, 5, 3);
        let t = random(1, 5, 4);
        assert_eq!(contrastive_loss(&s, &t, 0.01).unwrap(), 0.0);
        assert!(contrastive_grad(&s, &t, 0.01)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn scale_invariance() {
        let s = random(4, 6, 10);
        let t = random(4, 6, 11);
        let a = contrastive_loss(&s, &t, 0.1).unwrap();
        let b = contrastive_loss(&s.scaled(2.0), &t, 0.1).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let s = random(3, 4, 1);
        let t = random(2, 4, 2);
        assert!(matches!(
            contrastive_loss(&s, &t, 0.1),
            Err(Error::ShapeMismatch(_))
        ));
        let mut z = random(2, 4, 3);
        z.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(
            contrastive_loss(&z, &random(2, 4, 4), 0.1),
            Err(Error::ZeroVector(_))
        ));
    }

    #[test]
    fn gradient_lies_in_span_of_text_rows_and_own_row() {
        let (b, d) = (4, 8);
        let s = random(b, d, 21);
        let t = random(b, d, 22);
        let g = contrastive_grad(&s, &t, 0.2).unwrap();
        for i in 0..b {
            // Orthonormal basis of span{t̂_1..t̂_b, ŝ_i} by Gram-Schmidt.
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for v in t.iter_rows().chain(std::iter::once(s.row(i))) {
                let mut w = v.to_vec();
                for q in &basis {
                    let c = dot(&w, q);
                    w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
                }
                let n = norm(&w);
                if n > 1e-10 {
                    basis.push(w.iter().map(|x| x / n).collect());
                }
            }
            let mut resid = g.row(i).to_vec();
            for q in &basis {
                let c = dot(&resid, q);
                resid.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
            assert!(
                norm(&resid) < 1e-12 * norm(g.row(i)).max(1.0),
                "row {i} residual {}",
                norm(&resid)
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_features_unchanged() {
        let s = EmbeddingMatrix::from_matrix(&random(10, 4, 5)).unwrap();
        let t = EmbeddingMatrix::from_matrix(&random(10, 4, 6)).unwrap();
        let cfg = RefineConfig {
            learning_rate: 0.0,
            batch_size: 4,
            ..RefineConfig::default()
        };
        let out = refine_features(&s, &t, &cfg).unwrap();
        assert_eq!(out.features, s);
        assert_eq!(out.history.len(), 5);
    }

    #[test]
    fn trailing_singleton_batch_is_skipped() {
        // 5 rows in batches of 4 leaves one row that is never updated. A warm
        // temperature keeps every batched row's gradient well above Adam's eps.
        let s = EmbeddingMatrix::from_matrix(&random(5, 4, 7)).unwrap();
        let t = EmbeddingMatrix::from_matrix(&random(5, 4, 8)).unwrap();
        let cfg = RefineConfig {
            temperature: 1.0,
            learning_rate: 1e-2,
            batch_size: 4,
            epochs: 1,
            ..RefineConfig::default()
        };
        let out = refine_features(&s, &t, &cfg).unwrap();
        let unchanged = (0..5).filter(|&i| out.features.row(i) == s.row(i)).count();
        assert_eq!(unchanged, 1);
    }

    #[test]
    fn batch_size_one_rejected() {
        let cfg = RefineConfig {
            batch_size: 1,
            ..RefineConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn history_jsonl() {
        let mut buf = Vec::new();
        write_loss_history(
            &[EpochLoss {
                epoch: 0,
                mean_loss: 1.5,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"epoch\":0,\"mean_loss\":1.5}\n"
        );
    }
}
