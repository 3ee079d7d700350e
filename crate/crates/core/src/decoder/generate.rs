use super::model::{DecoderModel, PrefixInput};
use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::Result;
use crate::linalg::log_sum_exp;

pub const DEFAULT_BEAM_WIDTH: usize = 5;

/// Longest word sequence that still fits `[prefix, BOS, w_1 .. w_n]` in the
/// positional table.
fn max_words(model: &DecoderModel, prefix: &PrefixInput) -> usize {
    model.shape.max_len.saturating_sub(prefix.len() + 1)
}

/// Log-probabilities for the next token with PAD, BOS and UNK excluded.
fn next_log_probs(
    model: &DecoderModel,
    prefix: &PrefixInput,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let logits = model.forward(prefix, tokens)?;
    let mut z = logits.row(logits.rows() - 1).to_vec();
    for id in [PAD, BOS, UNK] {
        if id < z.len() {
            z[id] = f64::NEG_INFINITY;
        }
    }
    let lse = log_sum_exp(&z);
    z.iter_mut().for_each(|v| *v -= lse);
    Ok(z)
}

fn argmax_low(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Word ids without BOS/EOS. Ties go to the lowest token id.
pub fn greedy_decode(model: &DecoderModel, prefix: &PrefixInput) -> Result<Vec<usize>> {
    let mut tokens = vec![BOS];
    for _ in 0..max_words(model, prefix) {
        let next = argmax_low(&next_log_probs(model, prefix, &tokens)?);
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(tokens.split_off(1))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    /// Mean log-probability per emitted token, EOS included.
    fn score(&self) -> f64 {
        let emitted = self.tokens.len() - 1 + usize::from(self.finished);
        if emitted == 0 {
            0.0
        } else {
            self.log_prob / emitted as f64
        }
    }
}

/// Length-normalized beam search. With `width == 1` it reproduces
/// [`greedy_decode`] exactly.
pub fn beam_search(model: &DecoderModel, prefix: &PrefixInput, width: usize) -> Result<Vec<usize>> {
    let width = width.max(1);
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_words(model, prefix) {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let lp = next_log_probs(model, prefix, &h.tokens)?;
            for (id, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                let finished = id == EOS;
                if !finished {
                    tokens.push(id);
                }
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished,
                });
            }
        }
        // Stable sort: earlier beams and lower ids win ties.
        candidates.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        candidates.truncate(width);
        live.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    let mut best = 0;
    for (i, h) in done.iter().enumerate() {
        if h.score() > done[best].score() {
            best = i;
        }
    }
    Ok(done.swap_remove(best).tokens.split_off(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::model::{AuxInput, DecoderConfig};
    use crate::fusion::ObjectFeatureSet;
    use crate::linalg::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> DecoderModel {
        let cfg = DecoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_len: 9,
            fusion_heads: 2,
            ..DecoderConfig::default()
        };
        let mut m = DecoderModel::new(&cfg, 12, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|x| *x += rng.random_range(-1.0..1.0));
        }
        m
    }

    fn prefix(seed: u64) -> PrefixInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || {
            (0..4)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let (a, q, o) = (v(), v(), v());
        PrefixInput {
            v: a,
            aux: Some(AuxInput {
                query: q,
                objects: ObjectFeatureSet {
                    features: Matrix::from_rows(&[o]).unwrap(),
                    tags: vec!["x".into()],
                },
            }),
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..20 {
            let m = model(seed);
            let p = prefix(seed);
            assert_eq!(
                beam_search(&m, &p, 1).unwrap(),
                greedy_decode(&m, &p).unwrap(),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn equal_logits_stop_immediately() {
        let mut m = model(1);
        m.head.w.iter_mut().for_each(|x| *x = 0.0);
        m.head.b.iter_mut().for_each(|x| *x = 0.0);
        assert!(greedy_decode(&m, &prefix(1)).unwrap().is_empty());
        assert!(beam_search(&m, &prefix(1), DEFAULT_BEAM_WIDTH)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn output_respects_length_and_special_tokens() {
        for seed in 0..10 {
            let m = model(seed);
            let p = prefix(seed);
            for out in [
                greedy_decode(&m, &p).unwrap(),
                beam_search(&m, &p, 3).unwrap(),
            ] {
                assert!(out.len() < 9 - p.len());
                assert!(out.iter().all(|&t| t > UNK && t < 12));
            }
        }
    }

    #[test]
    fn forced_repetition_runs_to_max_len() {
        let mut m = model(2);
        m.head.w.iter_mut().for_each(|x| *x = 0.0);
        m.head.b.iter_mut().for_each(|x| *x = 0.0);
        m.head.b[EOS] = -1.0;
        assert_eq!(greedy_decode(&m, &prefix(2)).unwrap(), vec![4; 6]);
    }
}
