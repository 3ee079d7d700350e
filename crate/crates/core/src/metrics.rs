//! Corpus-level caption metrics: BLEU-4, ROUGE-L and CIDEr-D.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate caption with its references, already tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Self {
        Self {
            candidate,
            references,
        }
    }

    /// Tokenizes raw strings with [`crate::corpus::tokenize`].
    pub fn from_text(candidate: &str, references: &[&str]) -> Self {
        use crate::corpus::tokenize;
        Self {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub n_pairs: usize,
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu4: bleu4(pairs)?,
        rouge_l: rouge_l(pairs)?,
        cider_d: cider_d(pairs)?,
        n_pairs: pairs.len(),
    })
}

fn check(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Empty("no candidate captions to score".into()));
    }
    if let Some(i) = pairs.iter().position(|p| p.references.is_empty()) {
        return Err(Error::Empty(format!("pair {i} has no references")));
    }
    Ok(())
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with clipped n-gram precisions pooled over all pairs, uniform
/// weights for n = 1..4, and the closest-reference brevity penalty.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64> {
    check(pairs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let c = p.candidate.len();
        cand_len += c;
        // Closest reference length; ties go to the shorter one.
        ref_len += p
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("references checked non-empty");
        for n in 1..=4 {
            let cand = ngrams(&p.candidate, n);
            let mut max_ref: Counts<'_> = HashMap::new();
            for r in &p.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                total[n - 1] += k;
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: the best LCS F-measure over the references.
pub fn rouge_l_pair(pair: &EvalPair) -> f64 {
    let c = &pair.candidate;
    if c.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    pair.references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check(pairs)?;
    Ok(pairs.iter().map(rouge_l_pair).sum::<f64>() / pairs.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vec: [HashMap<Vec<String>, f64>; 4],
    /// Squared norms per n.
    norm2: [f64; 4],
    len: usize,
}

/// Document frequencies over reference sets, shared by all pairs.
struct CiderCorpus {
    df: HashMap<Vec<String>, f64>,
    log_n: f64,
}

impl CiderCorpus {
    fn new(pairs: &[EvalPair]) -> Self {
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for p in pairs {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in &p.references {
                for n in 1..=4 {
                    seen.extend(ngrams(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        Self {
            df,
            log_n: (pairs.len() as f64).ln(),
        }
    }

    fn vectorize(&self, tokens: &[String]) -> TfIdf {
        let mut vec: [HashMap<Vec<String>, f64>; 4] = Default::default();
        let mut norm2 = [0.0; 4];
        for n in 1..=4 {
            // Sorted so the norm is summed in a fixed order.
            let mut grams: Vec<(&[String], usize)> = ngrams(tokens, n).into_iter().collect();
            grams.sort();
            for (g, tf) in grams {
                let df = self.df.get(g).copied().unwrap_or(0.0);
                let w = tf as f64 * (self.log_n - df.max(1.0).ln());
                norm2[n - 1] += w * w;
                vec[n - 1].insert(g.to_vec(), w);
            }
        }
        TfIdf {
            vec,
            norm2,
            len: tokens.len(),
        }
    }

    fn similarity(hyp: &TfIdf, r: &TfIdf) -> [f64; 4] {
        let delta = hyp.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut out = [0.0; 4];
        for n in 0..4 {
            let mut grams: Vec<(&Vec<String>, &f64)> = hyp.vec[n].iter().collect();
            grams.sort_by(|a, b| a.0.cmp(b.0));
            let mut val = 0.0;
            for (g, &h) in grams {
                if let Some(&rv) = r.vec[n].get(g) {
                    val += h.min(rv) * rv;
                }
            }
            if hyp.norm2[n] != 0.0 && r.norm2[n] != 0.0 {
                val /= (hyp.norm2[n] * r.norm2[n]).sqrt();
            }
            out[n] = val * penalty;
        }
        out
    }
}

/// Per-pair CIDEr-D scores in `[0, 10]`.
pub fn cider_d_per_pair(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    check(pairs)?;
    let distinct: HashSet<&Vec<Vec<String>>> = pairs.iter().map(|p| &p.references).collect();
    if distinct.len() < 2 {
        return Err(Error::Empty(
            "CIDEr-D needs at least two distinct reference sets".into(),
        ));
    }
    let corpus = CiderCorpus::new(pairs);
    Ok(pairs
        .iter()
        .map(|p| {
            let hyp = corpus.vectorize(&p.candidate);
            let mut total = 0.0;
            for r in &p.references {
                let sims = CiderCorpus::similarity(&hyp, &corpus.vectorize(r));
                total += sims.iter().sum::<f64>() / 4.0;
            }
            total / p.references.len() as f64 * 10.0
        })
        .collect())
}

pub fn cider_d(pairs: &[EvalPair]) -> Result<f64> {
    let scores = cider_d_per_pair(pairs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(c: &str, refs: &[&str]) -> EvalPair {
        EvalPair::from_text(c, refs)
    }

    #[test]
    fn bleu_perfect_and_zero() {
        let p = [pair("a man rides a horse", &["a man rides a horse"])];
        assert_eq!(bleu4(&p).unwrap(), 1.0);
        let q = [pair("one two three four", &["four three two one"])];
        assert_eq!(bleu4(&q).unwrap(), 0.0);
    }

    #[test]
    fn bleu_worked_example() {
        // Clipped precisions 5/6, 3/5, 2/4, 1/3; equal lengths.
        let p = [pair("the cat sat on the mat", &["the cat sat on a mat"])];
        let expected = (1.0f64 / 12.0).powf(0.25);
        assert!((bleu4(&p).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.537_284_965_9).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_uses_closest_reference() {
        let p = [pair("a b c d", &["a b c d e f g h", "a b c d e"])];
        assert!((bleu4(&p).unwrap() - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[pair("a b c", &["a b c"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[pair("a b c", &["d e f"])]).unwrap(), 0.0);
        assert!((rouge_l(&[pair("a b c d", &["a c b d"])]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&[pair("", &["a b"])]).unwrap(), 0.0);
    }

    #[test]
    fn cider_identity_is_ten() {
        let p = [
            pair("a dog runs on grass", &["a dog runs on grass"]),
            pair("blue boat", &["red car parked"]),
        ];
        assert_eq!(cider_d_per_pair(&p).unwrap()[0], 10.0);
        let none = [pair("x y z", &["a b c"]), pair("q", &["d e"])];
        assert_eq!(cider_d(&none).unwrap(), 0.0);
    }

    #[test]
    fn cider_needs_a_corpus() {
        assert!(cider_d(&[pair("a", &["a"])]).is_err());
        assert!(cider_d(&[pair("a", &["a"]), pair("b", &["a"])]).is_err());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(bleu4(&[]).is_err());
        assert!(rouge_l(&[EvalPair::new(vec![], vec![])]).is_err());
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]),
            0..9,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    fn corpus() -> impl Strategy<Value = Vec<EvalPair>> {
        prop::collection::vec(
            (sentence(), prop::collection::vec(sentence(), 1..4))
                .prop_map(|(c, r)| EvalPair::new(c, r)),
            2..6,
        )
        .prop_filter("distinct reference sets", |ps| {
            ps.iter()
                .map(|p| &p.references)
                .collect::<HashSet<_>>()
                .len()
                >= 2
        })
    }

    proptest! {
        #[test]
        fn bounded_and_order_invariant(mut pairs in corpus()) {
            let a = evaluate(&pairs).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.bleu4));
            prop_assert!((0.0..=1.0).contains(&a.rouge_l));
            prop_assert!((0.0..=10.0 + 1e-9).contains(&a.cider_d));
            pairs.reverse();
            let b = evaluate(&pairs).unwrap();
            prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-12);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
            prop_assert!((a.cider_d - b.cider_d).abs() < 1e-9);
        }

        #[test]
        fn duplicating_pairs_changes_nothing(pairs in corpus()) {
            let a = evaluate(&pairs).unwrap();
            let doubled: Vec<EvalPair> = pairs.iter().chain(&pairs).cloned().collect();
            let b = evaluate(&doubled).unwrap();
            prop_assert!((a.bleu4 - b.bleu4).abs() < 1e-12);
            prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
        }

        /// CIDEr-D floors document frequency at 1, so an n-gram seen in no
        /// reference keeps weight `ln N` and duplication shifts it. The
        /// invariance holds once every candidate n-gram occurs in some
        /// reference set, which the mapping below guarantees.
        #[test]
        fn duplicating_pairs_keeps_cider_when_candidates_are_covered(pairs in corpus()) {
            let n = pairs.len();
            let mut covered = pairs.clone();
            for i in 0..n {
                let c = pairs[i].candidate.clone();
                covered[(i + 1) % n].references.push(c);
            }
            prop_assume!(covered.iter().map(|p| &p.references).collect::<HashSet<_>>().len() >= 2);
            let a = cider_d(&covered).unwrap();
            let doubled: Vec<EvalPair> = covered.iter().chain(&covered).cloned().collect();
            prop_assert!((a - cider_d(&doubled).unwrap()).abs() < 1e-9);
        }
    }
}
