//! Measurements shared by the integration tests and the acceptance harness.
//! Each function returns the measured quantity; callers decide the bound.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthcap::corpus::{generate_toy_corpus, ToyGrammar, Vocabulary, BOS, EOS};
use synthcap::decoder::{
    greedy_decode, loss_and_backward, reconstruction_loss, train_decoder, AuxInput, DecoderConfig,
    DecoderModel, Dropout, PrefixInput, TrainingExample,
};
use synthcap::embedding::EmbeddingMatrix;
use synthcap::fusion::{fuse, fuse_grad, FusionParams, ObjectFeatureSet};
use synthcap::linalg::{norm, Matrix};
use synthcap::metrics::EvalPair;
use synthcap::projection::{project, projection_weights, ProjectionConfig, SupportSet};
use synthcap::refine::{contrastive_grad, contrastive_loss};
use synthcap::toy_encoder::{toy_text_encode, ToyEncoderSpec};

pub const FD_STEP: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)`, with the denominator floored at 1e-6 so
/// entries that are zero on both sides do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Worst relative error of `contrastive_grad` against central differences
/// on a random `b x d` instance.
pub fn contrastive_fd_error(b: usize, d: usize, tau: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_matrix(&mut rng, b, d);
    let t = random_matrix(&mut rng, b, d);
    let g = contrastive_grad(&s, &t, tau).unwrap();
    let mut worst = 0.0f64;
    for i in 0..b * d {
        let at = |delta: f64| {
            let mut p = s.clone();
            p.as_mut_slice()[i] += delta;
            contrastive_loss(&p, &t, tau).unwrap()
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g.as_slice()[i], numeric));
    }
    worst
}

/// Loss of a batch whose pseudo rows are all equally similar to every text
/// row: text rows are the standard basis, pseudo rows the all-ones vector.
pub fn uniform_similarity_loss(b: usize) -> f64 {
    let mut t = Matrix::zeros(b, b);
    for i in 0..b {
        t.row_mut(i)[i] = 1.0;
    }
    let s = Matrix::from_vec(b, b, vec![1.0; b * b]).unwrap();
    contrastive_loss(&s, &t, 0.01).unwrap()
}

pub fn single_row_gradient_is_zero(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_matrix(&mut rng, 1, 8);
    let t = random_matrix(&mut rng, 1, 8);
    contrastive_grad(&s, &t, 0.01)
        .unwrap()
        .as_slice()
        .iter()
        .all(|&g| g == 0.0)
}

pub struct FusionInstance {
    pub params: FusionParams,
    pub query: Vec<f64>,
    pub objects: ObjectFeatureSet,
    pub upstream: Vec<f64>,
}

pub fn fusion_instance(dim: usize, heads: usize, m: usize, seed: u64) -> FusionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = FusionParams::init(dim, heads, &mut rng).unwrap();
    // Null pair at the same scale as the object keys so every key matters.
    for t in [&mut params.null_key, &mut params.null_value] {
        t.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    FusionInstance {
        query: random_vec(&mut rng, dim),
        objects: ObjectFeatureSet {
            features: random_matrix(&mut rng, m, dim),
            tags: (0..m).map(|k| format!("tag{k}")).collect(),
        },
        upstream: random_vec(&mut rng, dim),
        params,
    }
}

/// Worst relative error of `fuse_grad` (all parameters, the query and the
/// object rows) against central differences of `upstream . fuse(..)`.
pub fn fusion_fd_error(inst: &FusionInstance) -> f64 {
    let g = fuse_grad(&inst.query, &inst.objects, &inst.params, &inst.upstream).unwrap();
    let loss = |q: &[f64], o: &ObjectFeatureSet, p: &FusionParams| -> f64 {
        let u = fuse(q, o, p).unwrap();
        u.iter().zip(&inst.upstream).map(|(a, b)| a * b).sum()
    };
    let central = |f: &dyn Fn(f64) -> f64| (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
    let mut worst = 0.0f64;

    let analytic: Vec<Vec<f64>> = g.params.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    for (ti, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let n = central(&|h| {
                let mut p = inst.params.clone();
                p.tensors_mut()[ti][i] += h;
                loss(&inst.query, &inst.objects, &p)
            });
            worst = worst.max(rel_err(ai, n));
        }
    }
    for (i, &ai) in g.query.iter().enumerate() {
        let n = central(&|h| {
            let mut q = inst.query.clone();
            q[i] += h;
            loss(&q, &inst.objects, &inst.params)
        });
        worst = worst.max(rel_err(ai, n));
    }
    for (i, &ai) in g.objects.as_slice().iter().enumerate() {
        let n = central(&|h| {
            let mut o = inst.objects.clone();
            o.features.as_mut_slice()[i] += h;
            loss(&inst.query, &o, &inst.params)
        });
        worst = worst.max(rel_err(ai, n));
    }
    worst
}

fn tiny_decoder_config(layers: usize) -> DecoderConfig {
    DecoderConfig {
        layers,
        heads: 2,
        model_dim: 8,
        ff_dim: 16,
        max_len: 10,
        dropout: 0.0,
        fusion_heads: 2,
        ..DecoderConfig::default()
    }
}

pub const TINY_VOCAB: usize = 11;

/// Tiny decoder with weights spread well beyond the init scale so that no
/// gradient is negligible.
pub fn tiny_decoder(layers: usize, seed: u64) -> DecoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DecoderModel::new(&tiny_decoder_config(layers), TINY_VOCAB, 4, &mut rng).unwrap();
    for t in m.tensors_mut() {
        t.iter_mut().for_each(|x| *x += rng.random_range(-0.5..0.5));
    }
    m
}

pub fn tiny_prefix(seed: u64) -> PrefixInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PrefixInput {
        v: random_vec(&mut rng, 4),
        aux: Some(AuxInput {
            query: random_vec(&mut rng, 4),
            objects: ObjectFeatureSet {
                features: random_matrix(&mut rng, 2, 4),
                tags: vec!["a".into(), "b".into()],
            },
        }),
    }
}

/// Worst relative error over every parameter of a tiny decoder, with the
/// auxiliary token on so the fusion weights are included.
pub fn decoder_fd_error(layers: usize, seed: u64) -> f64 {
    let m = tiny_decoder(layers, seed);
    let p = tiny_prefix(seed + 1);
    let caption = [BOS, 4, 9, 6, 5, EOS];
    let mut grads = m.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dropout = Dropout {
        rate: 0.0,
        rng: &mut rng,
    };
    loss_and_backward(&m, &p, &caption, &mut dropout, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            let at = |delta: f64| {
                let mut probe = m.clone();
                probe.tensors_mut()[ti][i] += delta;
                reconstruction_loss(&probe, &p, &caption).unwrap()
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(ai, numeric));
        }
    }
    worst
}

/// Largest change in any logit row before position `k` when token `k` is
/// replaced, over every `k`.
pub fn causality_leak(seed: u64) -> f64 {
    let m = tiny_decoder(2, seed);
    let p = tiny_prefix(seed + 1);
    let base = [BOS, 4, 5, 6, 7, 8];
    let a = m.forward(&p, &base).unwrap();
    let mut worst = 0.0f64;
    for k in 1..base.len() {
        let mut toks = base;
        toks[k] = 10;
        let b = m.forward(&p, &toks).unwrap();
        for row in 0..p.len() + k {
            for (x, y) in a.row(row).iter().zip(b.row(row)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

pub struct OverfitResult {
    pub final_loss: f64,
    pub history: Vec<f64>,
    pub exact: usize,
    pub total: usize,
}

pub fn overfit_config() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        heads: 4,
        model_dim: 32,
        ff_dim: 128,
        max_len: 12,
        dropout: 0.0,
        fusion_heads: 4,
        learning_rate: 3e-3,
        epochs: 300,
        batch_size: 4,
        seed: 11,
    }
}

pub fn toy_examples(n: usize) -> (Vec<TrainingExample>, Vocabulary, ToyEncoderSpec) {
    let corpus = generate_toy_corpus(&ToyGrammar::default(), n).unwrap();
    let vocab = Vocabulary::build(&corpus, 1).unwrap();
    let spec = ToyEncoderSpec::default();
    let examples = corpus
        .iter()
        .map(|r| TrainingExample {
            prefix: PrefixInput {
                v: toy_text_encode(&r.tokens, &spec).unwrap(),
                aux: None,
            },
            caption: vocab.encode_caption(&r.tokens),
        })
        .collect();
    (examples, vocab, spec)
}

/// Trains on 16 toy captions and counts exact greedy reconstructions.
pub fn overfit_sixteen() -> OverfitResult {
    let (examples, vocab, spec) = toy_examples(16);
    let cfg = overfit_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DecoderModel::new(&cfg, vocab.len(), spec.dim, &mut rng).unwrap();
    let history: Vec<f64> = train_decoder(&mut model, &examples, &cfg)
        .unwrap()
        .iter()
        .map(|e| e.mean_loss)
        .collect();
    let exact = examples
        .iter()
        .filter(|ex| {
            let words = greedy_decode(&model, &ex.prefix).unwrap();
            words == ex.caption[1..ex.caption.len() - 1]
        })
        .count();
    OverfitResult {
        final_loss: *history.last().unwrap(),
        history,
        exact,
        total: examples.len(),
    }
}

pub fn random_support(rng: &mut ChaCha8Rng, n: usize, d: usize, tau: f64) -> SupportSet {
    let m = random_matrix(rng, n, d);
    SupportSet::new(
        &EmbeddingMatrix::from_matrix(&m).unwrap(),
        ProjectionConfig {
            temperature: tau,
            top_k: None,
        },
    )
    .unwrap()
}

fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = j;
        }
    }
    best
}

/// Over `instances` random supports and queries, counts how often the
/// weight argmax survives rescaling the query by a random positive factor.
pub fn argmax_scale_invariant_count(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .filter(|_| {
            let n = rng.random_range(2..40);
            let d = rng.random_range(2..16);
            let support = random_support(&mut rng, n, d, 0.01);
            let q = random_vec(&mut rng, d);
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
            argmax(&projection_weights(&q, &support).unwrap())
                == argmax(&projection_weights(&scaled, &support).unwrap())
        })
        .count()
}

/// Largest `|sum(w) - 1|` over random instances.
pub fn weight_sum_deviation(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let n = rng.random_range(1..60);
            let d = rng.random_range(2..16);
            let tau = 10f64.powf(rng.random_range(-3.0..1.0));
            let support = random_support(&mut rng, n, d, tau);
            let q = random_vec(&mut rng, d);
            let s: f64 = projection_weights(&q, &support).unwrap().iter().sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Ten hand-built candidate/reference pairs scored by `oracles/metrics.py`.
pub const METRIC_PAIRS: [(&str, &[&str]); 10] = [
    (
        "a dog runs on the grass",
        &["a dog is running on grass", "the dog runs across the grass"],
    ),
    ("the cat sat on the mat", &["the cat sat on a mat"]),
    (
        "a red car",
        &["a red car parked by the road", "red car on a street"],
    ),
    (
        "two men play football in a park",
        &[
            "two men playing football in the park",
            "men play soccer in a park",
        ],
    ),
    ("a bird", &["a small bird sits on a branch"]),
    (
        "the boat sails on the lake",
        &["a boat sailing on a lake", "the boat sails on the lake"],
    ),
    (
        "a woman holds an umbrella in the rain",
        &["a woman with an umbrella walks in the rain"],
    ),
    (
        "a bus a bus a bus",
        &["a yellow bus drives down the street", "a bus on the road"],
    ),
    ("horse", &["a brown horse in a field", "horse grazing"]),
    (
        "children are playing near the water",
        &[
            "kids play near the water",
            "children playing by the lake shore",
        ],
    ),
];

pub const ORACLE_BLEU4: f64 = 0.34778410661437986;
pub const ORACLE_ROUGE_L: f64 = 0.6611651588158924;
pub const ORACLE_CIDER_D: f64 = 2.9651013597852542;
pub const ORACLE_CIDER_D_PER_PAIR: [f64; 10] = [
    2.593171547308122,
    6.307035363278151,
    3.3115632812159013,
    3.2742810997263416,
    0.8797712513336302,
    5.750660449564332,
    3.447418449884137,
    0.72255035822252,
    1.3592866464825808,
    2.0052751508368303,
];

pub fn metric_pairs() -> Vec<EvalPair> {
    METRIC_PAIRS
        .iter()
        .map(|(c, r)| EvalPair::from_text(c, r))
        .collect()
}

/// Largest relative distance between a support row and its own projection
/// at `tau_proj = 1e-4`, over every row of a random support set.
pub fn self_projection_error(n: usize, d: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = random_support(&mut rng, n, d, 1e-4);
    let rows = support.features().clone();
    (0..n)
        .map(|j| {
            let out = project(rows.row(j), &support).unwrap();
            let diff: f64 = out
                .iter()
                .zip(rows.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            diff / norm(rows.row(j))
        })
        .fold(0.0, f64::max)
}

/// Whether projecting random queries onto a one-row support returns that
/// row bit for bit.
pub fn single_row_projection_is_exact(instances: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances).all(|_| {
        let d = rng.random_range(2..16);
        let support = random_support(&mut rng, 1, d, 0.01);
        let q = random_vec(&mut rng, d);
        project(&q, &support).unwrap() == support.features().row(0)
    })
}
