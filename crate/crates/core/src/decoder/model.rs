use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    causal_attention, causal_attention_backward, gelu, gelu_grad, LayerNorm, LayerNormCache, Linear,
};
use crate::corpus::{BOS, PAD};
use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_forward, FusionCache, FusionParams, ObjectFeatureSet};
use crate::linalg::{axpy, log_sum_exp, Matrix};

/// Decoder hyperparameters. Architecture fields are fixed at model
/// construction; the rest drive [`super::train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub fusion_heads: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 256,
            ff_dim: 1024,
            max_len: 32,
            dropout: 0.1,
            fusion_heads: 4,
            learning_rate: 2e-4,
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return bad("decoder layers, heads, model_dim and ff_dim must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.max_len < 3 {
            return bad(format!(
                "max_len {} leaves no room for a caption",
                self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub fusion_heads: usize,
}

/// Image-side conditioning for one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixInput {
    /// Projected image feature, or the raw feature when projection is off.
    pub v: Vec<f64>,
    /// Query and object features for the auxiliary token; `None` when the
    /// auxiliary feature is disabled.
    pub aux: Option<AuxInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxInput {
    pub query: Vec<f64>,
    pub objects: ObjectFeatureSet,
}

impl PrefixInput {
    pub fn len(&self) -> usize {
        1 + usize::from(self.aux.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Pre-norm transformer decoder conditioned on one or two prefix tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub shape: ModelShape,
    /// `vocab x model_dim`
    pub tok_emb: Vec<f64>,
    /// `max_len x model_dim`
    pub pos_emb: Vec<f64>,
    pub prefix_v: Linear,
    pub prefix_u: Linear,
    pub fusion: FusionParams,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Borrowed view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

const INIT_STD: f64 = 0.02;

impl DecoderModel {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        let d = shape.model_dim;
        if shape.heads == 0 || !d.is_multiple_of(shape.heads) {
            return Err(Error::Config(format!(
                "model_dim {d} not divisible by {} heads",
                shape.heads
            )));
        }
        let block = Block {
            ln1: LayerNorm::zeros(d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            ff1: Linear::zeros(d, shape.ff_dim),
            ff2: Linear::zeros(shape.ff_dim, d),
        };
        Ok(Self {
            shape,
            tok_emb: vec![0.0; shape.vocab_size * d],
            pos_emb: vec![0.0; shape.max_len * d],
            prefix_v: Linear::zeros(shape.feature_dim, d),
            prefix_u: Linear::zeros(shape.feature_dim, d),
            fusion: FusionParams::zeros(shape.feature_dim, shape.fusion_heads)?,
            blocks: vec![block; shape.layers],
            ln_f: LayerNorm::zeros(d),
            head: Linear::zeros(d, shape.vocab_size),
        })
    }

    pub fn new<R: Rng>(
        cfg: &DecoderConfig,
        vocab_size: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let shape = ModelShape {
            vocab_size,
            feature_dim,
            model_dim: cfg.model_dim,
            ff_dim: cfg.ff_dim,
            layers: cfg.layers,
            heads: cfg.heads,
            max_len: cfg.max_len,
            fusion_heads: cfg.fusion_heads,
        };
        let d = shape.model_dim;
        let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
        let sample = |n: usize, rng: &mut R| -> Vec<f64> {
            (0..n)
                .map(|_| rand_distr::Distribution::sample(&normal, rng))
                .collect()
        };
        let tok_emb = sample(vocab_size * d, rng);
        let pos_emb = sample(shape.max_len * d, rng);
        let prefix_std = 1.0 / (feature_dim as f64).sqrt();
        let prefix_v = Linear::init(feature_dim, d, prefix_std, rng);
        let prefix_u = Linear::init(feature_dim, d, prefix_std, rng);
        let fusion = FusionParams::init(feature_dim, shape.fusion_heads, rng)?;
        let blocks = (0..shape.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: Linear::init(d, d, INIT_STD, rng),
                wk: Linear::init(d, d, INIT_STD, rng),
                wv: Linear::init(d, d, INIT_STD, rng),
                wo: Linear::init(d, d, INIT_STD, rng),
                ln2: LayerNorm::new(d),
                ff1: Linear::init(d, shape.ff_dim, INIT_STD, rng),
                ff2: Linear::init(shape.ff_dim, d, INIT_STD, rng),
            })
            .collect();
        let head = Linear::init(d, vocab_size, INIT_STD, rng);
        Ok(Self {
            shape,
            tok_emb,
            pos_emb,
            prefix_v,
            prefix_u,
            fusion,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape).expect("shape already validated")
    }

    /// All parameter tensors in a fixed order, named for checkpoints.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        self.tensor_layout()
            .into_iter()
            .map(|(name, rows, cols, data)| TensorView {
                name,
                rows,
                cols,
                data,
            })
            .collect()
    }

    fn tensor_layout(&self) -> Vec<(String, usize, usize, &[f64])> {
        let d = self.shape.model_dim;
        let fd = self.shape.feature_dim;
        let mut v: Vec<(String, usize, usize, &[f64])> = vec![
            ("tok_emb".into(), self.shape.vocab_size, d, &self.tok_emb),
            ("pos_emb".into(), self.shape.max_len, d, &self.pos_emb),
            ("prefix_v.w".into(), d, fd, &self.prefix_v.w),
            ("prefix_v.b".into(), 1, d, &self.prefix_v.b),
            ("prefix_u.w".into(), d, fd, &self.prefix_u.w),
            ("prefix_u.b".into(), 1, d, &self.prefix_u.b),
        ];
        for (name, t) in self.fusion.tensors() {
            let rows = if name.starts_with("null") { 1 } else { fd };
            v.push((format!("fusion.{name}"), rows, fd, t));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
                v.push((format!("blocks.{i}.{name}.gain"), 1, d, &ln.gain));
                v.push((format!("blocks.{i}.{name}.bias"), 1, d, &ln.bias));
            }
            for (name, l) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ff1", &b.ff1),
                ("ff2", &b.ff2),
            ] {
                v.push((format!("blocks.{i}.{name}.w"), l.out, l.inp, &l.w));
                v.push((format!("blocks.{i}.{name}.b"), 1, l.out, &l.b));
            }
        }
        v.push(("ln_f.gain".into(), 1, d, &self.ln_f.gain));
        v.push(("ln_f.bias".into(), 1, d, &self.ln_f.bias));
        v.push(("head.w".into(), self.head.out, self.head.inp, &self.head.w));
        v.push(("head.b".into(), 1, self.head.out, &self.head.b));
        v
    }

    /// Mutable tensors in the same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.prefix_v.w,
            &mut self.prefix_v.b,
            &mut self.prefix_u.w,
            &mut self.prefix_u.b,
        ];
        v.extend(self.fusion.tensors_mut());
        for b in &mut self.blocks {
            v.push(&mut b.ln1.gain);
            v.push(&mut b.ln1.bias);
            v.push(&mut b.ln2.gain);
            v.push(&mut b.ln2.bias);
            for l in [
                &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.ff1, &mut b.ff2,
            ] {
                v.push(&mut l.w);
                v.push(&mut l.b);
            }
        }
        v.push(&mut self.ln_f.gain);
        v.push(&mut self.ln_f.bias);
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &DecoderModel, scale: f64) {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            axpy(dst, scale, s);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// Inverted-dropout masks, drawn only when dropout is active.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        let data = (0..rows * cols)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Some(Matrix::from_vec(rows, cols, data).expect("mask shape"))
    }
}

fn apply_mask(x: &mut Matrix, mask: &Option<Matrix>) {
    if let Some(m) = mask {
        for (a, b) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a *= b;
        }
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    context: Matrix,
    drop1: Option<Matrix>,
    ln2: LayerNormCache,
    b: Matrix,
    h: Matrix,
    g: Matrix,
    drop2: Option<Matrix>,
}

pub struct ForwardCache {
    prefix_len: usize,
    tokens: Vec<usize>,
    fusion: Option<(Vec<f64>, FusionCache)>,
    drop_emb: Option<Matrix>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    y: Matrix,
}

impl ForwardCache {
    /// Attention probabilities of every layer and head.
    pub fn attention_maps(&self) -> impl Iterator<Item = &Matrix> {
        self.blocks.iter().flat_map(|b| b.probs.iter())
    }
}

impl DecoderModel {
    fn check_inputs(&self, prefix: &PrefixInput, tokens: &[usize]) -> Result<()> {
        let fd = self.shape.feature_dim;
        if prefix.v.len() != fd {
            return Err(Error::ShapeMismatch(format!(
                "prefix feature has dim {}, model expects {fd}",
                prefix.v.len()
            )));
        }
        if let Some(aux) = &prefix.aux {
            if aux.query.len() != fd || aux.objects.features.cols() != fd {
                return Err(Error::ShapeMismatch(format!(
                    "auxiliary inputs must have dim {fd}"
                )));
            }
        }
        if tokens.first() != Some(&BOS) {
            return Err(Error::Config("token sequence must start with BOS".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.shape.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.shape.vocab_size,
            });
        }
        let len = prefix.len() + tokens.len();
        if len > self.shape.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max_len: self.shape.max_len,
            });
        }
        Ok(())
    }

    /// Logits for every position of `[prefix.., BOS, w_1, ..]`.
    pub fn forward(&self, prefix: &PrefixInput, tokens: &[usize]) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut none = Dropout {
            rate: 0.0,
            rng: &mut rng,
        };
        Ok(self.forward_cached(prefix, tokens, &mut none)?.0)
    }

    pub fn forward_cached<R: Rng>(
        &self,
        prefix: &PrefixInput,
        tokens: &[usize],
        dropout: &mut Dropout<'_, R>,
    ) -> Result<(Matrix, ForwardCache)> {
        self.check_inputs(prefix, tokens)?;
        let d = self.shape.model_dim;
        let p = prefix.len();
        let len = p + tokens.len();

        let mut x = Matrix::zeros(len, d);
        x.row_mut(0)
            .copy_from_slice(&self.prefix_v.forward_vec(&prefix.v));
        let fusion = match &prefix.aux {
            Some(aux) => {
                let (u, cache) = fuse_forward(&aux.query, &aux.objects, &self.fusion)?;
                x.row_mut(1).copy_from_slice(&self.prefix_u.forward_vec(&u));
                Some((u, cache))
            }
            None => None,
        };
        for (k, &t) in tokens.iter().enumerate() {
            x.row_mut(p + k)
                .copy_from_slice(&self.tok_emb[t * d..(t + 1) * d]);
        }
        for i in 0..len {
            axpy(x.row_mut(i), 1.0, &self.pos_emb[i * d..(i + 1) * d]);
        }
        let drop_emb = dropout.mask(len, d);
        apply_mask(&mut x, &drop_emb);

        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (a, ln1) = blk.ln1.forward(&x);
            let q = blk.wq.forward(&a);
            let k = blk.wk.forward(&a);
            let v = blk.wv.forward(&a);
            let att = causal_attention(&q, &k, &v, self.shape.heads);
            let mut o = blk.wo.forward(&att.context);
            let drop1 = dropout.mask(len, d);
            apply_mask(&mut o, &drop1);
            axpy(x.as_mut_slice(), 1.0, o.as_slice());

            let (b, ln2) = blk.ln2.forward(&x);
            let h = blk.ff1.forward(&b);
            let mut g = h.clone();
            g.as_mut_slice().iter_mut().for_each(|z| *z = gelu(*z));
            let mut f = blk.ff2.forward(&g);
            let drop2 = dropout.mask(len, d);
            apply_mask(&mut f, &drop2);
            axpy(x.as_mut_slice(), 1.0, f.as_slice());

            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs: att.probs,
                context: att.context,
                drop1,
                ln2,
                b,
                h,
                g,
                drop2,
            });
        }
        let (y, ln_f) = self.ln_f.forward(&x);
        let logits = self.head.forward(&y);
        let cache = ForwardCache {
            prefix_len: p,
            tokens: tokens.to_vec(),
            fusion,
            drop_emb,
            blocks: caches,
            ln_f,
            y,
        };
        Ok((logits, cache))
    }

    /// Backpropagate `d_logits` and accumulate parameter gradients into `grads`.
    pub fn backward(
        &self,
        prefix: &PrefixInput,
        cache: &ForwardCache,
        d_logits: &Matrix,
        grads: &mut DecoderModel,
    ) {
        let d = self.shape.model_dim;
        let dy = self.head.backward(&cache.y, d_logits, &mut grads.head);
        let mut dx = self.ln_f.backward(&cache.ln_f, &dy, &mut grads.ln_f);

        for (blk, (bc, gb)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            let mut df = dx.clone();
            apply_mask(&mut df, &bc.drop2);
            let dg = blk.ff2.backward(&bc.g, &df, &mut gb.ff2);
            let mut dh = dg;
            for (z, &hv) in dh.as_mut_slice().iter_mut().zip(bc.h.as_slice()) {
                *z *= gelu_grad(hv);
            }
            let db = blk.ff1.backward(&bc.b, &dh, &mut gb.ff1);
            let dxb = blk.ln2.backward(&bc.ln2, &db, &mut gb.ln2);
            axpy(dx.as_mut_slice(), 1.0, dxb.as_slice());

            let mut d_o = dx.clone();
            apply_mask(&mut d_o, &bc.drop1);
            let d_ctx = blk.wo.backward(&bc.context, &d_o, &mut gb.wo);
            let (dq, dk, dv) = causal_attention_backward(&bc.q, &bc.k, &bc.v, &bc.probs, &d_ctx);
            let mut da = blk.wq.backward(&bc.a, &dq, &mut gb.wq);
            axpy(
                da.as_mut_slice(),
                1.0,
                blk.wk.backward(&bc.a, &dk, &mut gb.wk).as_slice(),
            );
            axpy(
                da.as_mut_slice(),
                1.0,
                blk.wv.backward(&bc.a, &dv, &mut gb.wv).as_slice(),
            );
            let dxa = blk.ln1.backward(&bc.ln1, &da, &mut gb.ln1);
            axpy(dx.as_mut_slice(), 1.0, dxa.as_slice());
        }

        apply_mask(&mut dx, &cache.drop_emb);
        for i in 0..dx.rows() {
            axpy(&mut grads.pos_emb[i * d..(i + 1) * d], 1.0, dx.row(i));
        }
        let p = cache.prefix_len;
        for (k, &t) in cache.tokens.iter().enumerate() {
            axpy(&mut grads.tok_emb[t * d..(t + 1) * d], 1.0, dx.row(p + k));
        }
        self.prefix_v
            .backward_vec(&prefix.v, dx.row(0), &mut grads.prefix_v);
        if let (Some(aux), Some((u, fcache))) = (&prefix.aux, &cache.fusion) {
            let du = self
                .prefix_u
                .backward_vec(u, dx.row(1), &mut grads.prefix_u);
            fuse_backward(
                fcache,
                &aux.query,
                &aux.objects,
                &self.fusion,
                &du,
                &mut grads.fusion,
            );
        }
    }
}

/// Loss positions: the row that sees `BOS` predicts `w_1`, ..., the row that
/// sees `w_n` predicts `EOS`. Returns `(row, target)` pairs, skipping PAD.
fn loss_targets(prefix_len: usize, caption: &[usize]) -> Vec<(usize, usize)> {
    (1..caption.len())
        .filter(|&k| caption[k] != PAD)
        .map(|k| (prefix_len + k - 1, caption[k]))
        .collect()
}

fn check_caption(caption: &[usize]) -> Result<()> {
    if caption.len() < 3 {
        return Err(Error::Empty(
            "caption has no tokens between BOS and EOS".into(),
        ));
    }
    Ok(())
}

/// Mean cross-entropy of a `BOS w_1 .. w_n EOS` caption.
pub fn reconstruction_loss(
    model: &DecoderModel,
    prefix: &PrefixInput,
    caption: &[usize],
) -> Result<f64> {
    check_caption(caption)?;
    let logits = model.forward(prefix, &caption[..caption.len() - 1])?;
    Ok(cross_entropy(&logits, &loss_targets(prefix.len(), caption)).0)
}

/// Mean cross-entropy over `targets` and its gradient w.r.t. the logits.
fn cross_entropy(logits: &Matrix, targets: &[(usize, usize)]) -> (f64, Matrix) {
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    if targets.is_empty() {
        return (0.0, d);
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for &(row, target) in targets {
        let z = logits.row(row);
        let lse = log_sum_exp(z);
        loss += lse - z[target];
        for (g, &zv) in d.row_mut(row).iter_mut().zip(z) {
            *g = (zv - lse).exp() / n;
        }
        d.row_mut(row)[target] -= 1.0 / n;
    }
    (loss / n, d)
}

/// Forward + backward for one caption; gradients are added into `grads`.
pub fn loss_and_backward<R: Rng>(
    model: &DecoderModel,
    prefix: &PrefixInput,
    caption: &[usize],
    dropout: &mut Dropout<'_, R>,
    grads: &mut DecoderModel,
) -> Result<f64> {
    check_caption(caption)?;
    let (logits, cache) = model.forward_cached(prefix, &caption[..caption.len() - 1], dropout)?;
    let (loss, d_logits) = cross_entropy(&logits, &loss_targets(prefix.len(), caption));
    model.backward(prefix, &cache, &d_logits, grads);
    Ok(loss)
}
