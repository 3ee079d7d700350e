//! Multi-head attention that pools object-tag features into one auxiliary
//! feature, using the image-side feature as the single query.
//!
//! Keys and values are the object rows projected by `W_K` / `W_V`, preceded by
//! a learned null key/value pair living directly in the projected space, so an
//! image with no detected objects still has one key to attend to.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, matvec_t_acc, outer_acc, softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub dim: usize,
    pub heads: usize,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub null_key: Vec<f64>,
    pub null_value: Vec<f64>,
}

impl FusionParams {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "fusion dim {dim} is not divisible by {heads} heads"
            )));
        }
        let sq = vec![0.0; dim * dim];
        Ok(Self {
            dim,
            heads,
            w_q: sq.clone(),
            w_k: sq.clone(),
            w_v: sq.clone(),
            w_o: sq,
            null_key: vec![0.0; dim],
            null_value: vec![0.0; dim],
        })
    }

    pub fn init<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dim, heads)?;
        let w = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let small = Normal::new(0.0, 0.02).expect("valid std");
        for t in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
            t.iter_mut().for_each(|x| *x = w.sample(rng));
        }
        for t in [&mut p.null_key, &mut p.null_value] {
            t.iter_mut().for_each(|x| *x = small.sample(rng));
        }
        Ok(p)
    }

    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        let mut p = Self::zeros(dim, heads)?;
        for t in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o] {
            for i in 0..dim {
                t[i * dim + i] = 1.0;
            }
        }
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tensors(&self) -> [(&'static str, &Vec<f64>); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("null_key", &self.null_key),
            ("null_value", &self.null_value),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.null_key,
            &mut self.null_value,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatureSet {
    pub features: Matrix,
    pub tags: Vec<String>,
}

impl ObjectFeatureSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dim),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Row `k` is the encoder output for `objects[k]`.
pub fn encode_objects(objects: &[String], encoder: &dyn TextEncoder) -> Result<ObjectFeatureSet> {
    let dim = encoder.dim();
    let mut rows = Vec::with_capacity(objects.len());
    for o in objects {
        let f = encoder.encode(o)?;
        if f.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "encoder returned {} values for {o:?}, expected {dim}",
                f.len()
            )));
        }
        rows.push(f);
    }
    let features = if rows.is_empty() {
        Matrix::zeros(0, dim)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(ObjectFeatureSet {
        features,
        tags: objects.to_vec(),
    })
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    q: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    /// `heads x (m+1)` attention weights; column 0 is the null key.
    attn: Matrix,
    concat: Vec<f64>,
}

impl FusionCache {
    pub fn attention(&self) -> &Matrix {
        &self.attn
    }
}

fn check_dims(query: &[f64], objects: &ObjectFeatureSet, params: &FusionParams) -> Result<()> {
    if query.len() != params.dim || objects.features.cols() != params.dim {
        return Err(Error::ShapeMismatch(format!(
            "fusion expects dim {}, got query {} and objects {}",
            params.dim,
            query.len(),
            objects.features.cols()
        )));
    }
    Ok(())
}

pub fn fuse_forward(
    query: &[f64],
    objects: &ObjectFeatureSet,
    params: &FusionParams,
) -> Result<(Vec<f64>, FusionCache)> {
    check_dims(query, objects, params)?;
    let d = params.dim;
    let hd = params.head_dim();
    let n_keys = objects.len() + 1;
    let scale = 1.0 / (hd as f64).sqrt();

    let q = matvec(&params.w_q, query, d, d);
    let mut keys = Matrix::zeros(n_keys, d);
    let mut values = Matrix::zeros(n_keys, d);
    keys.row_mut(0).copy_from_slice(&params.null_key);
    values.row_mut(0).copy_from_slice(&params.null_value);
    for (j, o) in objects.features.iter_rows().enumerate() {
        keys.row_mut(j + 1)
            .copy_from_slice(&matvec(&params.w_k, o, d, d));
        values
            .row_mut(j + 1)
            .copy_from_slice(&matvec(&params.w_v, o, d, d));
    }

    let mut attn = Matrix::zeros(params.heads, n_keys);
    let mut concat = vec![0.0; d];
    for h in 0..params.heads {
        let span = h * hd..(h + 1) * hd;
        let row = attn.row_mut(h);
        for (j, a) in row.iter_mut().enumerate() {
            *a = dot(&q[span.clone()], &keys.row(j)[span.clone()]) * scale;
        }
        softmax_in_place(row);
        for j in 0..n_keys {
            let a = attn.row(h)[j];
            for (c, v) in concat[span.clone()]
                .iter_mut()
                .zip(&values.row(j)[span.clone()])
            {
                *c += a * v;
            }
        }
    }
    let u = matvec(&params.w_o, &concat, d, d);
    Ok((
        u,
        FusionCache {
            q,
            keys,
            values,
            attn,
            concat,
        },
    ))
}

pub fn fuse(query: &[f64], objects: &ObjectFeatureSet, params: &FusionParams) -> Result<Vec<f64>> {
    Ok(fuse_forward(query, objects, params)?.0)
}

/// Gradients of a downstream loss through [`fuse`].
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub params: FusionParams,
    pub query: Vec<f64>,
    pub objects: Matrix,
    /// Contribution to `objects` arriving through the keys.
    pub objects_key_path: Matrix,
    /// Contribution to `objects` arriving through the values.
    pub objects_value_path: Matrix,
}

/// Accumulates parameter gradients into `grads` and returns the gradients
/// w.r.t. the query and each object row as `(query, key_path, value_path)`.
pub fn fuse_backward(
    cache: &FusionCache,
    query: &[f64],
    objects: &ObjectFeatureSet,
    params: &FusionParams,
    upstream: &[f64],
    grads: &mut FusionParams,
) -> (Vec<f64>, Matrix, Matrix) {
    let d = params.dim;
    let hd = params.head_dim();
    let n_keys = cache.keys.rows();
    let scale = 1.0 / (hd as f64).sqrt();

    outer_acc(&mut grads.w_o, upstream, &cache.concat);
    let mut d_concat = vec![0.0; d];
    matvec_t_acc(&mut d_concat, &params.w_o, upstream, d, d);

    let mut d_q = vec![0.0; d];
    let mut d_keys = Matrix::zeros(n_keys, d);
    let mut d_values = Matrix::zeros(n_keys, d);
    for h in 0..params.heads {
        let span = h * hd..(h + 1) * hd;
        let a = cache.attn.row(h);
        let dh = &d_concat[span.clone()];
        let da: Vec<f64> = (0..n_keys)
            .map(|j| dot(dh, &cache.values.row(j)[span.clone()]))
            .collect();
        let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        for j in 0..n_keys {
            for (dv, g) in d_values.row_mut(j)[span.clone()].iter_mut().zip(dh) {
                *dv += a[j] * g;
            }
            let dlogit = a[j] * (da[j] - mean) * scale;
            if dlogit != 0.0 {
                for (dq, k) in d_q[span.clone()]
                    .iter_mut()
                    .zip(&cache.keys.row(j)[span.clone()])
                {
                    *dq += dlogit * k;
                }
                for (dk, qv) in d_keys.row_mut(j)[span.clone()]
                    .iter_mut()
                    .zip(&cache.q[span.clone()])
                {
                    *dk += dlogit * qv;
                }
            }
        }
    }

    for (g, v) in grads.null_key.iter_mut().zip(d_keys.row(0)) {
        *g += v;
    }
    for (g, v) in grads.null_value.iter_mut().zip(d_values.row(0)) {
        *g += v;
    }
    let m = objects.len();
    let mut key_path = Matrix::zeros(m, d);
    let mut value_path = Matrix::zeros(m, d);
    for (j, o) in objects.features.iter_rows().enumerate() {
        outer_acc(&mut grads.w_k, d_keys.row(j + 1), o);
        outer_acc(&mut grads.w_v, d_values.row(j + 1), o);
        matvec_t_acc(key_path.row_mut(j), &params.w_k, d_keys.row(j + 1), d, d);
        matvec_t_acc(
            value_path.row_mut(j),
            &params.w_v,
            d_values.row(j + 1),
            d,
            d,
        );
    }

    outer_acc(&mut grads.w_q, &d_q, query);
    let mut d_query = vec![0.0; d];
    matvec_t_acc(&mut d_query, &params.w_q, &d_q, d, d);
    (d_query, key_path, value_path)
}

/// Gradients of `upstream · fuse(query, objects, params)`.
pub fn fuse_grad(
    query: &[f64],
    objects: &ObjectFeatureSet,
    params: &FusionParams,
    upstream: &[f64],
) -> Result<FusionGrads> {
    let (_, cache) = fuse_forward(query, objects, params)?;
    if upstream.len() != params.dim {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has dim {}",
            upstream.len()
        )));
    }
    let mut grads = FusionParams::zeros(params.dim, params.heads)?;
    let (d_query, key_path, value_path) =
        fuse_backward(&cache, query, objects, params, upstream, &mut grads);
    let mut total = key_path.clone();
    for (t, v) in total.as_mut_slice().iter_mut().zip(value_path.as_slice()) {
        *t += v;
    }
    Ok(FusionGrads {
        params: grads,
        query: d_query,
        objects: total,
        objects_key_path: key_path,
        objects_value_path: value_path,
    })
}
