//! Sequence-level building blocks with hand-written backward passes.
//! Sequences are `L x D` row-major matrices.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::{axpy, dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    /// `out x inp`, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            inp,
            out,
            w: vec![0.0; inp * out],
            b: vec![0.0; out],
        }
    }

    pub fn init<R: Rng>(inp: usize, out: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let mut l = Self::zeros(inp, out);
        l.w.iter_mut().for_each(|x| *x = dist.sample(rng));
        l
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|o| self.b[o] + dot(&self.w[o * self.inp..(o + 1) * self.inp], x))
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), self.out);
        for l in 0..x.rows() {
            let xr = x.row(l);
            for (o, yo) in y.row_mut(l).iter_mut().enumerate() {
                *yo = self.b[o] + dot(&self.w[o * self.inp..(o + 1) * self.inp], xr);
            }
        }
        y
    }

    /// Accumulates into `grad`; returns `dX`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        let mut dx = Matrix::zeros(x.rows(), self.inp);
        for l in 0..x.rows() {
            let xr = x.row(l);
            let dyr = dy.row(l);
            let dxr = dx.row_mut(l);
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad.b[o] += g;
                axpy(&mut grad.w[o * self.inp..(o + 1) * self.inp], g, xr);
                axpy(dxr, g, &self.w[o * self.inp..(o + 1) * self.inp]);
            }
        }
        dx
    }

    pub fn backward_vec(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            axpy(&mut grad.w[o * self.inp..(o + 1) * self.inp], g, x);
            axpy(&mut dx, g, &self.w[o * self.inp..(o + 1) * self.inp]);
        }
        dx
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: vec![0.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.cols();
        let mut y = Matrix::zeros(x.rows(), d);
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut rstd = Vec::with_capacity(x.rows());
        for l in 0..x.rows() {
            let r = x.row(l);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(l);
            for k in 0..d {
                xh[k] = (r[k] - mean) * rs;
            }
            let yr = y.row_mut(l);
            for k in 0..d {
                yr[k] = self.gain[k] * xhat.row(l)[k] + self.bias[k];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let mut dx = Matrix::zeros(dy.rows(), d);
        let mut dxhat = vec![0.0; d];
        for l in 0..dy.rows() {
            let xh = cache.xhat.row(l);
            let dyr = dy.row(l);
            for k in 0..d {
                grad.gain[k] += dyr[k] * xh[k];
                grad.bias[k] += dyr[k];
                dxhat[k] = dyr[k] * self.gain[k];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot(&dxhat, xh) / d as f64;
            let rs = cache.rstd[l];
            for (k, v) in dx.row_mut(l).iter_mut().enumerate() {
                *v = rs * (dxhat[k] - mean_d - xh[k] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Causal multi-head attention core on already-projected `q`, `k`, `v`.
/// Position `i` attends to positions `0..=i`.
pub struct CausalAttention {
    /// `heads` matrices of shape `L x L`; entries above the diagonal are 0.
    pub probs: Vec<Matrix>,
    pub context: Matrix,
}

pub fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> CausalAttention {
    let (len, d) = (q.rows(), q.cols());
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut context = Matrix::zeros(len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let span = h * hd..(h + 1) * hd;
        let mut p = Matrix::zeros(len, len);
        for i in 0..len {
            let qi = &q.row(i)[span.clone()];
            let row = &mut p.row_mut(i)[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[span.clone()]) * scale;
            }
            crate::linalg::softmax_in_place(row);
            let ctx = &mut context.row_mut(i)[span.clone()];
            for j in 0..=i {
                axpy(ctx, p.row(i)[j], &v.row(j)[span.clone()]);
            }
        }
        probs.push(p);
    }
    CausalAttention { probs, context }
}

/// Returns `(dq, dk, dv)`.
pub fn causal_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    d_context: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (len, d) = (q.rows(), q.cols());
    let heads = probs.len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Matrix::zeros(len, d);
    let mut dk = Matrix::zeros(len, d);
    let mut dv = Matrix::zeros(len, d);
    let mut dp = vec![0.0; len];
    for (h, p) in probs.iter().enumerate() {
        let span = h * hd..(h + 1) * hd;
        for i in 0..len {
            let dc = &d_context.row(i)[span.clone()];
            let pi = &p.row(i)[..=i];
            for j in 0..=i {
                dp[j] = dot(dc, &v.row(j)[span.clone()]);
                axpy(&mut dv.row_mut(j)[span.clone()], pi[j], dc);
            }
            let mean: f64 = (0..=i).map(|j| pi[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = pi[j] * (dp[j] - mean) * scale;
                if ds != 0.0 {
                    axpy(
                        &mut dq.row_mut(i)[span.clone()],
                        ds,
                        &k.row(j)[span.clone()],
                    );
                    axpy(
                        &mut dk.row_mut(j)[span.clone()],
                        ds,
                        &q.row(i)[span.clone()],
                    );
                }
            }
        }
    }
    (dq, dk, dv)
}
