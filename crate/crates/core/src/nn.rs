//! Dense kernels and the transformer encoder stack shared by the MLM model
//! and the noun WSD classifier. Everything is row-major `f64`; rows are the
//! flattened `batch × seq` positions.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| dist.sample(rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A named collection of trainable tensors in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_elements(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors().iter().map(|(_, t)| t.zeros_like()).collect()
    }

    /// Round every value to the nearest `f32`, the on-disk precision.
    fn round_to_storage(&mut self) {
        for (_, t) in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Whether decoupled weight decay applies to a tensor. Biases (`b*`, `*_b`)
/// and layer-norm parameters (`*_g`, `*_b`) are excluded.
pub fn is_decayed(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf.starts_with('b') || leaf.ends_with("_b") || leaf.ends_with("_g") || leaf.ends_with("bias"))
}

/// `a [m×k] · b [k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row = |(i, o): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (oj, bj) in o.iter_mut().zip(br) {
                *oj += x * bj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    let row = |(i, o): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, oj) in o.iter_mut().enumerate() {
            *oj = dot(ar, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out [k×n] += aᵀ · b` with `a [m×k]`, `b [m×n]`.
pub fn add_matmul_at(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |(p, o): (usize, &mut [f64])| {
        for i in 0..m {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (oj, bj) in o.iter_mut().zip(br) {
                *oj += x * bj;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_col_sums(out: &mut [f64], x: &[f64]) {
    let n = out.len();
    for row in x.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Linear layer `x·W + b` on `rows` rows.
pub fn linear(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (k, n) = (w.shape[0], w.shape[1]);
    let mut y = matmul(x, &w.data, rows, k, n);
    add_bias(&mut y, &b.data);
    y
}

/// Accumulate gradients of a linear layer and return `dx`.
pub fn linear_backward(x: &[f64], w: &Tensor, dy: &[f64], rows: usize, dw: &mut Tensor, db: &mut Tensor) -> Vec<f64> {
    let (k, n) = (w.shape[0], w.shape[1]);
    add_matmul_at(&mut dw.data, x, dy, rows, k, n);
    add_col_sums(&mut db.data, dy);
    matmul_bt(dy, &w.data, rows, n, k)
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let h = g.len();
    let rows = x.len() / h;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * h..(r + 1) * h];
        let mean = xr.iter().sum::<f64>() / h as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..h {
            let xh = (xr[j] - mean) * rs;
            xhat[r * h + j] = xh;
            y[r * h + j] = g[j] * xh + b[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward(dy: &[f64], g: &[f64], cache: &NormCache, dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let h = g.len();
    let rows = dy.len() / h;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; h];
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..h {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= h as f64;
        mean_dx /= h as f64;
        let rs = cache.rstd[r];
        for j in 0..h {
            dx[r * h + j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Inverted dropout: a vector of `0` or `1/(1-p)` factors, or `None` when
/// dropout is inactive.
pub fn dropout_mask<R: Rng>(n: usize, p: f64, rng: Option<&mut R>) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
}

pub fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, f) in x.iter_mut().zip(m) {
            *v *= f;
        }
    }
}

/// Which residual arrangement the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormPlacement {
    #[default]
    PreNorm,
    PostNorm,
}

/// Parameters of one encoder block. Projection matrices are `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const LAYER_TENSOR_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

impl LayerParams {
    pub fn init<R: Rng>(hidden: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        let h = hidden;
        Self {
            wq: Tensor::normal(&[h, h], std, rng),
            bq: Tensor::zeros(&[h]),
            wk: Tensor::normal(&[h, h], std, rng),
            bk: Tensor::zeros(&[h]),
            wv: Tensor::normal(&[h, h], std, rng),
            bv: Tensor::zeros(&[h]),
            wo: Tensor::normal(&[h, h], std, rng),
            bo: Tensor::zeros(&[h]),
            ln1_g: Tensor::filled(&[h], 1.0),
            ln1_b: Tensor::zeros(&[h]),
            ln2_g: Tensor::filled(&[h], 1.0),
            ln2_b: Tensor::zeros(&[h]),
            w1: Tensor::normal(&[h, d_ff], std, rng),
            b1: Tensor::zeros(&[d_ff]),
            w2: Tensor::normal(&[d_ff, h], std, rng),
            b2: Tensor::zeros(&[h]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_g,
            &self.ln1_b, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo,
            &mut self.bo, &mut self.ln1_g, &mut self.ln1_b, &mut self.ln2_g, &mut self.ln2_b, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }

    pub fn hidden(&self) -> usize {
        self.wq.shape[0]
    }

    pub fn d_ff(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn param_count(hidden: usize, d_ff: usize) -> usize {
        4 * (hidden * hidden + hidden) + 4 * hidden + hidden * d_ff + d_ff + d_ff * hidden + hidden
    }
}

/// Static shape and behavior of an encoder stack.
#[derive(Debug, Clone, Copy)]
pub struct StackSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub placement: NormPlacement,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub input: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `[batch × heads × seq × seq]`
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub attn: AttentionCache,
    pub drop1: Option<Vec<f64>>,
    pub ln1: NormCache,
    pub ffn_in: Vec<f64>,
    pub h_pre: Vec<f64>,
    pub h_act: Vec<f64>,
    pub drop2: Option<Vec<f64>>,
    pub ln2: NormCache,
}

/// Multi-head self-attention with a key padding mask.
fn attention_forward(p: &LayerParams, x: &[f64], spec: &StackSpec, key_mask: &[bool]) -> (Vec<f64>, AttentionCache) {
    let (bsz, t, h) = (spec.batch, spec.seq_len, p.hidden());
    let rows = bsz * t;
    let heads = spec.heads;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, &p.wq, &p.bq, rows);
    let k = linear(x, &p.wk, &p.bk, rows);
    let v = linear(x, &p.wv, &p.bv, rows);

    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let mut probs = vec![0.0; heads * t * t];
            let mut ctx = vec![0.0; t * h];
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..t {
                    let qi = &q[(b * t + i) * h + off..(b * t + i) * h + off + dh];
                    let prow = &mut probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if key_mask[b * t + j] {
                            let kj = &k[(b * t + j) * h + off..(b * t + j) * h + off + dh];
                            prow[j] = dot(qi, kj) * scale;
                            max = max.max(prow[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..t {
                        if key_mask[b * t + j] {
                            prow[j] = (prow[j] - max).exp();
                            sum += prow[j];
                        } else {
                            prow[j] = 0.0;
                        }
                    }
                    if sum > 0.0 {
                        prow.iter_mut().for_each(|x| *x /= sum);
                    }
                    let ci = &mut ctx[i * h + off..i * h + off + dh];
                    for j in 0..t {
                        let pij = prow[j];
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &v[(b * t + j) * h + off..(b * t + j) * h + off + dh];
                        for (c, vv) in ci.iter_mut().zip(vj) {
                            *c += pij * vv;
                        }
                    }
                }
            }
            (probs, ctx)
        })
        .collect();

    let mut probs = Vec::with_capacity(bsz * heads * t * t);
    let mut ctx = Vec::with_capacity(rows * h);
    for (p_b, c_b) in per_batch {
        probs.extend(p_b);
        ctx.extend(c_b);
    }
    let out = linear(&ctx, &p.wo, &p.bo, rows);
    (out, AttentionCache { input: x.to_vec(), q, k, v, probs, ctx })
}

fn attention_backward(p: &LayerParams, c: &AttentionCache, d_out: &[f64], spec: &StackSpec, g: &mut LayerParams) -> Vec<f64> {
    let (bsz, t, h) = (spec.batch, spec.seq_len, p.hidden());
    let rows = bsz * t;
    let heads = spec.heads;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_ctx = linear_backward(&c.ctx, &p.wo, d_out, rows, &mut g.wo, &mut g.bo);

    let per_batch: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let mut dq = vec![0.0; t * h];
            let mut dk = vec![0.0; t * h];
            let mut dv = vec![0.0; t * h];
            let mut dp = vec![0.0; t];
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..t {
                    let prow = &c.probs[((b * heads + hd) * t + i) * t..((b * heads + hd) * t + i + 1) * t];
                    let dci = &d_ctx[(b * t + i) * h + off..(b * t + i) * h + off + dh];
                    let mut s = 0.0;
                    for j in 0..t {
                        if prow[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &c.v[(b * t + j) * h + off..(b * t + j) * h + off + dh];
                        dp[j] = dot(dci, vj);
                        s += prow[j] * dp[j];
                        let dvj = &mut dv[j * h + off..j * h + off + dh];
                        for (d, x) in dvj.iter_mut().zip(dci) {
                            *d += prow[j] * x;
                        }
                    }
                    let qi = &c.q[(b * t + i) * h + off..(b * t + i) * h + off + dh];
                    for j in 0..t {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let kj = &c.k[(b * t + j) * h + off..(b * t + j) * h + off + dh];
                        let dqi = &mut dq[i * h + off..i * h + off + dh];
                        for (d, x) in dqi.iter_mut().zip(kj) {
                            *d += ds * x;
                        }
                        let dkj = &mut dk[j * h + off..j * h + off + dh];
                        for (d, x) in dkj.iter_mut().zip(qi) {
                            *d += ds * x;
                        }
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = Vec::with_capacity(rows * h);
    let mut dk = Vec::with_capacity(rows * h);
    let mut dv = Vec::with_capacity(rows * h);
    for (a, b_, c_) in per_batch {
        dq.extend(a);
        dk.extend(b_);
        dv.extend(c_);
    }
    let mut dx = linear_backward(&c.input, &p.wq, &dq, rows, &mut g.wq, &mut g.bq);
    add_assign(&mut dx, &linear_backward(&c.input, &p.wk, &dk, rows, &mut g.wk, &mut g.bk));
    add_assign(&mut dx, &linear_backward(&c.input, &p.wv, &dv, rows, &mut g.wv, &mut g.bv));
    dx
}

fn ffn_forward(p: &LayerParams, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h_pre = linear(x, &p.w1, &p.b1, rows);
    let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
    let out = linear(&h_act, &p.w2, &p.b2, rows);
    (out, h_pre, h_act)
}

fn ffn_backward(p: &LayerParams, c: &LayerCache, d_out: &[f64], rows: usize, g: &mut LayerParams) -> Vec<f64> {
    let mut d_act = linear_backward(&c.h_act, &p.w2, d_out, rows, &mut g.w2, &mut g.b2);
    for (d, &x) in d_act.iter_mut().zip(&c.h_pre) {
        *d *= gelu_grad(x);
    }
    linear_backward(&c.ffn_in, &p.w1, &d_act, rows, &mut g.w1, &mut g.b1)
}

pub fn layer_forward<R: Rng>(
    p: &LayerParams,
    x: &[f64],
    spec: &StackSpec,
    key_mask: &[bool],
    mut rng: Option<&mut R>,
) -> (Vec<f64>, LayerCache) {
    let rows = spec.batch * spec.seq_len;
    match spec.placement {
        NormPlacement::PreNorm => {
            let (a_in, ln1) = layer_norm(x, &p.ln1_g.data, &p.ln1_b.data);
            let (mut attn_out, attn) = attention_forward(p, &a_in, spec, key_mask);
            let drop1 = dropout_mask(attn_out.len(), spec.dropout, rng.as_deref_mut());
            apply_mask(&mut attn_out, &drop1);
            let mut x_mid = x.to_vec();
            add_assign(&mut x_mid, &attn_out);
            let (ffn_in, ln2) = layer_norm(&x_mid, &p.ln2_g.data, &p.ln2_b.data);
            let (mut f_out, h_pre, h_act) = ffn_forward(p, &ffn_in, rows);
            let drop2 = dropout_mask(f_out.len(), spec.dropout, rng.as_deref_mut());
            apply_mask(&mut f_out, &drop2);
            add_assign(&mut x_mid, &f_out);
            (x_mid, LayerCache { attn, drop1, ln1, ffn_in, h_pre, h_act, drop2, ln2 })
        }
        NormPlacement::PostNorm => {
            let (mut attn_out, attn) = attention_forward(p, x, spec, key_mask);
            let drop1 = dropout_mask(attn_out.len(), spec.dropout, rng.as_deref_mut());
            apply_mask(&mut attn_out, &drop1);
            add_assign(&mut attn_out, x);
            let (ffn_in, ln1) = layer_norm(&attn_out, &p.ln1_g.data, &p.ln1_b.data);
            let (mut f_out, h_pre, h_act) = ffn_forward(p, &ffn_in, rows);
            let drop2 = dropout_mask(f_out.len(), spec.dropout, rng.as_deref_mut());
            apply_mask(&mut f_out, &drop2);
            add_assign(&mut f_out, &ffn_in);
            let (out, ln2) = layer_norm(&f_out, &p.ln2_g.data, &p.ln2_b.data);
            (out, LayerCache { attn, drop1, ln1, ffn_in, h_pre, h_act, drop2, ln2 })
        }
    }
}

/// Gradients of one block; returns `d_input` and accumulates into `g`.
pub fn layer_backward(p: &LayerParams, c: &LayerCache, d_out: &[f64], spec: &StackSpec, g: &mut LayerParams) -> Vec<f64> {
    let rows = spec.batch * spec.seq_len;
    match spec.placement {
        NormPlacement::PreNorm => {
            let mut d_x = d_out.to_vec();
            let mut d_f = d_out.to_vec();
            apply_mask(&mut d_f, &c.drop2);
            let d_ffn_in = ffn_backward(p, c, &d_f, rows, g);
            let d_ln2 = layer_norm_backward(&d_ffn_in, &p.ln2_g.data, &c.ln2, &mut g.ln2_g.data, &mut g.ln2_b.data);
            add_assign(&mut d_x, &d_ln2);
            let mut d_attn = d_x.clone();
            apply_mask(&mut d_attn, &c.drop1);
            let d_a_in = attention_backward(p, &c.attn, &d_attn, spec, g);
            let d_ln1 = layer_norm_backward(&d_a_in, &p.ln1_g.data, &c.ln1, &mut g.ln1_g.data, &mut g.ln1_b.data);
            add_assign(&mut d_x, &d_ln1);
            d_x
        }
        NormPlacement::PostNorm => {
            let d_s2 = layer_norm_backward(d_out, &p.ln2_g.data, &c.ln2, &mut g.ln2_g.data, &mut g.ln2_b.data);
            let mut d_f = d_s2.clone();
            apply_mask(&mut d_f, &c.drop2);
            let mut d_mid = ffn_backward(p, c, &d_f, rows, g);
            add_assign(&mut d_mid, &d_s2);
            let d_s1 = layer_norm_backward(&d_mid, &p.ln1_g.data, &c.ln1, &mut g.ln1_g.data, &mut g.ln1_b.data);
            let mut d_attn = d_s1.clone();
            apply_mask(&mut d_attn, &c.drop1);
            let mut d_x = attention_backward(p, &c.attn, &d_attn, spec, g);
            add_assign(&mut d_x, &d_s1);
            d_x
        }
    }
}

/// Per-layer caches plus the final normalization.
#[derive(Debug, Clone)]
pub struct StackCache {
    pub spec: StackSpec,
    pub layers: Vec<LayerCache>,
    pub final_ln: NormCache,
    /// Input of each layer followed by the pre-final-norm output.
    pub layer_outputs: Vec<Vec<f64>>,
}

/// Run `layers` then the final layer norm over `x` (`[rows × hidden]`).
pub fn stack_forward<R: Rng>(
    layers: &[LayerParams],
    final_g: &Tensor,
    final_b: &Tensor,
    x: Vec<f64>,
    spec: StackSpec,
    key_mask: &[bool],
    mut rng: Option<&mut R>,
) -> (Vec<f64>, StackCache) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut outputs = Vec::with_capacity(layers.len() + 1);
    let mut cur = x;
    for p in layers {
        let (next, c) = layer_forward(p, &cur, &spec, key_mask, rng.as_deref_mut());
        outputs.push(cur);
        caches.push(c);
        cur = next;
    }
    let (y, final_ln) = layer_norm(&cur, &final_g.data, &final_b.data);
    outputs.push(cur);
    (y, StackCache { spec, layers: caches, final_ln, layer_outputs: outputs })
}

/// Backward through the final norm and every layer; returns `d_x`.
pub fn stack_backward(
    layers: &[LayerParams],
    final_g: &Tensor,
    cache: &StackCache,
    d_y: &[f64],
    grads: &mut [LayerParams],
    d_final_g: &mut Tensor,
    d_final_b: &mut Tensor,
) -> Result<Vec<f64>> {
    if layers.len() != cache.layers.len() || grads.len() != layers.len() {
        return Err(Error::Shape(format!(
            "stack has {} layers, cache {}, gradients {}",
            layers.len(),
            cache.layers.len(),
            grads.len()
        )));
    }
    let mut d = layer_norm_backward(d_y, &final_g.data, &cache.final_ln, &mut d_final_g.data, &mut d_final_b.data);
    for i in (0..layers.len()).rev() {
        d = layer_backward(&layers[i], &cache.layers[i], &d, &cache.spec, &mut grads[i]);
    }
    Ok(d)
}
