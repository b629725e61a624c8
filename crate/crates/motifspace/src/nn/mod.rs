//! Small-scale neural blocks in f64 with explicit caches and hand-written
//! backward passes.
//!
//! Everything operates on one sequence at a time: inputs are `(S, D)`
//! matrices of S tokens. Parameters are addressed by dotted names through
//! [`visit`]-style walkers (`ParamMut`), which gives the optimizer and the
//! checkpoint format a single flat, ordered view of the model.

mod adamw;

pub use adamw::AdamW;

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};

use crate::rng::Stream;

/// Mutable view of one named parameter tensor.
pub enum ParamMut<'a> {
    Mat(&'a mut Array2<f64>),
    Vec1(&'a mut Array1<f64>),
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradStore {
    mats: BTreeMap<String, Array2<f64>>,
    vecs: BTreeMap<String, Array1<f64>>,
}

impl GradStore {
    pub fn add_mat(&mut self, name: String, g: Array2<f64>) {
        match self.mats.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                self.mats.insert(name, g);
            }
        }
    }

    pub fn add_vec(&mut self, name: String, g: Array1<f64>) {
        match self.vecs.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                self.vecs.insert(name, g);
            }
        }
    }

    pub fn mat(&self, name: &str) -> Option<&Array2<f64>> {
        self.mats.get(name)
    }

    pub fn vec1(&self, name: &str) -> Option<&Array1<f64>> {
        self.vecs.get(name)
    }

    /// Flat view of a named gradient, if present.
    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.mats
            .get(name)
            .map(|m| m.as_slice().expect("gradients are standard layout"))
            .or_else(|| self.vecs.get(name).map(|v| v.as_slice().expect("contiguous")))
    }

    pub fn is_finite(&self) -> bool {
        self.mats.values().all(|m| m.iter().all(|x| x.is_finite()))
            && self.vecs.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Xavier-uniform matrix: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// drawn row by row.
pub fn xavier(fan_in: usize, fan_out: usize, stream: &mut Stream) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut w = Array2::zeros((fan_in, fan_out));
    for i in 0..fan_in {
        for j in 0..fan_out {
            w[(i, j)] = stream.f64_in(-a, a);
        }
    }
    w
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, stream: &mut Stream) -> Self {
        Self { w: xavier(in_dim, out_dim, stream), b: Array1::zeros(out_dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Returns dL/dx and records dL/dw, dL/db under `name`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dy: &Array2<f64>,
        name: &str,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        grads.add_mat(format!("{name}.w"), x.t().dot(dy));
        grads.add_vec(format!("{name}.b"), dy.sum_axis(Axis(0)));
        dy.dot(&self.w.t())
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&format!("{name}.w"), ParamMut::Mat(&mut self.w));
        f(&format!("{name}.b"), ParamMut::Vec1(&mut self.b));
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn init(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let (rows, cols) = x.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..cols {
                xhat[(i, j)] = (x[(i, j)] - mean) * inv;
            }
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &LnCache,
        name: &str,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let (rows, cols) = dy.dim();
        grads.add_vec(format!("{name}.gamma"), (dy * &cache.xhat).sum_axis(Axis(0)));
        grads.add_vec(format!("{name}.beta"), dy.sum_axis(Axis(0)));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros((rows, cols));
        for i in 0..rows {
            let m1 = dxhat.row(i).mean().unwrap();
            let m2 = dxhat
                .row(i)
                .iter()
                .zip(cache.xhat.row(i).iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / cols as f64;
            for j in 0..cols {
                dx[(i, j)] = cache.inv_std[i] * (dxhat[(i, j)] - m1 - cache.xhat[(i, j)] * m2);
            }
        }
        dx
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&format!("{name}.gamma"), ParamMut::Vec1(&mut self.gamma));
        f(&format!("{name}.beta"), ParamMut::Vec1(&mut self.beta));
    }
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn softmax_rows_backward(attn: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = attn * da;
    for i in 0..ds.nrows() {
        let dot = ds.row(i).sum();
        for j in 0..ds.ncols() {
            ds[(i, j)] -= attn[(i, j)] * dot;
        }
    }
    ds
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

#[derive(Debug)]
pub struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn init(dim: usize, n_heads: usize, stream: &mut Stream) -> Self {
        Self {
            wq: Linear::init(dim, dim, stream),
            wk: Linear::init(dim, dim, stream),
            wv: Linear::init(dim, dim, stream),
            wo: Linear::init(dim, dim, stream),
            n_heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let (s_len, dim) = x.dim();
        let dk = dim / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut attn = Vec::with_capacity(self.n_heads);
        let mut concat = Array2::zeros((s_len, dim));
        for h in 0..self.n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let ah = softmax_rows(&scores);
            concat.slice_mut(cols).assign(&ah.dot(&vh));
            attn.push(ah);
        }
        let out = self.wo.forward(&concat);
        (out, AttnCache { x: x.clone(), q, k, v, attn, concat })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &AttnCache,
        name: &str,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let (s_len, dim) = cache.x.dim();
        let dk = dim / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let dconcat = self.wo.backward(&cache.concat, dy, &format!("{name}.wo"), grads);
        let mut dq = Array2::zeros((s_len, dim));
        let mut dkm = Array2::zeros((s_len, dim));
        let mut dv = Array2::zeros((s_len, dim));
        for h in 0..self.n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let ah = &cache.attn[h];
            let doh = dconcat.slice(cols);
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let da = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&ah.t().dot(&doh));
            let ds = softmax_rows_backward(ah, &da) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dkm.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let mut dx = self.wq.backward(&cache.x, &dq, &format!("{name}.wq"), grads);
        dx += &self.wk.backward(&cache.x, &dkm, &format!("{name}.wk"), grads);
        dx += &self.wv.backward(&cache.x, &dv, &format!("{name}.wv"), grads);
        dx
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.wq.visit(&format!("{name}.wq"), f);
        self.wk.visit(&format!("{name}.wk"), f);
        self.wv.visit(&format!("{name}.wv"), f);
        self.wo.visit(&format!("{name}.wo"), f);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

#[derive(Debug)]
pub struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl FeedForward {
    pub fn init(dim: usize, hidden: usize, stream: &mut Stream) -> Self {
        Self { lin1: Linear::init(dim, hidden, stream), lin2: Linear::init(hidden, dim, stream) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let pre = self.lin1.forward(x);
        let hidden = pre.mapv(|v| v.max(0.0));
        let y = self.lin2.forward(&hidden);
        (y, FfnCache { x: x.clone(), pre, hidden })
    }

    pub fn backward(
        &self,
        dy: &Array2<f64>,
        cache: &FfnCache,
        name: &str,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let dh = self.lin2.backward(&cache.hidden, dy, &format!("{name}.lin2"), grads);
        let dpre = &dh * &cache.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.lin1.backward(&cache.x, &dpre, &format!("{name}.lin1"), grads)
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.lin1.visit(&format!("{name}.lin1"), f);
        self.lin2.visit(&format!("{name}.lin2"), f);
    }
}

/// Post-norm Transformer encoder layer:
/// `x = LN(x + MHA(x)); x = LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Debug)]
pub struct LayerCache {
    attn: AttnCache,
    ln1: LnCache,
    ffn: FfnCache,
    ln2: LnCache,
}

impl EncoderLayer {
    pub fn init(dim: usize, n_heads: usize, ffn_dim: usize, stream: &mut Stream) -> Self {
        Self {
            attn: MultiHeadAttention::init(dim, n_heads, stream),
            ln1: LayerNorm::init(dim),
            ffn: FeedForward::init(dim, ffn_dim, stream),
            ln2: LayerNorm::init(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerCache) {
        let (a, attn) = self.attn.forward(x);
        let y1 = x + &a;
        let (z1, ln1) = self.ln1.forward(&y1);
        let (f, ffn) = self.ffn.forward(&z1);
        let y2 = &z1 + &f;
        let (z2, ln2) = self.ln2.forward(&y2);
        (z2, LayerCache { attn, ln1, ffn, ln2 })
    }

    pub fn backward(
        &self,
        dz2: &Array2<f64>,
        cache: &LayerCache,
        name: &str,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let dy2 = self.ln2.backward(dz2, &cache.ln2, &format!("{name}.ln2"), grads);
        let dz1 = &dy2 + &self.ffn.backward(&dy2, &cache.ffn, &format!("{name}.ffn"), grads);
        let dy1 = self.ln1.backward(&dz1, &cache.ln1, &format!("{name}.ln1"), grads);
        &dy1 + &self.attn.backward(&dy1, &cache.attn, &format!("{name}.attn"), grads)
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.attn.visit(&format!("{name}.attn"), f);
        self.ln1.visit(&format!("{name}.ln1"), f);
        self.ffn.visit(&format!("{name}.ffn"), f);
        self.ln2.visit(&format!("{name}.ln2"), f);
    }
}

/// Fixed sinusoidal position table of shape `(s_len, dim)`.
pub fn positional_encoding(s_len: usize, dim: usize) -> Array2<f64> {
    let mut p = Array2::zeros((s_len, dim));
    for t in 0..s_len {
        for j in 0..dim {
            let angle = t as f64 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            p[(t, j)] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    p
}
