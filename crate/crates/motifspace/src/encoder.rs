//! The chunk encoder and expander head.
//!
//! A chunk raster (128 x S) is read as S tokens of dimension 128, linearly
//! projected to `model_dim`, summed with fixed sinusoidal positions, passed
//! through post-norm Transformer layers, projected to the embedding
//! dimension per token, and pooled over tokens into one embedding `z`. The
//! expander is a plain ReLU MLP on `z` used only by the VICReg objective.
//!
//! Parameter names are flat dotted paths (`enc.input_proj.w`,
//! `enc.layers.3.ffn.lin1.b`, `exp.0.w`, ...); `enc.layers.` is the prefix
//! frozen by the `freeze_encoder` fine-tuning option.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, GradStore, LayerCache, Linear, ParamMut};
use crate::rng::Stream;
use crate::score::{rasterize, PianoRollChunk, N_PITCHES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    pub pooling: Pooling,
    /// Steps per bar the encoder expects; must match the dataset.
    pub steps_per_bar: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            model_dim: 256,
            n_heads: 8,
            ffn_dim: 1024,
            embed_dim: 128,
            pooling: Pooling::Mean,
            steps_per_bar: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.model_dim == 0
            || self.n_heads == 0
            || self.ffn_dim == 0
            || self.embed_dim == 0
            || self.steps_per_bar == 0
        {
            return Err(Error::Config("encoder dimensions must all be >= 1".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpanderConfig {
    pub hidden_dims: Vec<usize>,
    /// Expanded dimension `d'`.
    pub out_dim: usize,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        Self { hidden_dims: vec![512, 512], out_dim: 512 }
    }
}

impl ExpanderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("expander dimensions must all be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedEmbedding {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder_cfg: EncoderConfig,
    pub expander_cfg: ExpanderConfig,
    input_proj: Linear,
    pos: Array2<f64>,
    layers: Vec<EncoderLayer>,
    out_proj: Linear,
    expander: Vec<Linear>,
}

/// Everything the encoder backward pass needs for one chunk.
pub struct EncodeCache {
    tokens: Array2<f64>,
    layer_caches: Vec<LayerCache>,
    last_out: Array2<f64>,
    per_token: Array2<f64>,
    argmax: Option<Vec<usize>>,
}

/// Caches for the batched expander forward pass.
pub struct ExpanderCache {
    inputs: Vec<Array2<f64>>,
    pres: Vec<Array2<f64>>,
}

impl Model {
    /// Fresh Xavier-initialized model; all draws come from the `init`
    /// stream of `seed` in declaration order.
    pub fn init(encoder_cfg: EncoderConfig, expander_cfg: ExpanderConfig, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        expander_cfg.validate()?;
        let mut stream = Stream::new(seed, "init");
        let s_len = encoder_cfg.steps_per_bar as usize;
        let dim = encoder_cfg.model_dim;
        let input_proj = Linear::init(N_PITCHES, dim, &mut stream);
        let pos = crate::nn::positional_encoding(s_len, dim);
        let layers = (0..encoder_cfg.n_layers)
            .map(|_| EncoderLayer::init(dim, encoder_cfg.n_heads, encoder_cfg.ffn_dim, &mut stream))
            .collect();
        let out_proj = Linear::init(dim, encoder_cfg.embed_dim, &mut stream);
        let mut expander = Vec::new();
        let mut in_dim = encoder_cfg.embed_dim;
        for &h in &expander_cfg.hidden_dims {
            expander.push(Linear::init(in_dim, h, &mut stream));
            in_dim = h;
        }
        expander.push(Linear::init(in_dim, expander_cfg.out_dim, &mut stream));
        Ok(Self { encoder_cfg, expander_cfg, input_proj, pos, layers, out_proj, expander })
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.input_proj.visit("enc.input_proj", f);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("enc.layers.{i}"), f);
        }
        self.out_proj.visit("enc.out_proj", f);
        for (i, lin) in self.expander.iter_mut().enumerate() {
            lin.visit(&format!("exp.{i}"), f);
        }
    }

    fn check_chunk(&self, chunk: &PianoRollChunk) -> Result<()> {
        if chunk.steps_per_bar != self.encoder_cfg.steps_per_bar {
            return Err(Error::Config(format!(
                "chunk {} has S={} but the encoder expects S={}",
                chunk.origin_id, chunk.steps_per_bar, self.encoder_cfg.steps_per_bar
            )));
        }
        Ok(())
    }

    /// Forward pass for one chunk, keeping caches for backward.
    pub fn encode_forward(&self, chunk: &PianoRollChunk) -> Result<(Array1<f64>, EncodeCache)> {
        self.check_chunk(chunk)?;
        let raster = rasterize(chunk);
        let tokens = raster.t().to_owned();
        let mut x = self.input_proj.forward(&tokens) + &self.pos;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward(&x);
            layer_caches.push(cache);
            x = next;
        }
        let last_out = x;
        let per_token = self.out_proj.forward(&last_out);
        let (s_len, d) = per_token.dim();
        let (z, argmax) = match self.encoder_cfg.pooling {
            Pooling::Mean => {
                (per_token.sum_axis(ndarray::Axis(0)) / s_len as f64, None)
            }
            Pooling::Max => {
                let mut z = Array1::zeros(d);
                let mut arg = vec![0usize; d];
                for j in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    for t in 0..s_len {
                        if per_token[(t, j)] > best {
                            best = per_token[(t, j)];
                            arg[j] = t;
                        }
                    }
                    z[j] = best;
                }
                (z, Some(arg))
            }
        };
        Ok((z, EncodeCache { tokens, layer_caches, last_out, per_token, argmax }))
    }

    /// Backpropagates dL/dz for one chunk into `grads`.
    pub fn encode_backward(&self, dz: &Array1<f64>, cache: &EncodeCache, grads: &mut GradStore) {
        let (s_len, d) = cache.per_token.dim();
        let mut dh = Array2::zeros((s_len, d));
        match (&self.encoder_cfg.pooling, &cache.argmax) {
            (Pooling::Mean, _) => {
                let scale = 1.0 / s_len as f64;
                for t in 0..s_len {
                    for j in 0..d {
                        dh[(t, j)] = dz[j] * scale;
                    }
                }
            }
            (Pooling::Max, Some(arg)) => {
                for j in 0..d {
                    dh[(arg[j], j)] = dz[j];
                }
            }
            (Pooling::Max, None) => unreachable!("max pooling always caches argmax"),
        }
        let mut dx = self.out_proj.backward(&cache.last_out, &dh, "enc.out_proj", grads);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            dx = layer.backward(&dx, &cache.layer_caches[i], &format!("enc.layers.{i}"), grads);
        }
        self.input_proj.backward(&cache.tokens, &dx, "enc.input_proj", grads);
    }

    /// Batched expander forward: `(n, d) -> (n, d')` with ReLU between
    /// affine layers (none after the last).
    pub fn expand_forward(&self, z: &Array2<f64>) -> (Array2<f64>, ExpanderCache) {
        let mut x = z.clone();
        let mut inputs = Vec::with_capacity(self.expander.len());
        let mut pres = Vec::with_capacity(self.expander.len());
        let last = self.expander.len() - 1;
        for (i, lin) in self.expander.iter().enumerate() {
            inputs.push(x.clone());
            let pre = lin.forward(&x);
            x = if i < last { pre.mapv(|v| v.max(0.0)) } else { pre.clone() };
            pres.push(pre);
        }
        (x, ExpanderCache { inputs, pres })
    }

    /// Backward through the expander; returns dL/dz for the batch.
    pub fn expand_backward(
        &self,
        dout: &Array2<f64>,
        cache: &ExpanderCache,
        grads: &mut GradStore,
    ) -> Array2<f64> {
        let last = self.expander.len() - 1;
        let mut dx = dout.clone();
        for (i, lin) in self.expander.iter().enumerate().rev() {
            let dpre = if i < last {
                &dx * &cache.pres[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
            } else {
                dx
            };
            dx = lin.backward(&cache.inputs[i], &dpre, &format!("exp.{i}"), grads);
        }
        dx
    }

    /// Convenience accessor used by tests to construct degenerate heads.
    pub fn expander_layers_mut(&mut self) -> &mut Vec<Linear> {
        &mut self.expander
    }
}

/// Embeds one chunk (inference mode; no caches kept).
pub fn encode(chunk: &PianoRollChunk, model: &Model) -> Result<Embedding> {
    let (z, _) = model.encode_forward(chunk)?;
    Ok(Embedding { values: z.to_vec() })
}

/// Embeds a batch one chunk at a time; output order matches input order.
pub fn encode_batch(chunks: &[PianoRollChunk], model: &Model) -> Result<Vec<Embedding>> {
    chunks.iter().map(|c| encode(c, model)).collect()
}

/// Applies the expander head to one embedding.
pub fn expand(embedding: &Embedding, model: &Model) -> Result<ExpandedEmbedding> {
    if embedding.values.len() != model.encoder_cfg.embed_dim {
        return Err(Error::Config(format!(
            "embedding has dimension {}, expected {}",
            embedding.values.len(),
            model.encoder_cfg.embed_dim
        )));
    }
    let z = Array2::from_shape_vec((1, embedding.values.len()), embedding.values.clone())
        .expect("shape matches length");
    let (out, _) = model.expand_forward(&z);
    Ok(ExpandedEmbedding { values: out.row(0).to_vec() })
}
