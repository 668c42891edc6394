//! Patch projection, learned position table and a pre-norm transformer
//! encoder stack.
//!
//! Residual wiring per layer:
//!
//! ```text
//! x1 = x  + dropout(attn(ln1(x)))
//! x2 = x1 + dropout(ffn(ln2(x1)))      ffn(h) = gelu(h W1 + b1) W2 + b2
//! ```
//!
//! and a final layer norm after the last layer. With the attention output
//! projection and the second feed-forward matrix set to zero the stack reduces
//! to the final layer norm of its input.

use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dropout_mask, gelu, gelu_grad, init_normal, init_uniform, join, mean_rows, softmax_rows};
use super::{LayerNorm, LayerNormCache, Linear, Mat, Parameters};
use crate::error::{Error, Result};
use crate::trajectory::NUM_FEATURES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub num_patches: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            num_patches: 20,
            d_model: 256,
            heads: 16,
            layers: 3,
            d_ff: 512,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    /// Small configuration for CPU experiments.
    pub fn desk(patch_size: usize, num_patches: usize) -> Self {
        Self {
            patch_size,
            num_patches,
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            dropout: 0.1,
        }
    }

    pub fn patch_width(&self) -> usize {
        self.patch_size * NUM_FEATURES
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.patch_size == 0 || self.num_patches == 0 || self.layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`PatchEncoder`].
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        self.patch_width() * d + self.num_patches * d + d + self.layers * per_layer + 2 * d
    }
}

/// Whether dropout is active.
pub enum Mode<'a, R: Rng> {
    Eval,
    Train(&'a mut R),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    concat: Mat,
}

impl MultiHeadAttention {
    fn new<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            heads,
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    /// Floating-point operations of the `N^2` stage (scores, softmax and the
    /// weighted sum) for `n` tokens.
    pub fn quadratic_flops(&self, n: usize) -> u64 {
        let d = self.q.output_dim() as u64;
        let n = n as u64;
        4 * n * n * d + 3 * self.heads as u64 * n * n
    }

    fn forward(&self, x: &Mat) -> (Mat, AttentionCache) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let d = q.ncols();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = Mat::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(&concat);
        (
            out,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        )
    }

    fn backward(&self, cache: &AttentionCache, dout: &Mat, grad: &mut MultiHeadAttention) -> Mat {
        let dconcat = self.o.backward(&cache.concat, dout, &mut grad.o);
        let d = cache.q.ncols();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = Mat::zeros(cache.q.raw_dim());
        let mut dkm = Mat::zeros(cache.k.raw_dim());
        let mut dv = Mat::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let p = &cache.probs[h];
            let dho = dconcat.slice(cols);
            let dp = dho.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dho));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (p * &(dp - &row_dot)) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut dx = self.q.backward(&cache.x, &dq, &mut grad.q);
        dx += &self.k.backward(&cache.x, &dkm, &mut grad.k);
        dx += &self.v.backward(&cache.x, &dv, &mut grad.v);
        dx
    }
}

impl Parameters for MultiHeadAttention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.o.collect(&join(prefix, "o"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.o.collect_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    attn_drop: Option<Mat>,
    ln2: LayerNormCache,
    ff_in: Mat,
    ff_pre: Mat,
    ff_act: Mat,
    ff_drop: Option<Mat>,
}

impl EncoderLayer {
    fn new<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.heads, rng),
            ln2: LayerNorm::new(cfg.d_model),
            ff1: Linear::new(cfg.d_model, cfg.d_ff, rng),
            ff2: Linear::new(cfg.d_ff, cfg.d_model, rng),
        }
    }

    fn forward<R: Rng>(&self, x: &Mat, dropout: f64, mode: &mut Mode<'_, R>) -> (Mat, LayerCache) {
        let mut draw = |rows, cols| match mode {
            Mode::Train(rng) if dropout > 0.0 => Some(dropout_mask(rows, cols, dropout, *rng)),
            _ => None,
        };
        let (h1, ln1) = self.ln1.forward(x);
        let (mut a, attn) = self.attn.forward(&h1);
        let attn_drop = draw(a.nrows(), a.ncols());
        if let Some(m) = &attn_drop {
            a *= m;
        }
        let x1 = x + &a;
        let (ff_in, ln2) = self.ln2.forward(&x1);
        let ff_pre = self.ff1.forward(&ff_in);
        let ff_act = ff_pre.mapv(gelu);
        let mut f = self.ff2.forward(&ff_act);
        let ff_drop = draw(f.nrows(), f.ncols());
        if let Some(m) = &ff_drop {
            f *= m;
        }
        let x2 = x1 + &f;
        (
            x2,
            LayerCache {
                ln1,
                attn,
                attn_drop,
                ln2,
                ff_in,
                ff_pre,
                ff_act,
                ff_drop,
            },
        )
    }

    fn backward(&self, cache: &LayerCache, dx2: &Mat, grad: &mut EncoderLayer) -> Mat {
        let mut df = dx2.clone();
        if let Some(m) = &cache.ff_drop {
            df *= m;
        }
        let dact = self.ff2.backward(&cache.ff_act, &df, &mut grad.ff2);
        let dpre = dact * &cache.ff_pre.mapv(gelu_grad);
        let dff_in = self.ff1.backward(&cache.ff_in, &dpre, &mut grad.ff1);
        let dx1 = dx2 + &self.ln2.backward(&cache.ln2, &dff_in, &mut grad.ln2);
        let mut da = dx1.clone();
        if let Some(m) = &cache.attn_drop {
            da *= m;
        }
        let dh1 = self.attn.backward(&cache.attn, &da, &mut grad.attn);
        dx1 + &self.ln1.backward(&cache.ln1, &dh1, &mut grad.ln1)
    }
}

impl Parameters for EncoderLayer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.ff1.collect(&join(prefix, "ff1"), out);
        self.ff2.collect(&join(prefix, "ff2"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.ln1.collect_mut(out);
        self.attn.collect_mut(out);
        self.ln2.collect_mut(out);
        self.ff1.collect_mut(out);
        self.ff2.collect_mut(out);
    }
}

/// Projection, position table, mask token and transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub config: EncoderConfig,
    /// `(S * 6, d_model)`, no bias.
    pub patch_proj: Mat,
    /// `(N, d_model)`.
    pub pos: Mat,
    /// `(1, d_model)`, substituted for the projection of masked patches.
    pub mask_token: Mat,
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

/// Activations of one forward pass, consumed by [`PatchEncoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    input: Mat,
    masked: Vec<bool>,
    layers: Vec<LayerCache>,
    final_ln: LayerNormCache,
    pub output: Mat,
    /// Floating-point operations spent in the quadratic attention stage.
    pub attention_flops: u64,
}

impl PatchEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            patch_proj: init_uniform(config.patch_width(), d, rng),
            pos: init_normal(config.num_patches, d, 0.02, rng),
            mask_token: init_normal(1, d, 0.02, rng),
            layers: (0..config.layers).map(|_| EncoderLayer::new(&config, rng)).collect(),
            final_ln: LayerNorm::new(d),
            config,
        })
    }

    fn check_input(&self, patches: &Mat) -> Result<()> {
        let expected = (self.config.num_patches, self.config.patch_width());
        if patches.dim() != expected {
            return Err(Error::Shape(format!(
                "patch matrix {:?}, encoder expects {expected:?}",
                patches.dim()
            )));
        }
        Ok(())
    }

    /// `Y = P W_p + W_pos`; masked rows use the mask token instead of the
    /// projection, so their values never reach the encoder.
    pub fn embed_patches(&self, patches: &Mat, masked: Option<&[bool]>) -> Result<Mat> {
        self.check_input(patches)?;
        let mut y = patches.dot(&self.patch_proj);
        if let Some(masked) = masked {
            if masked.len() != patches.nrows() {
                return Err(Error::Shape(format!("mask of {} for {} patches", masked.len(), patches.nrows())));
            }
            for (i, _) in masked.iter().enumerate().filter(|(_, m)| **m) {
                y.row_mut(i).assign(&self.mask_token.row(0));
            }
        }
        y += &self.pos;
        Ok(y)
    }

    /// Runs the transformer stack on an embedded sequence.
    pub fn encode<R: Rng>(&self, y: &Mat, mode: &mut Mode<'_, R>) -> Result<(Mat, Vec<LayerCache>, LayerNormCache, u64)> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let mut x = y.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut flops = 0;
        for layer in &self.layers {
            flops += layer.attn.quadratic_flops(x.nrows());
            let (next, cache) = layer.forward(&x, self.config.dropout, mode);
            caches.push(cache);
            x = next;
        }
        let (out, ln) = self.final_ln.forward(&x);
        Ok((out, caches, ln, flops))
    }

    /// Full forward pass from patch values to contextual embeddings.
    pub fn forward<R: Rng>(&self, patches: &Mat, masked: Option<&[bool]>, mode: &mut Mode<'_, R>) -> Result<EncoderTrace> {
        let y = self.embed_patches(patches, masked)?;
        let (output, layers, final_ln, attention_flops) = self.encode(&y, mode)?;
        Ok(EncoderTrace {
            input: patches.clone(),
            masked: masked.map(<[bool]>::to_vec).unwrap_or_else(|| vec![false; patches.nrows()]),
            layers,
            final_ln,
            output,
            attention_flops,
        })
    }

    /// Deterministic contextual embeddings (dropout off).
    pub fn contextual(&self, patches: &Mat) -> Result<Mat> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(patches, None, &mut Mode::Eval)?.output)
    }

    /// Accumulates gradients of a loss with `dL/d output = d_output`.
    pub fn backward(&self, trace: &EncoderTrace, d_output: &Mat, grad: &mut PatchEncoder) {
        let mut dx = self.final_ln.backward(&trace.final_ln, d_output, &mut grad.final_ln);
        for (k, layer) in self.layers.iter().enumerate().rev() {
            dx = layer.backward(&trace.layers[k], &dx, &mut grad.layers[k]);
        }
        grad.pos += &dx;
        let mut visible = trace.input.clone();
        for (i, &m) in trace.masked.iter().enumerate() {
            if m {
                grad.mask_token.row_mut(0).scaled_add(1.0, &dx.row(i));
                visible.row_mut(i).fill(0.0);
            }
        }
        grad.patch_proj += &visible.t().dot(&dx);
    }
}

impl Parameters for PatchEncoder {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((join(prefix, "patch_proj"), &self.patch_proj));
        out.push((join(prefix, "pos"), &self.pos));
        out.push((join(prefix, "mask_token"), &self.mask_token));
        for (k, layer) in self.layers.iter().enumerate() {
            layer.collect(&join(prefix, &format!("layers.{k}")), out);
        }
        self.final_ln.collect(&join(prefix, "final_ln"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.patch_proj);
        out.push(&mut self.pos);
        out.push(&mut self.mask_token);
        for layer in &mut self.layers {
            layer.collect_mut(out);
        }
        self.final_ln.collect_mut(out);
    }
}

/// Arithmetic mean over the patch axis.
pub fn pool_representation(contextual: &Mat) -> Result<Vec<f64>> {
    if contextual.nrows() == 0 {
        return Err(Error::Precondition("cannot pool zero patches".into()));
    }
    Ok(mean_rows(contextual).row(0).to_vec())
}
