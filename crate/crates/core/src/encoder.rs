// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-LN Transformer encoder with a fully instrumented forward pass.
//!
//! Every layer is an attention sublayer followed by a feed-forward sublayer,
//! each closed by a residual add and a layer norm. Sublayers are numbered
//! `1..=2L` (attention of layer `l` is `2l - 1`, feed-forward is `2l`, with
//! `l` counted from 1); the optional embedding layer norm is sublayer `0`.
//!
//! [`Model::forward`] returns the output embeddings together with a
//! [`ForwardTrace`] holding every quantity the term decomposition needs:
//! layer-norm means and deviations, attention weights, and sublayer inputs.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ln_stats, matmul, softmax_rows, Activation, Matrix, Precision, Vector};

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_true() -> bool {
    true
}

fn default_segments() -> usize {
    2
}

/// Hyperparameters of an encoder. Field aliases accept the names used by
/// common BERT `config.json` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(alias = "num_hidden_layers")]
    pub layers: usize,
    #[serde(alias = "hidden_size")]
    pub hidden: usize,
    #[serde(alias = "num_attention_heads")]
    pub heads: usize,
    #[serde(alias = "intermediate_size")]
    pub ff_dim: usize,
    #[serde(alias = "vocab_size")]
    pub vocab: usize,
    #[serde(alias = "max_position_embeddings")]
    pub max_pos: usize,
    #[serde(alias = "type_vocab_size", default = "default_segments")]
    pub segments: usize,
    #[serde(alias = "layer_norm_eps", default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(alias = "hidden_act", default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub initial_ln: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layer count must be positive".into());
        }
        if self.hidden < 2 {
            return fail(format!("hidden size {} is below 2", self.hidden));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} is not divisible by head count {}",
                self.hidden, self.heads
            ));
        }
        if self.ff_dim == 0 || self.vocab == 0 || self.max_pos == 0 || self.segments == 0 {
            return fail("ff_dim, vocab, max_pos and segments must be positive".into());
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Number of residual sublayers, `2L`.
    #[inline]
    pub fn sublayers(&self) -> usize {
        2 * self.layers
    }

    /// Index of the lowest layer norm: 0 with an embedding LN, else 1.
    #[inline]
    pub fn first_ln(&self) -> usize {
        usize::from(!self.initial_ln)
    }
}

/// Gain and bias of one layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gain: Vector,
    pub bias: Vector,
}

impl LnParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// Weights of one encoder layer. Projections are stored `in x out` so that
/// row vectors multiply on the left; Q/K/V are fused `d x d` with head `h`
/// owning columns `[h * d/H, (h + 1) * d/H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub query_w: Matrix,
    pub query_b: Vector,
    pub key_w: Matrix,
    pub key_b: Vector,
    pub value_w: Matrix,
    pub value_b: Vector,
    pub attn_out_w: Matrix,
    pub attn_out_b: Vector,
    pub attn_ln: LnParams,
    pub ff_in_w: Matrix,
    pub ff_in_b: Vector,
    pub ff_out_w: Matrix,
    pub ff_out_b: Vector,
    pub ff_ln: LnParams,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let b = cfg.ff_dim;
        Self {
            query_w: Matrix::zeros(d, d),
            query_b: vec![0.0; d],
            key_w: Matrix::zeros(d, d),
            key_b: vec![0.0; d],
            value_w: Matrix::zeros(d, d),
            value_b: vec![0.0; d],
            attn_out_w: Matrix::zeros(d, d),
            attn_out_b: vec![0.0; d],
            attn_ln: LnParams::identity(d),
            ff_in_w: Matrix::zeros(d, b),
            ff_in_b: vec![0.0; b],
            ff_out_w: Matrix::zeros(b, d),
            ff_out_b: vec![0.0; d],
            ff_ln: LnParams::identity(d),
        }
    }
}

/// All learned weights of an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub word_emb: Matrix,
    pub pos_emb: Matrix,
    pub seg_emb: Matrix,
    pub initial_ln: Option<LnParams>,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Zero weights, unit gains, zero LN biases.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        Self {
            word_emb: Matrix::zeros(cfg.vocab, d),
            pos_emb: Matrix::zeros(cfg.max_pos, d),
            seg_emb: Matrix::zeros(cfg.segments, d),
            initial_ln: cfg.initial_ln.then(|| LnParams::identity(d)),
            layers: (0..cfg.layers).map(|_| LayerParams::zeros(cfg)).collect(),
        }
    }

    /// Layer norm closing sublayer `lambda` (0 is the embedding LN).
    pub fn ln(&self, lambda: usize) -> Option<&LnParams> {
        if lambda == 0 {
            return self.initial_ln.as_ref();
        }
        let layer = self.layers.get((lambda - 1) / 2)?;
        Some(if lambda % 2 == 1 {
            &layer.attn_ln
        } else {
            &layer.ff_ln
        })
    }

    /// Bias added by the sublayer function of sublayer `lambda` once the
    /// attention weights (which sum to one) absorb the value bias:
    /// `b_O + concat_h(b_V,h) W_O` for attention, `b_FF,O` for feed-forward.
    pub fn sublayer_bias(&self, lambda: usize) -> Result<Vector> {
        if lambda == 0 || lambda > 2 * self.layers.len() {
            return Err(Error::CutRange {
                cut: lambda,
                depth: 2 * self.layers.len(),
            });
        }
        let layer = &self.layers[(lambda - 1) / 2];
        if lambda % 2 == 1 {
            let mut b = crate::tensor::vecmat(&layer.value_b, &layer.attn_out_w)?;
            for (x, o) in b.iter_mut().zip(&layer.attn_out_b) {
                *x += o;
            }
            Ok(b)
        } else {
            Ok(layer.ff_out_b.clone())
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.hidden;
        let b = cfg.ff_dim;
        let check_m = |name: String, m: &Matrix, r: usize, c: usize| -> Result<()> {
            if m.shape() != (r, c) {
                return Err(Error::Config(format!(
                    "{name} has shape {}x{}, expected {r}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name));
            }
            Ok(())
        };
        let check_v = |name: String, v: &[f64], n: usize| -> Result<()> {
            if v.len() != n {
                return Err(Error::Config(format!(
                    "{name} has length {}, expected {n}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
            Ok(())
        };
        check_m("word_emb".into(), &self.word_emb, cfg.vocab, d)?;
        check_m("pos_emb".into(), &self.pos_emb, cfg.max_pos, d)?;
        check_m("seg_emb".into(), &self.seg_emb, cfg.segments, d)?;
        match (&self.initial_ln, cfg.initial_ln) {
            (Some(ln), true) => {
                check_v("initial_ln.gain".into(), &ln.gain, d)?;
                check_v("initial_ln.bias".into(), &ln.bias, d)?;
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Config(
                    "parameters carry an embedding LN but config.initial_ln is false".into(),
                ))
            }
            (None, true) => {
                return Err(Error::Config(
                    "config.initial_ln is true but no embedding LN parameters are present".into(),
                ))
            }
        }
        if self.layers.len() != cfg.layers {
            return Err(Error::Config(format!(
                "{} layers present, config expects {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        for (l, p) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer {l} {s}");
            check_m(n("query_w"), &p.query_w, d, d)?;
            check_m(n("key_w"), &p.key_w, d, d)?;
            check_m(n("value_w"), &p.value_w, d, d)?;
            check_m(n("attn_out_w"), &p.attn_out_w, d, d)?;
            check_m(n("ff_in_w"), &p.ff_in_w, d, b)?;
            check_m(n("ff_out_w"), &p.ff_out_w, b, d)?;
            check_v(n("query_b"), &p.query_b, d)?;
            check_v(n("key_b"), &p.key_b, d)?;
            check_v(n("value_b"), &p.value_b, d)?;
            check_v(n("attn_out_b"), &p.attn_out_b, d)?;
            check_v(n("ff_in_b"), &p.ff_in_b, b)?;
            check_v(n("ff_out_b"), &p.ff_out_b, d)?;
            check_v(n("attn_ln.gain"), &p.attn_ln.gain, d)?;
            check_v(n("attn_ln.bias"), &p.attn_ln.bias, d)?;
            check_v(n("ff_ln.gain"), &p.ff_ln.gain, d)?;
            check_v(n("ff_ln.bias"), &p.ff_ln.bias, d)?;
        }
        Ok(())
    }

    /// Applies `f` to every weight matrix and vector.
    pub fn map_tensors(&self, f: impl Fn(f64) -> f64) -> Self {
        let mv = |v: &Vector| v.iter().map(|&x| f(x)).collect::<Vector>();
        let ml = |ln: &LnParams| LnParams {
            gain: mv(&ln.gain),
            bias: mv(&ln.bias),
        };
        Self {
            word_emb: self.word_emb.map(&f),
            pos_emb: self.pos_emb.map(&f),
            seg_emb: self.seg_emb.map(&f),
            initial_ln: self.initial_ln.as_ref().map(ml),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    query_w: p.query_w.map(&f),
                    query_b: mv(&p.query_b),
                    key_w: p.key_w.map(&f),
                    key_b: mv(&p.key_b),
                    value_w: p.value_w.map(&f),
                    value_b: mv(&p.value_b),
                    attn_out_w: p.attn_out_w.map(&f),
                    attn_out_b: mv(&p.attn_out_b),
                    attn_ln: ml(&p.attn_ln),
                    ff_in_w: p.ff_in_w.map(&f),
                    ff_in_b: mv(&p.ff_in_b),
                    ff_out_w: p.ff_out_w.map(&f),
                    ff_out_b: mv(&p.ff_out_b),
                    ff_ln: ml(&p.ff_ln),
                })
                .collect(),
        }
    }

    /// Rounds weights to the given storage precision.
    pub fn rounded(&self, precision: Precision) -> Self {
        match precision {
            Precision::F64 => self.clone(),
            Precision::F32 => self.map_tensors(crate::tensor::round_f32),
        }
    }
}

/// Per-head slices of the fused Q/K/V projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub columns: Range<usize>,
    pub query_w: Matrix,
    pub query_b: Vector,
    pub key_w: Matrix,
    pub key_b: Vector,
    pub value_w: Matrix,
    pub value_b: Vector,
}

/// Splits the fused projections of `layer` (0-based) into per-head blocks.
pub fn split_heads(params: &ModelParams, cfg: &ModelConfig, layer: usize) -> Result<Vec<HeadWeights>> {
    let p = params.layers.get(layer).ok_or(Error::Index {
        what: "layer",
        position: 0,
        value: layer,
        bound: params.layers.len(),
    })?;
    let dh = cfg.head_dim();
    Ok((0..cfg.heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            HeadWeights {
                query_w: p.query_w.column_slice(cols.start, cols.end),
                query_b: p.query_b[cols.clone()].to_vec(),
                key_w: p.key_w.column_slice(cols.start, cols.end),
                key_b: p.key_b[cols.clone()].to_vec(),
                value_w: p.value_w.column_slice(cols.start, cols.end),
                value_b: p.value_b[cols.clone()].to_vec(),
                columns: cols,
            }
        })
        .collect())
}

/// Layer-norm statistics of one sublayer, one entry per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Trace of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// One `n x n` weight matrix per head; rows sum to one.
    pub(crate) attention: Vec<Matrix>,
    /// Input to the attention sublayer (the vectors entering the value projections).
    pub(crate) attn_input: Matrix,
    pub(crate) attn_ln: LnStats,
    /// Input to the feed-forward sublayer (output of the attention LN).
    pub(crate) ff_input: Matrix,
    pub(crate) ff_ln: LnStats,
}

/// Everything recorded during a forward pass. Immutable once returned.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub(crate) input: Matrix,
    pub(crate) initial_ln: Option<LnStats>,
    pub(crate) initial_output: Option<Matrix>,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) embeddings: Matrix,
}

impl ForwardTrace {
    /// Sequence length.
    pub fn tokens(&self) -> usize {
        self.input.rows()
    }

    /// Number of residual sublayers traced, `2L`.
    pub fn depth(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn has_initial_ln(&self) -> bool {
        self.initial_ln.is_some()
    }

    /// Raw input sum `word + position + segment`, before any layer norm.
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Statistics of the layer norm closing sublayer `lambda`.
    pub fn ln_stats(&self, lambda: usize) -> Option<&LnStats> {
        if lambda == 0 {
            return self.initial_ln.as_ref();
        }
        let layer = self.layers.get((lambda - 1) / 2)?;
        Some(if lambda % 2 == 1 {
            &layer.attn_ln
        } else {
            &layer.ff_ln
        })
    }

    /// Attention weights of head `head` in layer `layer` (both 0-based).
    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer].attention[head]
    }

    pub fn heads(&self, layer: usize) -> &[Matrix] {
        &self.layers[layer].attention
    }

    pub fn attn_input(&self, layer: usize) -> &Matrix {
        &self.layers[layer].attn_input
    }

    pub fn ff_input(&self, layer: usize) -> &Matrix {
        &self.layers[layer].ff_input
    }

    /// Final output embeddings, one row per token.
    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Representation after the layer norm of sublayer `cut`. Cut 0 is the
    /// embedding LN output, or the raw input sum when the model has none.
    pub fn representation(&self, cut: usize) -> Result<&Matrix> {
        let depth = self.depth();
        if cut > depth {
            return Err(Error::CutRange { cut, depth });
        }
        Ok(if cut == 0 {
            self.initial_output.as_ref().unwrap_or(&self.input)
        } else if cut == depth {
            &self.embeddings
        } else if cut % 2 == 1 {
            &self.layers[(cut - 1) / 2].ff_input
        } else {
            &self.layers[cut / 2].attn_input
        })
    }

    /// Replaces the attention weights of one head. Used to build synthetic
    /// traces for superposition checks.
    pub fn with_attention(mut self, layer: usize, head: usize, weights: Matrix) -> Self {
        self.layers[layer].attention[head] = weights;
        self
    }
}

/// A configuration together with validated weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    /// Row `t` is `word[id_t] + pos[t] + seg[seg_t]`.
    pub fn embed_inputs(&self, tokens: &[u32], segments: Option<&[u32]>) -> Result<Matrix> {
        embed_inputs(&self.params, &self.config, tokens, segments)
    }

    pub fn forward(&self, tokens: &[u32], segments: Option<&[u32]>) -> Result<(Matrix, ForwardTrace)> {
        forward(&self.params, &self.config, tokens, segments)
    }
}

pub fn embed_inputs(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    segments: Option<&[u32]>,
) -> Result<Matrix> {
    let n = tokens.len();
    if let Some(seg) = segments {
        if seg.len() != n {
            return Err(Error::Length {
                op: "embed_inputs (tokens vs segments)",
                left: n,
                right: seg.len(),
            });
        }
    }
    if n > cfg.max_pos {
        return Err(Error::Index {
            what: "sequence length",
            position: n - 1,
            value: n,
            bound: cfg.max_pos,
        });
    }
    let d = cfg.hidden;
    let mut out = Matrix::zeros(n, d);
    for (t, &id) in tokens.iter().enumerate() {
        let id = id as usize;
        if id >= cfg.vocab {
            return Err(Error::Index {
                what: "token id",
                position: t,
                value: id,
                bound: cfg.vocab,
            });
        }
        let s = segments.map_or(0, |s| s[t] as usize);
        if s >= cfg.segments {
            return Err(Error::Index {
                what: "segment id",
                position: t,
                value: s,
                bound: cfg.segments,
            });
        }
        let (w, p, g) = (params.word_emb.row(id), params.pos_emb.row(t), params.seg_emb.row(s));
        for (j, x) in out.row_mut(t).iter_mut().enumerate() {
            *x = w[j] + p[j] + g[j];
        }
    }
    Ok(out)
}

/// Applies a layer norm row by row, returning outputs and statistics.
fn layer_norm(x: &Matrix, ln: &LnParams, eps: f64) -> (Matrix, LnStats) {
    let n = x.rows();
    let mut out = Matrix::zeros(n, x.cols());
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for t in 0..n {
        let (m, s) = ln_stats(x.row(t), eps);
        for (j, y) in out.row_mut(t).iter_mut().enumerate() {
            *y = ln.gain[j] * ((x.get(t, j) - m) / s) + ln.bias[j];
        }
        mean.push(m);
        std.push(s);
    }
    (out, LnStats { mean, std })
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut y = matmul(x, w)?;
    y.add_row_vector(b);
    Ok(y)
}

fn numeric(sublayer: usize, stage: &'static str) -> impl Fn(Error) -> Error {
    move |_| Error::Numeric { sublayer, stage }
}

fn ensure_finite(m: &Matrix, sublayer: usize, stage: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { sublayer, stage })
    }
}

/// Multi-head attention without the output projection: returns the
/// concatenated head outputs and the per-head weights.
fn attention_heads(x: &Matrix, p: &LayerParams, cfg: &ModelConfig, sublayer: usize) -> Result<(Matrix, Vec<Matrix>)> {
    let q = affine(x, &p.query_w, &p.query_b).map_err(numeric(sublayer, "query"))?;
    let k = affine(x, &p.key_w, &p.key_b).map_err(numeric(sublayer, "key"))?;
    let v = affine(x, &p.value_w, &p.value_b).map_err(numeric(sublayer, "value"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(x.rows(), cfg.hidden);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = q.column_slice(a, b);
        let kh = k.column_slice(a, b);
        let vh = v.column_slice(a, b);
        let scores = matmul(&qh, &kh.transpose())
            .map_err(numeric(sublayer, "attention scores"))?
            .scale(scale);
        let alpha = softmax_rows(&scores);
        ensure_finite(&alpha, sublayer, "attention weights")?;
        let head_out = matmul(&alpha, &vh).map_err(numeric(sublayer, "attention output"))?;
        concat.set_columns(a, &head_out);
        weights.push(alpha);
    }
    Ok((concat, weights))
}

/// Runs the encoder and records a complete trace.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    segments: Option<&[u32]>,
) -> Result<(Matrix, ForwardTrace)> {
    if params.layers.len() != cfg.layers || params.initial_ln.is_some() != cfg.initial_ln {
        return Err(Error::Config("parameters do not match the model configuration".into()));
    }
    let input = embed_inputs(params, cfg, tokens, segments)?;
    ensure_finite(&input, 0, "input embedding")?;
    let eps = cfg.ln_eps;

    let (mut x, initial_ln, initial_output) = match &params.initial_ln {
        Some(ln) => {
            let (y, stats) = layer_norm(&input, ln, eps);
            ensure_finite(&y, 0, "layer norm")?;
            (y.clone(), Some(stats), Some(y))
        }
        None => (input.clone(), None, None),
    };

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, p) in params.layers.iter().enumerate() {
        let attn_sub = 2 * l + 1;
        let ff_sub = 2 * l + 2;

        let attn_input = x;
        let (concat, attention) = attention_heads(&attn_input, p, cfg, attn_sub)?;
        let mut resid = affine(&concat, &p.attn_out_w, &p.attn_out_b).map_err(numeric(attn_sub, "output projection"))?;
        resid.add_assign(&attn_input)?;
        let (ff_input, attn_ln) = layer_norm(&resid, &p.attn_ln, eps);
        ensure_finite(&ff_input, attn_sub, "layer norm")?;

        let hidden = affine(&ff_input, &p.ff_in_w, &p.ff_in_b)
            .map_err(numeric(ff_sub, "inner projection"))?
            .map(|v| cfg.activation.apply(v));
        ensure_finite(&hidden, ff_sub, "activation")?;
        let mut resid = affine(&hidden, &p.ff_out_w, &p.ff_out_b).map_err(numeric(ff_sub, "outer projection"))?;
        resid.add_assign(&ff_input)?;
        let (out, ff_ln) = layer_norm(&resid, &p.ff_ln, eps);
        ensure_finite(&out, ff_sub, "layer norm")?;

        layers.push(LayerTrace {
            attention,
            attn_input,
            attn_ln,
            ff_input,
            ff_ln,
        });
        x = out;
    }

    let trace = ForwardTrace {
        input,
        initial_ln,
        initial_output,
        layers,
        embeddings: x.clone(),
    };
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{random_model, ToySpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(layers: usize, hidden: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            layers,
            hidden,
            heads,
            ff_dim: 2 * hidden,
            vocab: 11,
            max_pos: 16,
            segments: 2,
            ln_eps: 1e-12,
            activation: Activation::Gelu,
            initial_ln: true,
        }
    }

    /// Unoptimised reference forward pass written with explicit loops.
    fn reference_forward(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
        let cfg = &model.config;
        let p = &model.params;
        let d = cfg.hidden;
        let n = tokens.len();
        let ln = |x: &Vec<f64>, g: &[f64], b: &[f64]| -> Vec<f64> {
            let m: f64 = x.iter().sum::<f64>() / d as f64;
            let v: f64 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            let s = (v + cfg.ln_eps).sqrt();
            (0..d).map(|j| g[j] * (x[j] - m) / s + b[j]).collect()
        };
        let lin = |x: &[f64], w: &Matrix, b: &[f64]| -> Vec<f64> {
            (0..w.cols())
                .map(|j| b[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
                .collect()
        };
        let mut xs: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                (0..d)
                    .map(|j| p.word_emb.get(tokens[t] as usize, j) + p.pos_emb.get(t, j) + p.seg_emb.get(0, j))
                    .collect()
            })
            .collect();
        if let Some(l0) = &p.initial_ln {
            xs = xs.iter().map(|x| ln(x, &l0.gain, &l0.bias)).collect();
        }
        let dh = cfg.head_dim();
        for lp in &p.layers {
            let q: Vec<_> = xs.iter().map(|x| lin(x, &lp.query_w, &lp.query_b)).collect();
            let k: Vec<_> = xs.iter().map(|x| lin(x, &lp.key_w, &lp.key_b)).collect();
            let v: Vec<_> = xs.iter().map(|x| lin(x, &lp.value_w, &lp.value_b)).collect();
            let mut concat = vec![vec![0.0; d]; n];
            for h in 0..cfg.heads {
                let r = h * dh..(h + 1) * dh;
                for t in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|u| r.clone().map(|j| q[t][j] * k[u][j]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in r.clone() {
                        concat[t][j] = (0..n).map(|u| e[u] / z * v[u][j]).sum();
                    }
                }
            }
            let mid: Vec<Vec<f64>> = (0..n)
                .map(|t| {
                    let o = lin(&concat[t], &lp.attn_out_w, &lp.attn_out_b);
                    let s: Vec<f64> = (0..d).map(|j| o[j] + xs[t][j]).collect();
                    ln(&s, &lp.attn_ln.gain, &lp.attn_ln.bias)
                })
                .collect();
            xs = mid
                .iter()
                .map(|x| {
                    let hid: Vec<f64> = lin(x, &lp.ff_in_w, &lp.ff_in_b)
                        .into_iter()
                        .map(|a| cfg.activation.apply(a))
                        .collect();
                    let o = lin(&hid, &lp.ff_out_w, &lp.ff_out_b);
                    let s: Vec<f64> = (0..d).map(|j| o[j] + x[j]).collect();
                    ln(&s, &lp.ff_ln.gain, &lp.ff_ln.bias)
                })
                .collect();
        }
        xs
    }

    #[test]
    fn embed_zero_tables() {
        let cfg = tiny_config(1, 4, 1);
        let model = Model::new(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
        let x = model.embed_inputs(&[1, 2, 3], None).unwrap();
        assert_eq!(x, Matrix::zeros(3, 4));
    }

    #[test]
    fn embed_one_hot_tables_sum_rows() {
        let cfg = tiny_config(1, 4, 1);
        let mut params = ModelParams::zeros(&cfg);
        params.word_emb.set(3, 0, 1.0);
        params.pos_emb.set(0, 1, 1.0);
        params.seg_emb.set(1, 2, 1.0);
        let model = Model::new(cfg, params).unwrap();
        let x = model.embed_inputs(&[3], Some(&[1])).unwrap();
        assert_eq!(x.row(0), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_matches_row_lookup() {
        let model = random_model(&ToySpec::new(1, 8, 2), 5);
        let tokens = [3u32, 0, 7, 3];
        let segs = [0u32, 1, 1, 0];
        let x = model.embed_inputs(&tokens, Some(&segs)).unwrap();
        let p = &model.params;
        for t in 0..4 {
            for j in 0..8 {
                let e = p.word_emb.get(tokens[t] as usize, j) + p.pos_emb.get(t, j) + p.seg_emb.get(segs[t] as usize, j);
                assert_eq!(x.get(t, j), e);
            }
        }
    }

    #[test]
    fn embed_reports_offending_position() {
        let model = random_model(&ToySpec::new(1, 8, 2), 5);
        let err = model.embed_inputs(&[1, 2, 999], None).unwrap_err();
        match err {
            Error::Index { what, position, .. } => {
                assert_eq!(what, "token id");
                assert_eq!(position, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = model.embed_inputs(&[1, 2], Some(&[0, 5])).unwrap_err();
        assert!(matches!(err, Error::Index { what: "segment id", position: 1, .. }));
    }

    #[test]
    fn zero_weight_layer_is_double_z_scaling() {
        let cfg = ModelConfig {
            initial_ln: false,
            ..tiny_config(1, 4, 1)
        };
        let mut params = ModelParams::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        params.word_emb = Matrix::from_fn(cfg.vocab, 4, |_, _| rng.random_range(-2.0..2.0));
        let model = Model::new(cfg.clone(), params).unwrap();
        let (out, trace) = model.forward(&[1, 4], None).unwrap();
        // hand recurrence: zero sublayers, so y = z(z(x0))
        for t in 0..2 {
            let x0 = trace.input().row(t);
            let z = |x: &[f64]| {
                let m = x.iter().sum::<f64>() / 4.0;
                let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0 + cfg.ln_eps).sqrt();
                x.iter().map(|v| (v - m) / s).collect::<Vec<_>>()
            };
            let expected = z(&z(x0));
            for j in 0..4 {
                assert!((out.get(t, j) - expected[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = random_model(&ToySpec::new(3, 16, 4), 9);
        let (_, trace) = model.forward(&[1, 2, 3, 4, 5, 6, 7], None).unwrap();
        for l in 0..3 {
            for a in trace.heads(l) {
                for row in a.row_iter() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let model = random_model(&ToySpec::new(2, 8, 2), 17);
        let tokens = [4u32, 9, 1];
        let (out, _) = model.forward(&tokens, None).unwrap();
        let reference = reference_forward(&model, &tokens);
        for t in 0..3 {
            for j in 0..8 {
                assert!((out.get(t, j) - reference[t][j]).abs() <= 1e-12, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = random_model(&ToySpec::new(2, 8, 2), 3);
        let a = model.forward(&[1, 2, 3], None).unwrap();
        let b = model.forward(&[1, 2, 3], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ln_outputs_are_standardised_with_unit_gain() {
        let mut spec = ToySpec::new(2, 16, 4);
        spec.unit_layer_norms = true;
        let model = random_model(&spec, 21);
        let (_, trace) = model.forward(&[1, 5, 2, 8], None).unwrap();
        for cut in 0..=trace.depth() {
            let rep = trace.representation(cut).unwrap();
            for row in rep.row_iter() {
                let n = row.len() as f64;
                let m = row.iter().sum::<f64>() / n;
                let s = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                assert!(m.abs() < 1e-10);
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn head_permutation_leaves_output_unchanged() {
        let cfg = ToySpec::new(2, 8, 4);
        let model = random_model(&cfg, 33);
        let perm = [2usize, 0, 3, 1];
        let dh = model.config.head_dim();
        let mut permuted = model.clone();
        for lp in &mut permuted.params.layers {
            let orig = lp.clone();
            for (new_h, &old_h) in perm.iter().enumerate() {
                let (src, dst) = (old_h * dh, new_h * dh);
                for c in 0..dh {
                    for r in 0..8 {
                        lp.query_w.set(r, dst + c, orig.query_w.get(r, src + c));
                        lp.key_w.set(r, dst + c, orig.key_w.get(r, src + c));
                        lp.value_w.set(r, dst + c, orig.value_w.get(r, src + c));
                        lp.attn_out_w.set(dst + c, r, orig.attn_out_w.get(src + c, r));
                    }
                    lp.query_b[dst + c] = orig.query_b[src + c];
                    lp.key_b[dst + c] = orig.key_b[src + c];
                    lp.value_b[dst + c] = orig.value_b[src + c];
                }
            }
        }
        let tokens = [1u32, 7, 3, 2];
        let (a, _) = model.forward(&tokens, None).unwrap();
        let (b, _) = permuted.forward(&tokens, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn split_heads_partitions_columns() {
        let model = random_model(&ToySpec::new(1, 8, 2), 2);
        let heads = split_heads(&model.params, &model.config, 0).unwrap();
        assert_eq!(heads[1].columns, 4..8);
        assert_eq!(heads[1].value_w.column_slice(0, 4), model.params.layers[0].value_w.column_slice(4, 8));

        let single = random_model(&ToySpec::new(1, 8, 1), 2);
        let heads = split_heads(&single.params, &single.config, 0).unwrap();
        assert_eq!(heads.len(), 1);
        assert_eq!(heads[0].query_w, single.params.layers[0].query_w);
        assert_eq!(heads[0].value_b, single.params.layers[0].value_b);

        assert!(split_heads(&model.params, &model.config, 1).is_err());
    }

    #[test]
    fn split_heads_reproduce_fused_projection() {
        let model = random_model(&ToySpec::new(1, 8, 2), 8);
        let x = Matrix::from_fn(3, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
        let lp = &model.params.layers[0];
        let fused = affine(&x, &lp.value_w, &lp.value_b).unwrap();
        let mut concat = Matrix::zeros(3, 8);
        for h in split_heads(&model.params, &model.config, 0).unwrap() {
            let part = affine(&x, &h.value_w, &h.value_b).unwrap();
            concat.set_columns(h.columns.start, &part);
        }
        assert!(fused.max_abs_diff(&concat) <= 1e-12);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = tiny_config(1, 6, 4);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_intermediate_names_sublayer() {
        let cfg = tiny_config(2, 4, 1);
        let mut params = ModelParams::zeros(&cfg);
        params.word_emb = Matrix::from_fn(cfg.vocab, 4, |i, j| (i + j) as f64);
        params.layers[1].ff_in_w = Matrix::from_fn(4, 8, |i, _| 1e300 * (i + 1) as f64);
        params.layers[1].ff_out_w = Matrix::from_fn(8, 4, |_, _| 1e300);
        let err = forward(&params, &cfg, &[1, 2], None).unwrap_err();
        assert!(matches!(err, Error::Numeric { sublayer: 4, .. }), "{err:?}");
    }
}
