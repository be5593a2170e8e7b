// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random models and corpora for self-checks and desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{LayerParams, LnParams, Model, ModelConfig, ModelParams};
use crate::tensor::{Activation, Matrix, Vector};

/// Shape and flavour of a random model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_pos: usize,
    pub segments: usize,
    pub activation: Activation,
    pub initial_ln: bool,
    /// Gains of one and LN biases of zero everywhere.
    pub unit_layer_norms: bool,
    /// All projection and LN biases set to zero.
    pub zero_biases: bool,
}

impl ToySpec {
    pub fn new(layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ff_dim: 4 * hidden,
            vocab: 50,
            max_pos: 32,
            segments: 2,
            activation: Activation::Gelu,
            initial_ln: true,
            unit_layer_norms: false,
            zero_biases: false,
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff_dim: self.ff_dim,
            vocab: self.vocab,
            max_pos: self.max_pos,
            segments: self.segments,
            ln_eps: 1e-12,
            activation: self.activation,
            initial_ln: self.initial_ln,
        }
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    unit: Normal<f64>,
}

impl Sampler {
    fn gauss(&mut self, sd: f64) -> f64 {
        self.unit.sample(&mut self.rng) * sd
    }

    fn matrix(&mut self, r: usize, c: usize, sd: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| self.gauss(sd))
    }

    fn vector(&mut self, n: usize, sd: f64, zero: bool) -> Vector {
        (0..n).map(|_| if zero { 0.0 } else { self.gauss(sd) }).collect()
    }

    fn ln(&mut self, d: usize, spec: &ToySpec) -> LnParams {
        if spec.unit_layer_norms {
            return LnParams::identity(d);
        }
        LnParams {
            gain: (0..d).map(|_| 1.0 + self.gauss(0.2)).collect(),
            bias: self.vector(d, 0.1, spec.zero_biases),
        }
    }
}

/// Draws a random model. Identical `(spec, seed)` yields identical weights.
pub fn random_model(spec: &ToySpec, seed: u64) -> Model {
    let cfg = spec.config();
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        unit: Normal::new(0.0, 1.0).expect("unit normal"),
    };
    let d = spec.hidden;
    let b = spec.ff_dim;
    let wd = 1.0 / (d as f64).sqrt();
    let wb = 1.0 / (b as f64).sqrt();
    let zb = spec.zero_biases;

    let word_emb = s.matrix(spec.vocab, d, 1.0);
    let pos_emb = s.matrix(spec.max_pos, d, 0.5);
    let seg_emb = s.matrix(spec.segments, d, 0.5);
    let initial_ln = spec.initial_ln.then(|| s.ln(d, spec));
    let layers = (0..spec.layers)
        .map(|_| LayerParams {
            query_w: s.matrix(d, d, wd),
            query_b: s.vector(d, 0.1, zb),
            key_w: s.matrix(d, d, wd),
            key_b: s.vector(d, 0.1, zb),
            value_w: s.matrix(d, d, wd),
            value_b: s.vector(d, 0.1, zb),
            attn_out_w: s.matrix(d, d, wd),
            attn_out_b: s.vector(d, 0.1, zb),
            attn_ln: s.ln(d, spec),
            ff_in_w: s.matrix(d, b, wd),
            ff_in_b: s.vector(b, 0.1, zb),
            ff_out_w: s.matrix(b, d, wb),
            ff_out_b: s.vector(d, 0.1, zb),
            ff_ln: s.ln(d, spec),
        })
        .collect();
    let params = ModelParams {
        word_emb,
        pos_emb,
        seg_emb,
        initial_ln,
        layers,
    };
    Model::new(cfg, params).expect("toy spec produces a consistent model")
}

/// Random token sequences with lengths drawn from `lengths`.
pub fn random_corpus(
    vocab: usize,
    sequences: usize,
    lengths: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences)
        .map(|_| {
            let n = rng.random_range(lengths.clone());
            (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_model() {
        let spec = ToySpec::new(2, 8, 2);
        assert_eq!(random_model(&spec, 4), random_model(&spec, 4));
        assert_ne!(random_model(&spec, 4), random_model(&spec, 5));
    }

    #[test]
    fn corpus_respects_bounds() {
        let c = random_corpus(7, 20, 2..=5, 1);
        assert_eq!(c.len(), 20);
        assert!(c.iter().all(|s| (2..=5).contains(&s.len()) && s.iter().all(|&t| t < 7)));
    }
}
