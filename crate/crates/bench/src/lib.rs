// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the benchmarks.

use tfdecomp_core::toy::{random_corpus, random_model, ToySpec};
use tfdecomp_core::{Model, Sequence};

/// A random model and one sequence of `tokens` ids.
pub fn fixture(layers: usize, hidden: usize, heads: usize, tokens: usize) -> (Model, Vec<u32>) {
    let mut spec = ToySpec::new(layers, hidden, heads);
    spec.max_pos = spec.max_pos.max(tokens);
    let model = random_model(&spec, 1);
    let seq = random_corpus(spec.vocab, 1, tokens..=tokens, 2).remove(0);
    (model, seq)
}

pub fn corpus(vocab: usize, sequences: usize, seed: u64) -> Vec<Sequence> {
    random_corpus(vocab, sequences, 8..=16, seed)
        .into_iter()
        .map(Sequence::new)
        .collect()
}
