// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented Transformer encoder whose output embeddings decompose
//! exactly into input, attention, feed-forward and bias terms, with the
//! measurement and probing toolkit built on that decomposition.

pub mod analysis;
pub mod decomp;
pub mod encoder;
pub mod error;
pub mod io;
pub mod probes;
pub mod tensor;
pub mod toy;

pub use analysis::{
    agreement, ff_linear_fit, importance, importance_profile, spearman, AgreementMatrix, AgreementMode, ImportanceProfile,
    LinearFit,
};
pub use decomp::{
    decompose_closed, decompose_recurrence, hyperplane_basis, verify, HyperplaneBasis, ResidualReport, ScaleChain,
    Term, TermSet,
};
pub use encoder::{forward, split_heads, ForwardTrace, LayerParams, LnParams, LnStats, Model, ModelConfig, ModelParams};
pub use error::{Error, Result};
pub use io::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, Dtype, NameMap};
pub use io::corpus::Sequence;
pub use probes::{mlm_corrupt, train_linear_probe, KnnBank, LinearProbe, ProbeDataset, Selector};
pub use tensor::{Activation, Matrix, Precision, Vector};
