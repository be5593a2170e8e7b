// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats: corpora, checkpoints and result tables.

pub mod checkpoint;
pub mod corpus;
pub mod report;
