// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale probing harness: MLM corruption, lemma-restricted nearest
//! neighbours, linear probes over selected term sums, and the
//! most-frequent-label baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{accuracy, macro_f1};
use crate::decomp::{decompose_closed, Term, TermSet};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::io::corpus::Sequence;
use crate::tensor::{dot, norm, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Seeded 80/10/10 assignment; each count is within one item of its share.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = (0.8 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < train {
            out[i] = Split::Train;
        } else if rank < train + val {
            out[i] = Split::Val;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeItem {
    pub feature: Vector,
    pub label: u32,
    /// Lemma id for group-restricted methods.
    pub group: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub items: Vec<ProbeItem>,
    pub splits: Vec<Split>,
    pub seed: u64,
}

impl ProbeDataset {
    /// Assigns splits from `seed`.
    pub fn new(items: Vec<ProbeItem>, seed: u64) -> Result<Self> {
        let splits = assign_splits(items.len(), seed);
        Self::with_splits(items, splits, seed)
    }

    pub fn with_splits(items: Vec<ProbeItem>, splits: Vec<Split>, seed: u64) -> Result<Self> {
        if items.len() != splits.len() {
            return Err(Error::Length {
                op: "ProbeDataset (splits)",
                left: items.len(),
                right: splits.len(),
            });
        }
        if let Some(first) = items.first() {
            let d = first.feature.len();
            if let Some(bad) = items.iter().find(|it| it.feature.len() != d) {
                return Err(Error::Length {
                    op: "ProbeDataset (feature width)",
                    left: d,
                    right: bad.feature.len(),
                });
            }
        }
        Ok(Self { items, splits, seed })
    }

    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |it| it.feature.len())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Distinct labels, ascending.
    pub fn labels(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.label).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro-f1" => Ok(Metric::MacroF1),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl Metric {
    pub fn score(self, gold: &[u32], pred: &[u32]) -> Result<f64> {
        match self {
            Metric::Accuracy => accuracy(gold, pred),
            Metric::MacroF1 => macro_f1(gold, pred),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
    pub mask_token: u32,
    pub vocab: usize,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_share: 0.8,
            random_share: 0.1,
            mask_token: 103,
            vocab: 30522,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmTarget {
    pub sequence: usize,
    pub position: usize,
    pub original: u32,
    pub corruption: Corruption,
}

/// Selects positions at `rate` and masks, replaces or keeps them. Random
/// replacements never equal the original token.
pub fn mlm_corrupt(corpus: &[Vec<u32>], cfg: &MlmConfig, seed: u64) -> Result<(Vec<Vec<u32>>, Vec<MlmTarget>)> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("empty corpus".into()));
    }
    if cfg.vocab < 2 {
        return Err(Error::Config(format!(
            "vocabulary of {} cannot supply random replacements",
            cfg.vocab
        )));
    }
    let shares_ok = (0.0..=1.0).contains(&cfg.rate)
        && cfg.mask_share >= 0.0
        && cfg.random_share >= 0.0
        && cfg.mask_share + cfg.random_share <= 1.0;
    if !shares_ok {
        return Err(Error::Config("corruption rates must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = corpus.to_vec();
    let mut targets = Vec::new();
    for (s, seq) in out.iter_mut().enumerate() {
        for (p, tok) in seq.iter_mut().enumerate() {
            if rng.random::<f64>() >= cfg.rate {
                continue;
            }
            let original = *tok;
            let u = rng.random::<f64>();
            let corruption = if u < cfg.mask_share {
                *tok = cfg.mask_token;
                Corruption::Masked
            } else if u < cfg.mask_share + cfg.random_share {
                let mut r = rng.random_range(0..cfg.vocab as u32 - 1);
                if r >= original {
                    r += 1;
                }
                *tok = r;
                Corruption::Random
            } else {
                Corruption::Kept
            };
            targets.push(MlmTarget {
                sequence: s,
                position: p,
                original,
                corruption,
            });
        }
    }
    Ok((out, targets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankItem {
    pub vector: Vector,
    pub label: u32,
    pub group: u32,
}

/// Labelled vectors indexed by group for cosine nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KnnBank {
    by_group: BTreeMap<u32, Vec<(Vector, f64, u32)>>,
}

impl KnnBank {
    /// Zero-norm vectors have no cosine distance and are dropped.
    pub fn new(items: Vec<BankItem>) -> Self {
        let mut by_group: BTreeMap<u32, Vec<(Vector, f64, u32)>> = BTreeMap::new();
        let mut dropped = 0usize;
        for it in items {
            let n = norm(&it.vector);
            if n == 0.0 {
                dropped += 1;
                continue;
            }
            by_group.entry(it.group).or_default().push((it.vector, n, it.label));
        }
        if dropped > 0 {
            log::warn!("{dropped} zero-norm bank vector(s) excluded");
        }
        Self { by_group }
    }

    pub fn len(&self) -> usize {
        self.by_group.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine distances from `query` to every bank item of `group`, in
    /// insertion order.
    pub fn distances(&self, query: &[f64], group: u32) -> Result<Vec<(f64, u32)>> {
        let items = self.by_group.get(&group).ok_or(Error::Coverage(group as usize))?;
        let qn = norm(query);
        if qn == 0.0 {
            return Err(Error::Degenerate("zero query vector".into()));
        }
        items
            .iter()
            .map(|(v, n, label)| {
                if v.len() != query.len() {
                    return Err(Error::Length {
                        op: "knn query",
                        left: query.len(),
                        right: v.len(),
                    });
                }
                Ok((1.0 - dot(query, v) / (qn * n), *label))
            })
            .collect()
    }

    /// Majority label of the `k` nearest same-group items; ties go to the
    /// smaller mean distance, then the lower label id.
    pub fn predict(&self, query: &[f64], k: usize, group: u32) -> Result<u32> {
        if k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        let mut dist = self.distances(query, group)?;
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist.truncate(k);
        let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
        for (d, label) in dist {
            let e = votes.entry(label).or_default();
            e.0 += 1;
            e.1 += d;
        }
        let best = votes
            .into_iter()
            .min_by(|(la, (ca, sa)), (lb, (cb, sb))| {
                cb.cmp(ca)
                    .then((sa / *ca as f64).total_cmp(&(sb / *cb as f64)))
                    .then(la.cmp(lb))
            })
            .map(|(label, _)| label)
            .expect("group has at least one item");
        Ok(best)
    }

    pub fn predict_many(&self, queries: &[(Vector, u32)], k: usize) -> Vec<Result<u32>> {
        queries.par_iter().map(|(q, g)| self.predict(q, k, *g)).collect()
    }
}

/// Which vector a probe reads: the traced embedding or a sum of terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Embedding,
    Terms(Vec<Term>),
}

impl FromStr for Selector {
    type Err = Error;

    /// `e`, or term symbols joined by `+` or `,` (e.g. `i+h`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "e" {
            return Ok(Selector::Embedding);
        }
        let mut terms = Vec::new();
        for sym in s.split(['+', ',']).map(str::trim) {
            let mut chars = sym.chars();
            let t = match (chars.next(), chars.next()) {
                (Some(c), None) => Term::from_symbol(c),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown term `{sym}` in selector `{s}`")))?;
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        if terms.is_empty() {
            return Err(Error::Config("empty term selector".into()));
        }
        terms.sort_by_key(|t| t.index());
        Ok(Selector::Terms(terms))
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selector::Embedding => f.write_str("e"),
            Selector::Terms(ts) => {
                let syms: Vec<String> = ts.iter().map(|t| t.symbol().to_string()).collect();
                f.write_str(&syms.join("+"))
            }
        }
    }
}

impl Selector {
    pub fn feature(&self, terms: &TermSet, token: usize) -> Vector {
        match self {
            Selector::Embedding => terms.reference().row(token).to_vec(),
            Selector::Terms(ts) => terms.sum_terms(token, ts.iter().copied()),
        }
    }
}

/// Elementwise sum of the vectors of one word's pieces.
pub fn wordpiece_pool(pieces: &[&[f64]]) -> Result<Vector> {
    let first = pieces
        .first()
        .ok_or_else(|| Error::Degenerate("pooling zero word-pieces".into()))?;
    let mut out = first.to_vec();
    for p in &pieces[1..] {
        if p.len() != out.len() {
            return Err(Error::Length {
                op: "wordpiece_pool",
                left: out.len(),
                right: p.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o += v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            weight_decay: 1e-2,
            batch: 64,
            seed: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Multinomial logistic regression over `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `d x |labels|`.
    pub weights: Matrix,
    pub bias: Vector,
    /// Class index to label id.
    pub labels: Vec<u32>,
    pub hyper: ProbeHyper,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], hp: &ProbeHyper, t: i32, decay: bool) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for j in 0..params.len() {
            if decay {
                params[j] -= hp.lr * hp.weight_decay * params[j];
            }
            self.m[j] = BETA1 * self.m[j] + (1.0 - BETA1) * grad[j];
            self.v[j] = BETA2 * self.v[j] + (1.0 - BETA2) * grad[j] * grad[j];
            params[j] -= hp.lr * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Trains on the train split with AdamW from zero weights; the seed only
/// drives minibatch order.
pub fn train_linear_probe(data: &ProbeDataset, hp: &ProbeHyper) -> Result<LinearProbe> {
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Degenerate("empty train split".into()));
    }
    let labels: Vec<u32> = train
        .iter()
        .map(|&i| data.items[i].label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if labels.len() < 2 {
        return Err(Error::Degenerate(format!(
            "probe needs at least two labels, train split has {}",
            labels.len()
        )));
    }
    if hp.batch == 0 || hp.lr <= 0.0 {
        return Err(Error::Config("probe batch and learning rate must be positive".into()));
    }
    let class: BTreeMap<u32, usize> = labels.iter().enumerate().map(|(c, &l)| (l, c)).collect();
    let d = data.dim();
    let k = labels.len();
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut adam_w = Adam::new(d * k);
    let mut adam_b = Adam::new(k);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order = train.clone();
    let mut t = 0;
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut z = vec![0.0; k];
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hp.batch) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &data.items[i].feature;
                z.copy_from_slice(&b);
                for (r, xv) in x.iter().enumerate() {
                    for c in 0..k {
                        z[c] += xv * w[r * k + c];
                    }
                }
                softmax_in_place(&mut z);
                z[class[&data.items[i].label]] -= 1.0;
                for c in 0..k {
                    gb[c] += z[c] * scale;
                }
                for (r, xv) in x.iter().enumerate() {
                    for c in 0..k {
                        gw[r * k + c] += xv * z[c] * scale;
                    }
                }
            }
            t += 1;
            adam_w.step(&mut w, &gw, hp, t, true);
            adam_b.step(&mut b, &gb, hp, t, false);
        }
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe weights diverged".into()));
    }
    Ok(LinearProbe {
        weights: Matrix::from_vec(d, k, w)?,
        bias: b,
        labels,
        hyper: *hp,
    })
}

impl LinearProbe {
    pub fn scores(&self, x: &[f64]) -> Vector {
        let k = self.labels.len();
        let mut z = self.bias.clone();
        for (r, xv) in x.iter().enumerate() {
            let row = self.weights.row(r);
            for c in 0..k {
                z[c] += xv * row[c];
            }
        }
        z
    }

    /// Highest-scoring label; the lower label wins exact ties.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let z = self.scores(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        self.labels[best]
    }

    pub fn evaluate(&self, data: &ProbeDataset, split: Split, metric: Metric) -> Result<f64> {
        let idx = data.indices(split);
        let gold: Vec<u32> = idx.iter().map(|&i| data.items[i].label).collect();
        let pred: Vec<u32> = idx.iter().map(|&i| self.predict(&data.items[i].feature)).collect();
        metric.score(&gold, &pred)
    }
}

/// Projection onto the transposed word-embedding matrix, for predicting
/// token ids without a learned head.
pub fn tied_predict(word_emb: &Matrix, x: &[f64]) -> Result<u32> {
    if word_emb.cols() != x.len() {
        return Err(Error::Length {
            op: "tied_predict",
            left: x.len(),
            right: word_emb.cols(),
        });
    }
    let mut best = (f64::NEG_INFINITY, 0u32);
    for (v, row) in word_emb.row_iter().enumerate() {
        let s = dot(row, x);
        if s > best.0 {
            best = (s, v as u32);
        }
    }
    Ok(best.1)
}

/// Predicts each group's most frequent train label, falling back to the
/// global mode for unseen groups, and scores the test split.
pub fn most_frequent_baseline(data: &ProbeDataset, metric: Metric) -> Result<f64> {
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Degenerate("empty train split".into()));
    }
    let mode = |counts: &BTreeMap<u32, usize>| -> u32 {
        // BTreeMap order makes the lower label win ties
        let mut best = (0usize, 0u32);
        for (&l, &c) in counts {
            if c > best.0 {
                best = (c, l);
            }
        }
        best.1
    };
    let mut global: BTreeMap<u32, usize> = BTreeMap::new();
    let mut per_group: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for &i in &train {
        let it = &data.items[i];
        *global.entry(it.label).or_default() += 1;
        if let Some(g) = it.group {
            *per_group.entry(g).or_default().entry(it.label).or_default() += 1;
        }
    }
    let fallback = mode(&global);
    let group_mode: BTreeMap<u32, u32> = per_group.iter().map(|(&g, c)| (g, mode(c))).collect();
    let test = data.indices(Split::Test);
    let gold: Vec<u32> = test.iter().map(|&i| data.items[i].label).collect();
    let pred: Vec<u32> = test
        .iter()
        .map(|&i| {
            data.items[i]
                .group
                .and_then(|g| group_mode.get(&g).copied())
                .unwrap_or(fallback)
        })
        .collect();
    metric.score(&gold, &pred)
}

/// One line of a probe dataset file. `token_span` is a half-open range of
/// word-piece positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub sequence_id: usize,
    pub token_span: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemma: Option<String>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Drops records whose lemma carries a single label across the whole set.
pub fn drop_monosemous(records: Vec<DatasetRecord>) -> Vec<DatasetRecord> {
    let mut senses: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in &records {
        if let Some(l) = &r.lemma {
            senses.entry(l).or_default().insert(&r.label);
        }
    }
    let keep: BTreeSet<String> = senses
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(l, _)| l.to_string())
        .collect();
    records
        .into_iter()
        .filter(|r| r.lemma.as_ref().is_none_or(|l| keep.contains(l)))
        .collect()
}

/// String labels and lemmas interned to ids in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vocabularies {
    pub labels: Vec<String>,
    pub lemmas: Vec<String>,
}

/// Resolves every record to a pooled feature vector at `cut` and builds a
/// dataset. Records without a split are assigned one from `seed`.
pub fn build_dataset(
    model: &Model,
    corpus: &[Sequence],
    records: &[DatasetRecord],
    cut: usize,
    selector: &Selector,
    seed: u64,
) -> Result<(ProbeDataset, Vocabularies)> {
    let ids: BTreeSet<usize> = records.iter().map(|r| r.sequence_id).collect();
    if let Some(&bad) = ids.iter().find(|&&s| s >= corpus.len()) {
        return Err(Error::Index {
            what: "sequence_id",
            position: 0,
            value: bad,
            bound: corpus.len(),
        });
    }
    let termsets: BTreeMap<usize, TermSet> = ids
        .into_par_iter()
        .map(|s| {
            let seq = &corpus[s];
            let (_, trace) = model.forward(&seq.tokens, seq.segments())?;
            Ok((s, decompose_closed(model, &trace, cut)?))
        })
        .collect::<Result<_>>()?;

    let labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let lemmas: Vec<String> = records
        .iter()
        .filter_map(|r| r.lemma.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let label_id = |s: &str| labels.binary_search_by(|l| l.as_str().cmp(s)).expect("interned") as u32;
    let lemma_id = |s: &str| lemmas.binary_search_by(|l| l.as_str().cmp(s)).expect("interned") as u32;

    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let ts = &termsets[&r.sequence_id];
        let [start, end] = r.token_span;
        if start >= end || end > ts.tokens() {
            return Err(Error::Index {
                what: "token_span",
                position: r.sequence_id,
                value: end,
                bound: ts.tokens(),
            });
        }
        let pieces: Vec<Vector> = (start..end).map(|t| selector.feature(ts, t)).collect();
        let refs: Vec<&[f64]> = pieces.iter().map(Vec::as_slice).collect();
        items.push(ProbeItem {
            feature: wordpiece_pool(&refs)?,
            label: label_id(&r.label),
            group: r.lemma.as_deref().map(lemma_id),
        });
    }
    let seeded = assign_splits(records.len(), seed);
    let splits = records.iter().zip(seeded).map(|(r, s)| r.split.unwrap_or(s)).collect();
    let data = ProbeDataset::with_splits(items, splits, seed)?;
    Ok((data, Vocabularies { labels, lemmas }))
}

/// A toy word-sense task over a corpus: every token is a word whose lemma
/// is `id % lemmas` and whose sense is `(id / lemmas) % 2`, so the label is
/// recoverable from the token identity.
pub fn synthetic_records(corpus: &[Sequence], lemmas: u32, seed: u64) -> Vec<DatasetRecord> {
    let lemmas = lemmas.max(1);
    let mut out = Vec::new();
    for (s, seq) in corpus.iter().enumerate() {
        for (t, &tok) in seq.tokens.iter().enumerate() {
            out.push(DatasetRecord {
                sequence_id: s,
                token_span: [t, t + 1],
                lemma: Some(format!("w{}", tok % lemmas)),
                label: format!("s{}", (tok / lemmas) % 2),
                split: None,
            });
        }
    }
    let splits = assign_splits(out.len(), seed);
    for (r, s) in out.iter_mut().zip(splits) {
        r.split = Some(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{random_corpus, random_model, ToySpec};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand_distr::{Distribution, Normal};

    fn gaussian_items(n: usize, d: usize, classes: u32, separation: f64, seed: u64) -> Vec<ProbeItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let label = i as u32 % classes;
                let mut feature: Vector = (0..d).map(|_| unit.sample(&mut rng)).collect();
                feature[label as usize % d] += separation;
                ProbeItem {
                    feature,
                    label,
                    group: Some(0),
                }
            })
            .collect()
    }

    #[test]
    fn split_counts_and_determinism() {
        for n in [0, 1, 7, 10, 99, 1000] {
            let s = assign_splits(n, 3);
            let count = |x| s.iter().filter(|&&v| v == x).count() as f64;
            assert!((count(Split::Train) - 0.8 * n as f64).abs() <= 1.0);
            assert!((count(Split::Val) - 0.1 * n as f64).abs() <= 1.0);
            assert!((count(Split::Test) - 0.1 * n as f64).abs() <= 1.0);
            assert_eq!(s, assign_splits(n, 3));
        }
    }

    #[test]
    fn corruption_proportions_within_binomial_bounds() {
        let corpus = random_corpus(1000, 1000, 100..=100, 5);
        let cfg = MlmConfig {
            vocab: 1000,
            mask_token: 1000,
            ..MlmConfig::default()
        };
        let (out, targets) = mlm_corrupt(&corpus, &cfg, 11).unwrap();
        let n = targets.len() as f64;
        assert!((n / 100_000.0 - 0.15).abs() <= 0.005);
        let share = |c| targets.iter().filter(|t| t.corruption == c).count() as f64 / n;
        assert!((share(Corruption::Masked) - 0.8).abs() <= 0.01);
        assert!((share(Corruption::Random) - 0.1).abs() <= 0.01);
        assert!((share(Corruption::Kept) - 0.1).abs() <= 0.01);
        for t in &targets {
            let now = out[t.sequence][t.position];
            match t.corruption {
                Corruption::Masked => assert_eq!(now, 1000),
                Corruption::Random => assert_ne!(now, t.original),
                Corruption::Kept => assert_eq!(now, t.original),
            }
        }
        assert_eq!(mlm_corrupt(&corpus, &cfg, 11).unwrap().1, targets);
    }

    #[test]
    fn zero_rate_selects_nothing() {
        let cfg = MlmConfig {
            rate: 0.0,
            ..MlmConfig::default()
        };
        let corpus = vec![vec![1, 2, 3]];
        let (out, targets) = mlm_corrupt(&corpus, &cfg, 0).unwrap();
        assert!(targets.is_empty());
        assert_eq!(out, corpus);
    }

    #[test]
    fn tiny_vocabulary_rejected() {
        let cfg = MlmConfig {
            vocab: 1,
            ..MlmConfig::default()
        };
        assert!(matches!(mlm_corrupt(&[vec![0]], &cfg, 0), Err(Error::Config(_))));
    }

    fn brute_force(items: &[BankItem], q: &[f64], k: usize, group: u32) -> u32 {
        let mut d: Vec<(f64, u32)> = items
            .iter()
            .filter(|it| it.group == group)
            .map(|it| {
                let cos = dot(q, &it.vector) / (norm(q) * norm(&it.vector));
                (1.0 - cos, it.label)
            })
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &d[..k.min(d.len())];
        let mut best: Option<(usize, f64, u32)> = None;
        let mut labels: Vec<u32> = top.iter().map(|x| x.1).collect();
        labels.sort();
        labels.dedup();
        for l in labels {
            let ds: Vec<f64> = top.iter().filter(|x| x.1 == l).map(|x| x.0).collect();
            let cand = (ds.len(), ds.iter().sum::<f64>() / ds.len() as f64, l);
            best = match best {
                None => Some(cand),
                Some(b) if cand.0 > b.0 || (cand.0 == b.0 && cand.1 < b.1) => Some(cand),
                keep => keep,
            };
        }
        best.unwrap().2
    }

    fn random_bank(n: usize, d: usize, groups: u32, seed: u64) -> Vec<BankItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| BankItem {
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                label: rng.random_range(0..3),
                group: rng.random_range(0..groups),
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let items = random_bank(20, 4, 1, 1);
        let bank = KnnBank::new(items.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q: Vector = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            for k in [1, 5] {
                assert_eq!(bank.predict(&q, k, 0).unwrap(), brute_force(&items, &q, k, 0));
            }
        }
    }

    #[test]
    fn knn_trivial_cases() {
        let one = vec![BankItem {
            vector: vec![1.0, 0.0],
            label: 4,
            group: 2,
        }];
        let bank = KnnBank::new(one);
        assert_eq!(bank.predict(&[0.0, 1.0], 5, 2).unwrap(), 4);
        assert!(matches!(bank.predict(&[0.0, 1.0], 5, 3), Err(Error::Coverage(3))));
        let items = random_bank(10, 3, 1, 4);
        let bank = KnnBank::new(items.clone());
        for it in &items {
            let d = bank.distances(&it.vector, 0).unwrap();
            let nearest = d.iter().cloned().fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
            assert!(nearest.0.abs() < 1e-15);
            assert_eq!(bank.predict(&it.vector, 1, 0).unwrap(), brute_force(&items, &it.vector, 1, 0));
        }
    }

    #[test]
    fn knn_ties_prefer_closer_then_lower_label() {
        let mk = |v: Vec<f64>, label| BankItem { vector: v, label, group: 0 };
        let bank = KnnBank::new(vec![mk(vec![1.0, 0.1], 7), mk(vec![1.0, -0.5], 3)]);
        assert_eq!(bank.predict(&[1.0, 0.0], 2, 0).unwrap(), 7);
        let bank = KnnBank::new(vec![mk(vec![1.0, 0.2], 7), mk(vec![1.0, -0.2], 3)]);
        assert_eq!(bank.predict(&[1.0, 0.0], 2, 0).unwrap(), 3);
    }

    #[test]
    fn zero_bank_vectors_excluded() {
        let bank = KnnBank::new(vec![
            BankItem {
                vector: vec![0.0, 0.0],
                label: 1,
                group: 0,
            },
            BankItem {
                vector: vec![1.0, 0.0],
                label: 2,
                group: 0,
            },
        ]);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.predict(&[0.5, 0.5], 5, 0).unwrap(), 2);
    }

    #[test]
    fn pooling_examples() {
        let v = [1.0, -2.0, 3.5];
        assert_eq!(wordpiece_pool(&[&v]).unwrap(), v.to_vec());
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(wordpiece_pool(&[&v, &neg]).unwrap(), vec![0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pieces: Vec<Vector> = (0..3).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
        let mut naive = vec![0.0; 5];
        for p in &pieces {
            for j in 0..5 {
                naive[j] += p[j];
            }
        }
        let refs: Vec<&[f64]> = pieces.iter().map(Vec::as_slice).collect();
        assert_eq!(wordpiece_pool(&refs).unwrap(), naive);
        assert!(wordpiece_pool(&[]).is_err());
    }

    #[test]
    fn selector_parsing() {
        assert_eq!("e".parse::<Selector>().unwrap(), Selector::Embedding);
        assert_eq!(
            "h+i".parse::<Selector>().unwrap(),
            Selector::Terms(vec![Term::Input, Term::Attention])
        );
        assert_eq!("i,h,f,c".parse::<Selector>().unwrap().to_string(), "i+h+f+c");
        assert!("x".parse::<Selector>().is_err());
        assert!("".parse::<Selector>().is_err());
    }

    #[test]
    fn separable_probe_is_perfect() {
        let data = ProbeDataset::new(gaussian_items(400, 6, 2, 12.0, 3), 1).unwrap();
        let probe = train_linear_probe(&data, &ProbeHyper::default()).unwrap();
        assert_eq!(probe.evaluate(&data, Split::Test, Metric::Accuracy).unwrap(), 1.0);
        assert_eq!(probe.evaluate(&data, Split::Test, Metric::MacroF1).unwrap(), 1.0);
    }

    #[test]
    fn uninformative_features_give_chance() {
        let mut total = 0.0;
        for seed in 0..10 {
            let data = ProbeDataset::new(gaussian_items(800, 6, 4, 0.0, seed), seed).unwrap();
            let hp = ProbeHyper {
                seed,
                ..ProbeHyper::default()
            };
            let probe = train_linear_probe(&data, &hp).unwrap();
            total += probe.evaluate(&data, Split::Test, Metric::Accuracy).unwrap();
        }
        assert!((total / 10.0 - 0.25).abs() <= 0.05, "mean accuracy {}", total / 10.0);
    }

    #[test]
    fn single_label_rejected() {
        let mut items = gaussian_items(50, 3, 1, 0.0, 1);
        items.iter_mut().for_each(|it| it.label = 5);
        let data = ProbeDataset::new(items, 0).unwrap();
        assert!(matches!(train_linear_probe(&data, &ProbeHyper::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn embedding_and_term_sum_features_agree() {
        let model = random_model(&ToySpec::new(2, 8, 2), 5);
        let corpus: Vec<Sequence> = random_corpus(50, 30, 4..=8, 3).into_iter().map(Sequence::new).collect();
        let records = synthetic_records(&corpus, 5, 2);
        let (de, _) = build_dataset(&model, &corpus, &records, 4, &Selector::Embedding, 0).unwrap();
        let all: Selector = "i+h+f+c".parse().unwrap();
        let (dt, _) = build_dataset(&model, &corpus, &records, 4, &all, 0).unwrap();
        let pe = train_linear_probe(&de, &ProbeHyper::default()).unwrap();
        let pt = train_linear_probe(&dt, &ProbeHyper::default()).unwrap();
        let same = de
            .items
            .iter()
            .zip(&dt.items)
            .filter(|(a, b)| pe.predict(&a.feature) == pt.predict(&b.feature))
            .count();
        assert!(same as f64 / de.items.len() as f64 >= 0.999);
        assert_eq!(pe.predict(&de.items[0].feature), pe.predict(&de.items[0].feature.clone()));
    }

    #[test]
    fn baseline_examples() {
        let mk = |label, group| ProbeItem {
            feature: vec![1.0],
            label,
            group,
        };
        let same: Vec<ProbeItem> = (0..20).map(|_| mk(1, Some(0))).collect();
        assert_eq!(most_frequent_baseline(&ProbeDataset::new(same, 0).unwrap(), Metric::Accuracy).unwrap(), 1.0);

        // 3:1 in every group
        let items: Vec<ProbeItem> = (0..400).map(|i| mk(u32::from(i % 4 == 0), Some(i as u32 % 3))).collect();
        let data = ProbeDataset::new(items, 2).unwrap();
        let test = data.indices(Split::Test);
        let direct = test.iter().filter(|&&i| data.items[i].label == 0).count() as f64 / test.len() as f64;
        assert_eq!(most_frequent_baseline(&data, Metric::Accuracy).unwrap(), direct);
        assert!((direct - 0.75).abs() < 0.15);

        let items = vec![mk(2, Some(0)), mk(2, Some(0)), mk(1, Some(1)), mk(2, Some(9))];
        let splits = vec![Split::Train, Split::Train, Split::Train, Split::Test];
        let data = ProbeDataset::with_splits(items, splits, 0).unwrap();
        assert_eq!(most_frequent_baseline(&data, Metric::Accuracy).unwrap(), 1.0);
    }

    #[test]
    fn tied_projection_recovers_embedded_token() {
        let model = random_model(&ToySpec::new(1, 16, 2), 1);
        let w = &model.params.word_emb;
        let hits = (0..w.rows()).filter(|&v| tied_predict(w, w.row(v)).unwrap() == v as u32).count();
        assert!(hits as f64 / w.rows() as f64 > 0.9);
    }

    #[test]
    fn records_round_trip_and_filtering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let rec = |lemma: &str, label: &str| DatasetRecord {
            sequence_id: 0,
            token_span: [0, 1],
            lemma: Some(lemma.into()),
            label: label.into(),
            split: Some(Split::Train),
        };
        let records = vec![rec("a", "x"), rec("a", "y"), rec("b", "x"), rec("b", "x")];
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
        let kept = drop_monosemous(records);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|r| r.lemma.as_deref() == Some("a")));
    }

    proptest! {
        #[test]
        fn knn_one_is_argmin(seed in any::<u64>(), n in 1usize..200) {
            let items = random_bank(n, 5, 3, seed);
            let bank = KnnBank::new(items.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let q: Vector = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            for g in 0..3 {
                match bank.predict(&q, 1, g) {
                    Ok(l) => prop_assert_eq!(l, brute_force(&items, &q, 1, g)),
                    Err(Error::Coverage(_)) => prop_assert!(items.iter().all(|it| it.group != g)),
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }

        #[test]
        fn splits_partition_items(n in 0usize..500, seed in any::<u64>()) {
            let s = assign_splits(n, seed);
            prop_assert_eq!(s.len(), n);
            prop_assert_eq!(&s, &assign_splits(n, seed));
        }
    }
}
