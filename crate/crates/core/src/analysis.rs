// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measurements over decomposed representations: term importance and its
//! per-layer profile, the linear-fit test of feed-forward sublayers, rank
//! correlation between models, and prediction agreement.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::decomp::{decompose_closed, Term, TermSet};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::io::corpus::Sequence;
use crate::tensor::{dot, matmul, Matrix};

/// Signed share of `term` in `e`: `e . term / e . e`.
pub fn importance(e: &[f64], term: &[f64]) -> Result<f64> {
    if e.len() != term.len() {
        return Err(Error::Length {
            op: "importance",
            left: e.len(),
            right: term.len(),
        });
    }
    let ee = dot(e, e);
    if ee == 0.0 {
        return Err(Error::Degenerate("importance of a zero embedding".into()));
    }
    Ok(dot(e, term) / ee)
}

/// Importance of the four terms for every token of a term set, measured
/// against the traced representation.
pub fn token_importances(terms: &TermSet) -> Result<Vec<[f64; 4]>> {
    (0..terms.tokens())
        .map(|t| {
            let e = terms.reference().row(t);
            let mut out = [0.0; 4];
            for term in Term::ALL {
                out[term.index()] = importance(e, terms.term(term).row(t))?;
            }
            Ok(out)
        })
        .collect()
}

/// Sublayer cut closing each layer: layer 0 is the embedding stage, layer
/// `l` ends at sublayer `2l`.
pub fn layer_cut(layer: usize) -> usize {
    2 * layer
}

/// Per-token importances at every layer, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSamples {
    /// `layers[l][k]` holds the four importances of the `k`-th corpus token.
    pub layers: Vec<Vec<[f64; 4]>>,
}

/// Decomposes every corpus token at the end of every layer.
pub fn importance_samples(model: &Model, corpus: &[Sequence]) -> Result<ImportanceSamples> {
    if corpus.is_empty() {
        return Err(Error::Degenerate("empty corpus".into()));
    }
    let layers = model.config.layers;
    let per_seq: Vec<Vec<Vec<[f64; 4]>>> = corpus
        .par_iter()
        .map(|seq| {
            let (_, trace) = model.forward(&seq.tokens, seq.segments())?;
            (0..=layers)
                .map(|l| token_importances(&decompose_closed(model, &trace, layer_cut(l))?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); layers + 1];
    for seq in per_seq {
        for (l, vals) in seq.into_iter().enumerate() {
            out[l].extend(vals);
        }
    }
    Ok(ImportanceSamples { layers: out })
}

/// One row of an importance profile. Attention and feed-forward terms are
/// undefined at layer 0, where `mean` and `std` are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub layer: usize,
    pub term: Term,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceProfile {
    pub entries: Vec<ProfileEntry>,
}

impl ImportanceProfile {
    pub fn from_samples(samples: &ImportanceSamples) -> Self {
        let mut entries = Vec::new();
        for (layer, vals) in samples.layers.iter().enumerate() {
            for term in Term::ALL {
                let defined = layer > 0 || matches!(term, Term::Input | Term::Bias);
                let (mean, std) = if defined && !vals.is_empty() {
                    let xs: Vec<f64> = vals.iter().map(|v| v[term.index()]).collect();
                    let (m, s) = mean_std(&xs);
                    (Some(m), Some(s))
                } else {
                    (None, None)
                };
                entries.push(ProfileEntry {
                    layer,
                    term,
                    mean,
                    std,
                    count: vals.len(),
                });
            }
        }
        Self { entries }
    }

    pub fn get(&self, layer: usize, term: Term) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.term == term)
    }
}

pub fn importance_profile(model: &Model, corpus: &[Sequence]) -> Result<ImportanceProfile> {
    Ok(ImportanceProfile::from_samples(&importance_samples(model, corpus)?))
}

/// Mean and population standard deviation, summed in slice order.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Spearman rank correlation between importances of two models over the
/// same corpus, per layer and term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCorrelation {
    pub layer: usize,
    pub term: Term,
    pub rho: f64,
    pub n: usize,
}

/// Pairs tokens by corpus position. Undefined layer-0 terms are skipped;
/// a constant column yields NaN.
pub fn correlate_importances(a: &ImportanceSamples, b: &ImportanceSamples) -> Result<Vec<TermCorrelation>> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Length {
            op: "correlate_importances (layers)",
            left: a.layers.len(),
            right: b.layers.len(),
        });
    }
    let mut out = Vec::new();
    for (layer, (va, vb)) in a.layers.iter().zip(&b.layers).enumerate() {
        for term in Term::ALL {
            if layer == 0 && matches!(term, Term::Attention | Term::FeedForward) {
                continue;
            }
            let xa: Vec<f64> = va.iter().map(|v| v[term.index()]).collect();
            let xb: Vec<f64> = vb.iter().map(|v| v[term.index()]).collect();
            let rho = match spearman(&xa, &xb) {
                Ok(r) => r,
                Err(Error::Degenerate(why)) => {
                    log::warn!("layer {layer} term {term}: {why}");
                    f64::NAN
                }
                Err(e) => return Err(e),
            };
            out.push(TermCorrelation {
                layer,
                term,
                rho,
                n: xa.len(),
            });
        }
    }
    Ok(out)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            op: "pearson",
            left: a.len(),
            right: b.len(),
        });
    }
    let (ma, _) = mean_std(a);
    let (mb, _) = mean_std(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation with zero variance".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            op: "spearman",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Degenerate("spearman needs at least two pairs".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Column-wise standardisation across samples. Constant columns are only
/// centred.
pub fn zscale_columns(m: &Matrix) -> Matrix {
    let (n, d) = m.shape();
    let mut means = vec![0.0; d];
    for row in m.row_iter() {
        for (s, v) in means.iter_mut().zip(row) {
            *s += v;
        }
    }
    means.iter_mut().for_each(|s| *s /= n as f64);
    let mut sds = vec![0.0; d];
    for row in m.row_iter() {
        for j in 0..d {
            sds[j] += (row[j] - means[j]).powi(2);
        }
    }
    for s in &mut sds {
        *s = (*s / n as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    Matrix::from_fn(n, d, |i, j| (m.get(i, j) - means[j]) / sds[j])
}

/// Ridge added to the input covariance before solving.
pub const FIT_RIDGE: f64 = 1e-8;

/// Least-squares affine fit `y ~ x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: Matrix,
    pub intercept: Vec<f64>,
    /// `1 - SS_res / SS_tot` pooled over every output coordinate.
    pub r2: f64,
    pub per_coordinate_r2: Vec<f64>,
    pub samples: usize,
}

fn r2_from(ss_res: f64, ss_tot: f64) -> f64 {
    // nothing to explain
    if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Fits `outputs` from `inputs` by ordinary least squares on centred data
/// (unpenalised intercept), solving `(X'X / n + ridge I) W = X'Y / n`.
pub fn ff_linear_fit(inputs: &Matrix, outputs: &Matrix) -> Result<LinearFit> {
    let (n, d) = inputs.shape();
    let k = outputs.cols();
    if outputs.rows() != n {
        return Err(Error::Length {
            op: "ff_linear_fit (samples)",
            left: n,
            right: outputs.rows(),
        });
    }
    if n < d + 1 {
        return Err(Error::InsufficientSamples { needed: d + 1, got: n });
    }
    let col_means = |m: &Matrix| -> Vec<f64> {
        let mut s = vec![0.0; m.cols()];
        for row in m.row_iter() {
            for (a, v) in s.iter_mut().zip(row) {
                *a += v;
            }
        }
        s.iter().map(|a| a / m.rows() as f64).collect()
    };
    let mx = col_means(inputs);
    let my = col_means(outputs);
    let xc = Matrix::from_fn(n, d, |i, j| inputs.get(i, j) - mx[j]);
    let yc = Matrix::from_fn(n, k, |i, j| outputs.get(i, j) - my[j]);
    let xt = xc.transpose();
    let cov = matmul(&xt, &xc)?;
    let cross = matmul(&xt, &yc)?;
    let a = nalgebra::DMatrix::from_fn(d, d, |i, j| cov.get(i, j) / n as f64 + if i == j { FIT_RIDGE } else { 0.0 });
    let rhs = nalgebra::DMatrix::from_fn(d, k, |i, j| cross.get(i, j) / n as f64);
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Degenerate("normal equations are not positive definite".into()))?;
    let w = chol.solve(&rhs);
    let weights = Matrix::from_fn(d, k, |i, j| w[(i, j)]);
    let pred = matmul(&xc, &weights)?;

    let mut res = vec![0.0; k];
    let mut tot = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            res[j] += (yc.get(i, j) - pred.get(i, j)).powi(2);
            tot[j] += yc.get(i, j).powi(2);
        }
    }
    let r2 = r2_from(res.iter().sum(), tot.iter().sum());
    let per_coordinate_r2 = res.iter().zip(&tot).map(|(&r, &t)| r2_from(r, t)).collect();
    let intercept = (0..k)
        .map(|j| my[j] - (0..d).map(|i| mx[i] * weights.get(i, j)).sum::<f64>())
        .collect();
    Ok(LinearFit {
        weights,
        intercept,
        r2,
        per_coordinate_r2,
        samples: n,
    })
}

/// Inputs and outputs of every feed-forward sublayer over a corpus, one
/// sample per token. Outputs include the outer bias.
#[derive(Debug, Clone)]
pub struct FfSamples {
    pub inputs: Matrix,
    pub outputs: Matrix,
}

pub fn collect_ff_samples(model: &Model, corpus: &[Sequence]) -> Result<Vec<FfSamples>> {
    let cfg = &model.config;
    let per_seq: Vec<Vec<(Matrix, Matrix)>> = corpus
        .par_iter()
        .map(|seq| {
            let (_, trace) = model.forward(&seq.tokens, seq.segments())?;
            (0..cfg.layers)
                .map(|l| {
                    let p = &model.params.layers[l];
                    let x = trace.ff_input(l).clone();
                    let mut hidden = matmul(&x, &p.ff_in_w)?;
                    hidden.add_row_vector(&p.ff_in_b);
                    let mut y = matmul(&hidden.map(|v| cfg.activation.apply(v)), &p.ff_out_w)?;
                    y.add_row_vector(&p.ff_out_b);
                    Ok((x, y))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    (0..cfg.layers)
        .map(|l| {
            let xs: Vec<&[f64]> = per_seq.iter().flat_map(|s| s[l].0.row_iter()).collect();
            let ys: Vec<&[f64]> = per_seq.iter().flat_map(|s| s[l].1.row_iter()).collect();
            Ok(FfSamples {
                inputs: Matrix::from_rows(&xs)?,
                outputs: Matrix::from_rows(&ys)?,
            })
        })
        .collect()
}

/// Fit quality of the best linear stand-in for each feed-forward sublayer,
/// on column-standardised inputs and outputs.
pub fn ff_fit_by_layer(model: &Model, corpus: &[Sequence]) -> Result<Vec<LinearFit>> {
    collect_ff_samples(model, corpus)?
        .iter()
        .map(|s| ff_linear_fit(&zscale_columns(&s.inputs), &zscale_columns(&s.outputs)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgreementMode {
    /// Share of positions where both predictions coincide.
    Micro,
    /// Mean over gold classes of the within-class share.
    Macro,
}

impl std::str::FromStr for AgreementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(AgreementMode::Micro),
            "macro" => Ok(AgreementMode::Macro),
            other => Err(Error::Config(format!("unknown agreement mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement<L> {
    /// Percentage in `[0, 100]`.
    pub percent: f64,
    /// Predicted labels with no gold occurrence, left out of the macro mean.
    pub skipped: Vec<L>,
}

/// Percentage of shared predictions between two systems.
pub fn agreement<L: Ord + Clone>(a: &[L], b: &[L], mode: AgreementMode, gold: Option<&[L]>) -> Result<Agreement<L>> {
    if a.len() != b.len() {
        return Err(Error::Length {
            op: "agreement",
            left: a.len(),
            right: b.len(),
        });
    }
    match mode {
        AgreementMode::Micro => {
            if a.is_empty() {
                return Err(Error::Degenerate("agreement over zero predictions".into()));
            }
            let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
            Ok(Agreement {
                percent: 100.0 * same as f64 / a.len() as f64,
                skipped: Vec::new(),
            })
        }
        AgreementMode::Macro => {
            let gold = gold.ok_or_else(|| Error::Config("macro agreement needs gold labels".into()))?;
            if gold.len() != a.len() {
                return Err(Error::Length {
                    op: "agreement (gold)",
                    left: gold.len(),
                    right: a.len(),
                });
            }
            let mut per_class: BTreeMap<&L, (usize, usize)> = BTreeMap::new();
            for ((x, y), g) in a.iter().zip(b).zip(gold) {
                let e = per_class.entry(g).or_default();
                e.1 += 1;
                if x == y {
                    e.0 += 1;
                }
            }
            if per_class.is_empty() {
                return Err(Error::Degenerate("agreement over zero predictions".into()));
            }
            let skipped: Vec<L> = a
                .iter()
                .chain(b)
                .filter(|l| !per_class.contains_key(l))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .cloned()
                .collect();
            if !skipped.is_empty() {
                log::warn!("{} predicted label(s) have no gold occurrence and are skipped", skipped.len());
            }
            let mean = per_class
                .values()
                .map(|&(same, total)| same as f64 / total as f64)
                .sum::<f64>()
                / per_class.len() as f64;
            Ok(Agreement {
                percent: 100.0 * mean,
                skipped,
            })
        }
    }
}

/// Square agreement matrix between named prediction columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub names: Vec<String>,
    pub mode: AgreementMode,
    pub values: Vec<Vec<f64>>,
}

impl AgreementMatrix {
    pub fn build<L: Ord + Clone>(
        systems: &[(String, Vec<L>)],
        mode: AgreementMode,
        gold: Option<&[L]>,
    ) -> Result<Self> {
        let k = systems.len();
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = agreement(&systems[i].1, &systems[j].1, mode, gold)?.percent;
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Ok(Self {
            names: systems.iter().map(|(n, _)| n.clone()).collect(),
            mode,
            values,
        })
    }
}

pub fn accuracy<L: PartialEq>(gold: &[L], pred: &[L]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Length {
            op: "accuracy",
            left: gold.len(),
            right: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Degenerate("accuracy over zero items".into()));
    }
    Ok(gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class f1 over every label seen in gold or
/// predictions; classes with no true positives score 0.
pub fn macro_f1<L: Ord>(gold: &[L], pred: &[L]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Length {
            op: "macro_f1",
            left: gold.len(),
            right: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::Degenerate("macro-f1 over zero items".into()));
    }
    // (tp, fp, fn)
    let mut counts: BTreeMap<&L, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        if g == p {
            counts.entry(g).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    let f1s = counts.values().map(|&(tp, fp, fneg)| {
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
        }
    });
    Ok(f1s.sum::<f64>() / counts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use crate::toy::{random_corpus, random_model, ToySpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corpus(vocab: usize, n: usize, seed: u64) -> Vec<Sequence> {
        random_corpus(vocab, n, 3..=9, seed).into_iter().map(Sequence::new).collect()
    }

    #[test]
    fn importance_examples() {
        let e = [0.3, -1.2, 2.0];
        assert_eq!(importance(&e, &e).unwrap(), 1.0);
        assert_eq!(importance(&e, &[0.0; 3]).unwrap(), 0.0);
        assert!((importance(&[3.0, 4.0], &[3.0, 0.0]).unwrap() - 0.36).abs() < 1e-15);
        assert!(matches!(importance(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn shares_sum_to_one_at_every_layer() {
        let model = random_model(&ToySpec::new(3, 16, 4), 4);
        let samples = importance_samples(&model, &corpus(50, 6, 2)).unwrap();
        for layer in &samples.layers {
            for v in layer {
                assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        let profile = ImportanceProfile::from_samples(&samples);
        assert_eq!(profile.entries.len(), 16);
        assert!(profile.get(0, Term::Attention).unwrap().mean.is_none());
        for l in 0..=3 {
            let s: f64 = Term::ALL.iter().filter_map(|&t| profile.get(l, t).unwrap().mean).sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_ff_weights_zero_ff_share() {
        let mut model = random_model(&ToySpec::new(2, 8, 2), 4);
        for p in &mut model.params.layers {
            p.ff_in_w = Matrix::zeros(8, 32);
            p.ff_out_w = Matrix::zeros(32, 8);
        }
        let profile = importance_profile(&model, &corpus(50, 4, 1)).unwrap();
        for l in 1..=2 {
            assert_eq!(profile.get(l, Term::FeedForward).unwrap().mean, Some(0.0));
        }
    }

    #[test]
    fn importance_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let th: f64 = 0.7;
        let rot = |v: &[f64]| vec![th.cos() * v[0] - th.sin() * v[1], th.sin() * v[0] + th.cos() * v[1]];
        let a = importance(&e, &t).unwrap();
        let b = importance(&rot(&e), &rot(&t)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn agreement_examples() {
        let a = ["x", "x", "y", "y"];
        assert_eq!(agreement(&a, &a, AgreementMode::Micro, None).unwrap().percent, 100.0);
        assert_eq!(agreement(&["x", "x"], &["y", "y"], AgreementMode::Micro, None).unwrap().percent, 0.0);
        let b = ["x", "y", "y", "y"];
        let gold = ["x", "x", "y", "y"];
        assert_eq!(agreement(&a, &b, AgreementMode::Micro, None).unwrap().percent, 75.0);
        assert_eq!(agreement(&a, &b, AgreementMode::Macro, Some(&gold)).unwrap().percent, 75.0);
        assert!(agreement(&a, &b[..3], AgreementMode::Micro, None).is_err());
        assert!(agreement(&a, &b, AgreementMode::Macro, None).is_err());
    }

    #[test]
    fn macro_agreement_reports_labels_without_gold() {
        let a = ["x", "z"];
        let b = ["x", "x"];
        let out = agreement(&a, &b, AgreementMode::Macro, Some(&["x", "x"])).unwrap();
        assert_eq!(out.percent, 50.0);
        assert_eq!(out.skipped, vec!["z"]);
    }

    #[test]
    fn agreement_matrix_has_full_diagonal() {
        let systems = vec![
            ("a".to_string(), vec![1, 2, 3, 1]),
            ("b".to_string(), vec![1, 2, 2, 2]),
            ("c".to_string(), vec![3, 3, 3, 1]),
        ];
        let m = AgreementMatrix::build(&systems, AgreementMode::Micro, None).unwrap();
        for i in 0..3 {
            assert_eq!(m.values[i][i], 100.0);
        }
        assert_eq!(m.values[0][1], 50.0);
        assert_eq!(m.values[1][0], 50.0);
    }

    #[test]
    fn metrics_examples() {
        let g = [0, 1, 2, 1];
        assert_eq!(macro_f1(&g, &g).unwrap(), 1.0);
        assert_eq!(accuracy(&g, &[0, 1, 1, 1]).unwrap(), 0.75);
        // class 0: f1 1; class 1: tp 2 fp 1 -> 0.8; class 2: 0
        assert!((macro_f1(&g, &[0, 1, 1, 1]).unwrap() - 1.8 / 3.0).abs() < 1e-15);
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn exact_linear_map_has_unit_r2() {
        let x = random_inputs(200, 6, 1);
        let w = random_inputs(6, 4, 2);
        let mut y = matmul(&x, &w).unwrap();
        y.add_row_vector(&[0.5, -1.0, 2.0, 0.0]);
        let fit = ff_linear_fit(&zscale_columns(&x), &zscale_columns(&y)).unwrap();
        assert!((fit.r2 - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn constant_outputs_have_zero_r2() {
        let x = random_inputs(50, 3, 1);
        let y = Matrix::from_fn(50, 2, |_, j| j as f64 + 0.25);
        let fit = ff_linear_fit(&x, &y).unwrap();
        assert_eq!(fit.r2, 0.0);
    }

    #[test]
    fn underdetermined_fit_rejected() {
        let x = random_inputs(4, 4, 1);
        assert!(matches!(
            ff_linear_fit(&x, &x),
            Err(Error::InsufficientSamples { needed: 5, got: 4 })
        ));
    }

    /// Independent route: pseudo-inverse of the design matrix with an
    /// explicit column of ones.
    fn pinv_r2(x: &Matrix, y: &Matrix) -> f64 {
        let (n, d) = x.shape();
        let design = nalgebra::DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { x.get(i, j) });
        let target = nalgebra::DMatrix::from_fn(n, y.cols(), |i, j| y.get(i, j));
        let coef = design.clone().pseudo_inverse(1e-12).unwrap() * &target;
        let resid = &target - design * coef;
        let mut tot = 0.0;
        for j in 0..y.cols() {
            let m = target.column(j).mean();
            tot += target.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>();
        }
        1.0 - resid.norm_squared() / tot
    }

    #[test]
    fn gelu_ff_fit_matches_pseudo_inverse_oracle() {
        let model = random_model(&ToySpec::new(1, 8, 2), 3);
        let samples = collect_ff_samples(&model, &corpus(50, 40, 9)).unwrap();
        let s = &samples[0];
        let (x, y) = (zscale_columns(&s.inputs), zscale_columns(&s.outputs));
        let fit = ff_linear_fit(&x, &y).unwrap();
        assert!(fit.r2 < 1.0);
        assert!((fit.r2 - pinv_r2(&x, &y)).abs() <= 1e-6);
    }

    #[test]
    fn identity_activation_model_is_linear() {
        let mut spec = ToySpec::new(2, 8, 2);
        spec.activation = Activation::Identity;
        let model = random_model(&spec, 3);
        for fit in ff_fit_by_layer(&model, &corpus(50, 30, 4)).unwrap() {
            assert!((fit.r2 - 1.0).abs() <= 1e-9, "r2 = {}", fit.r2);
        }
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(seed in any::<u64>(), n in 3usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            if let Ok(r) = spearman(&a, &b) {
                let a2: Vec<f64> = a.iter().map(|x| x.exp()).collect();
                let b2: Vec<f64> = b.iter().map(|x| 3.0 * x - 1.0).collect();
                prop_assert!((spearman(&a2, &b2).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn agreement_is_symmetric(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || (0..n).map(|_| rng.random_range(0..4u8)).collect::<Vec<_>>();
            let (a, b, g) = (draw(), draw(), draw());
            for mode in [AgreementMode::Micro, AgreementMode::Macro] {
                let ab = agreement(&a, &b, mode, Some(&g)).unwrap().percent;
                let ba = agreement(&b, &a, mode, Some(&g)).unwrap().percent;
                prop_assert_eq!(ab, ba);
                prop_assert!((0.0..=100.0).contains(&ab));
            }
        }

        #[test]
        fn r2_invariant_to_sample_order(seed in any::<u64>()) {
            let x = random_inputs(30, 3, seed);
            let y = Matrix::from_fn(30, 2, |i, j| (x.get(i, 0) * (j + 1) as f64).sin() + x.get(i, 2));
            let r = ff_linear_fit(&x, &y).unwrap().r2;
            let perm: Vec<usize> = (0..30).rev().collect();
            let xp = Matrix::from_fn(30, 3, |i, j| x.get(perm[i], j));
            let yp = Matrix::from_fn(30, 2, |i, j| y.get(perm[i], j));
            prop_assert!((ff_linear_fit(&xp, &yp).unwrap().r2 - r).abs() < 1e-10);
        }

        #[test]
        fn macro_f1_invariant_under_renaming(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let p: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let rename = |v: &[u8]| v.iter().map(|x| (x + 2) % 4 + 10).collect::<Vec<_>>();
            prop_assert!((macro_f1(&g, &p).unwrap() - macro_f1(&rename(&g), &rename(&p)).unwrap()).abs() < 1e-15);
        }
    }
}
