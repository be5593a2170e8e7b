// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact additive decomposition of encoder representations.
//!
//! Any representation traced at a sublayer cut splits into four terms,
//! `e = i + h + f + c`:
//!
//! - `i`: the raw input sum, rescaled by every layer norm below the cut;
//! - `h`: the unbiased attention outputs, each a weighted bag of value
//!   projections, rescaled by the layer norms above the sublayer;
//! - `f`: the unbiased feed-forward outputs, rescaled likewise;
//! - `c`: layer-norm biases, layer-norm mean shifts and sublayer biases.
//!
//! Two independent routes compute the terms. [`decompose_closed`] evaluates
//! the closed-form sums with precomputed [`ScaleChain`]s;
//! [`decompose_recurrence`] pushes four accumulators through the network one
//! sublayer at a time. They agree to rounding error and serve as each
//! other's oracle.

use crate::encoder::{ForwardTrace, Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix, Vector};

/// One of the four additive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Input,
    Attention,
    FeedForward,
    Bias,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Input, Term::Attention, Term::FeedForward, Term::Bias];

    pub fn symbol(self) -> char {
        match self {
            Term::Input => 'i',
            Term::Attention => 'h',
            Term::FeedForward => 'f',
            Term::Bias => 'c',
        }
    }

    pub fn from_symbol(c: char) -> Option<Term> {
        match c {
            'i' => Some(Term::Input),
            'h' => Some(Term::Attention),
            'f' => Some(Term::FeedForward),
            'c' => Some(Term::Bias),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// The four terms of every token at one sublayer cut, plus the traced
/// representation they reconstruct. Each matrix is `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSet {
    cut: usize,
    terms: [Matrix; 4],
    reference: Matrix,
}

impl TermSet {
    pub fn new(cut: usize, terms: [Matrix; 4], reference: Matrix) -> Result<Self> {
        for m in &terms {
            if m.shape() != reference.shape() {
                return Err(Error::Shape {
                    op: "TermSet::new",
                    left_rows: m.rows(),
                    left_cols: m.cols(),
                    right_rows: reference.rows(),
                    right_cols: reference.cols(),
                });
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("term at cut {cut}")));
            }
        }
        Ok(Self { cut, terms, reference })
    }

    pub fn cut(&self) -> usize {
        self.cut
    }

    pub fn tokens(&self) -> usize {
        self.reference.rows()
    }

    pub fn dim(&self) -> usize {
        self.reference.cols()
    }

    pub fn term(&self, term: Term) -> &Matrix {
        &self.terms[term.index()]
    }

    #[cfg(test)]
    pub(crate) fn term_mut(&mut self, term: Term) -> &mut Matrix {
        &mut self.terms[term.index()]
    }

    /// The traced representation at the cut.
    pub fn reference(&self) -> &Matrix {
        &self.reference
    }

    /// Sum of the selected terms for token `t`, added in `Term::ALL` order.
    pub fn sum_terms(&self, t: usize, selected: impl IntoIterator<Item = Term>) -> Vector {
        let mut picked: Vec<Term> = selected.into_iter().collect();
        picked.sort();
        picked.dedup();
        let mut out = vec![0.0; self.dim()];
        for term in picked {
            for (o, v) in out.iter_mut().zip(self.term(term).row(t)) {
                *o += v;
            }
        }
        out
    }

    /// `i + h + f + c` for token `t`.
    pub fn total(&self, t: usize) -> Vector {
        self.sum_terms(t, Term::ALL)
    }

    /// Largest termwise absolute difference to another term set.
    pub fn max_term_diff(&self, other: &TermSet) -> f64 {
        Term::ALL
            .iter()
            .map(|&t| self.term(t).max_abs_diff(other.term(t)))
            .fold(0.0, f64::max)
    }
}

/// Composite layer-norm scaling `(prod g) / (prod s)` applied to anything
/// injected at sublayer `start` and carried up to the cut.
///
/// Factors are accumulated top down, so every start point costs one
/// elementwise product.
#[derive(Debug, Clone)]
pub struct ScaleChain {
    cut: usize,
    first: usize,
    /// `factors[k]` covers the range `[first + k, cut]`; the last entry is
    /// the empty range (all ones).
    factors: Vec<Matrix>,
}

impl ScaleChain {
    pub fn new(params: &ModelParams, trace: &ForwardTrace, cut: usize) -> Result<Self> {
        check_cut(trace, cut)?;
        let first = usize::from(!trace.has_initial_ln());
        let n = trace.tokens();
        let d = trace.input().cols();
        let mut running = Matrix::from_fn(n, d, |_, _| 1.0);
        let mut factors = vec![running.clone()];
        for lambda in (first..=cut).rev() {
            let ln = params.ln(lambda).ok_or_else(|| missing_ln(lambda))?;
            let stats = trace.ln_stats(lambda).ok_or_else(|| missing_ln(lambda))?;
            for t in 0..n {
                let s = stats.std[t];
                for (x, g) in running.row_mut(t).iter_mut().zip(&ln.gain) {
                    *x *= g / s;
                }
            }
            factors.push(running.clone());
        }
        factors.reverse();
        Ok(Self { cut, first, factors })
    }

    /// Chain over `[start, cut]`; an empty range yields ones.
    pub fn factor(&self, start: usize) -> &Matrix {
        let start = start.max(self.first);
        if start > self.cut {
            return self.factors.last().expect("chain has an identity entry");
        }
        &self.factors[start - self.first]
    }
}

fn missing_ln(lambda: usize) -> Error {
    Error::Config(format!("no layer norm recorded for sublayer {lambda}"))
}

fn check_cut(trace: &ForwardTrace, cut: usize) -> Result<()> {
    if cut > trace.depth() {
        return Err(Error::CutRange {
            cut,
            depth: trace.depth(),
        });
    }
    Ok(())
}

fn check_compat(model: &Model, trace: &ForwardTrace) -> Result<()> {
    if trace.layer_count() != model.config.layers
        || trace.has_initial_ln() != model.config.initial_ln
        || trace.input().cols() != model.config.hidden
    {
        return Err(Error::Config("trace was not produced by this model".into()));
    }
    Ok(())
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, j))
}

/// Unbiased attention output of `layer` as a sum over heads of
/// `(alpha_h X) Z_h` with `Z_h = W_V[:, head] W_O[head, :]`.
fn attention_unbiased_by_head(params: &ModelParams, cfg: &ModelConfig, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    let p = &params.layers[layer];
    let x = trace.attn_input(layer);
    let dh = cfg.head_dim();
    let mut out = Matrix::zeros(x.rows(), cfg.hidden);
    for (h, alpha) in trace.heads(layer).iter().enumerate() {
        let (a, b) = (h * dh, (h + 1) * dh);
        // the zero-padded identity only selects this head's slice
        let z = matmul(&p.value_w.column_slice(a, b), &p.attn_out_w.row_slice(a, b))?;
        let mixed = matmul(alpha, x)?;
        out.add_assign(&matmul(&mixed, &z)?)?;
    }
    Ok(out)
}

/// Unbiased attention output of `layer`, computed by writing each head's
/// weighted value projections into its column slice and projecting once.
fn attention_unbiased_concat(params: &ModelParams, cfg: &ModelConfig, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    let p = &params.layers[layer];
    let x = trace.attn_input(layer);
    let values = matmul(x, &p.value_w)?;
    let dh = cfg.head_dim();
    let mut concat = Matrix::zeros(x.rows(), cfg.hidden);
    for (h, alpha) in trace.heads(layer).iter().enumerate() {
        let (a, b) = (h * dh, (h + 1) * dh);
        concat.set_columns(a, &matmul(alpha, &values.column_slice(a, b))?);
    }
    matmul(&concat, &p.attn_out_w)
}

/// Feed-forward output of `layer` without its outer bias.
fn ff_unbiased(params: &ModelParams, cfg: &ModelConfig, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    let p = &params.layers[layer];
    let mut hidden = matmul(trace.ff_input(layer), &p.ff_in_w)?;
    hidden.add_row_vector(&p.ff_in_b);
    let hidden = hidden.map(|v| cfg.activation.apply(v));
    matmul(&hidden, &p.ff_out_w)
}

/// Closed-form decomposition of the representation after sublayer `cut`.
///
/// Cut 0 is the embedding layer norm (or the raw input sum when the model
/// has none); cut `2L` is the output embedding.
pub fn decompose_closed(model: &Model, trace: &ForwardTrace, cut: usize) -> Result<TermSet> {
    check_compat(model, trace)?;
    check_cut(trace, cut)?;
    let params = &model.params;
    let cfg = &model.config;
    let chain = ScaleChain::new(params, trace, cut)?;
    let first = cfg.first_ln();
    let (n, d) = trace.input().shape();

    let input = hadamard(chain.factor(first), trace.input());

    let mut attention = Matrix::zeros(n, d);
    let mut feed_forward = Matrix::zeros(n, d);
    for layer in 0..cfg.layers {
        let (attn_sub, ff_sub) = (2 * layer + 1, 2 * layer + 2);
        if attn_sub <= cut {
            let raw = attention_unbiased_by_head(params, cfg, trace, layer)?;
            attention.add_assign(&hadamard(chain.factor(attn_sub), &raw))?;
        }
        if ff_sub <= cut {
            let raw = ff_unbiased(params, cfg, trace, layer)?;
            feed_forward.add_assign(&hadamard(chain.factor(ff_sub), &raw))?;
        }
    }

    let mut bias = Matrix::zeros(n, d);
    for lambda in first..=cut {
        let ln = params.ln(lambda).ok_or_else(|| missing_ln(lambda))?;
        let stats = trace.ln_stats(lambda).ok_or_else(|| missing_ln(lambda))?;
        let above = chain.factor(lambda + 1);
        let from = chain.factor(lambda);
        for t in 0..n {
            let m = stats.mean[t];
            let (above, from) = (above.row(t), from.row(t));
            for (j, c) in bias.row_mut(t).iter_mut().enumerate() {
                *c += above[j] * ln.bias[j] - from[j] * m;
            }
        }
    }
    for lambda in 1..=cut {
        let b = params.sublayer_bias(lambda)?;
        let from = chain.factor(lambda);
        for t in 0..n {
            let from = from.row(t);
            for (j, c) in bias.row_mut(t).iter_mut().enumerate() {
                *c += from[j] * b[j];
            }
        }
    }

    TermSet::new(
        cut,
        [input, attention, feed_forward, bias],
        trace.representation(cut)?.clone(),
    )
}

/// Online decomposition: four accumulators are carried through every
/// sublayer up to `cut`.
///
/// Each sublayer adds its unbiased output to `h` or `f` and its bias to `c`;
/// each layer norm then rescales all four accumulators by `g / s` and adds
/// `-m g / s + b` to `c`.
pub fn decompose_recurrence(model: &Model, trace: &ForwardTrace, cut: usize) -> Result<TermSet> {
    check_compat(model, trace)?;
    check_cut(trace, cut)?;
    let params = &model.params;
    let cfg = &model.config;
    let (n, d) = trace.input().shape();

    let mut acc = [
        trace.input().clone(),
        Matrix::zeros(n, d),
        Matrix::zeros(n, d),
        Matrix::zeros(n, d),
    ];

    let apply_ln = |acc: &mut [Matrix; 4], lambda: usize| -> Result<()> {
        let ln = params.ln(lambda).ok_or_else(|| missing_ln(lambda))?;
        let stats = trace.ln_stats(lambda).ok_or_else(|| missing_ln(lambda))?;
        for t in 0..n {
            let (m, s) = (stats.mean[t], stats.std[t]);
            for m_acc in acc.iter_mut() {
                for (x, g) in m_acc.row_mut(t).iter_mut().zip(&ln.gain) {
                    *x *= g / s;
                }
            }
            for (j, c) in acc[3].row_mut(t).iter_mut().enumerate() {
                *c += -m * (ln.gain[j] / s) + ln.bias[j];
            }
        }
        Ok(())
    };

    if cfg.initial_ln {
        apply_ln(&mut acc, 0)?;
    }
    for lambda in 1..=cut {
        let layer = (lambda - 1) / 2;
        if lambda % 2 == 1 {
            acc[1].add_assign(&attention_unbiased_concat(params, cfg, trace, layer)?)?;
        } else {
            acc[2].add_assign(&ff_unbiased(params, cfg, trace, layer)?)?;
        }
        acc[3].add_row_vector(&params.sublayer_bias(lambda)?);
        apply_ln(&mut acc, lambda)?;
    }

    TermSet::new(cut, acc, trace.representation(cut)?.clone())
}

/// Outcome of checking `i + h + f + c` against the traced representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub cut: usize,
    pub tolerance: f64,
    /// Per token: `max_j |(i + h + f + c)_j - e_j|`.
    pub per_token: Vec<f64>,
    pub max: f64,
    pub mean: f64,
    /// Tokens whose residual exceeds the tolerance.
    pub exceeding: Vec<usize>,
}

impl ResidualReport {
    pub fn passed(&self) -> bool {
        self.exceeding.is_empty()
    }
}

/// Residual of the additive identity for every token of `terms`.
pub fn verify(terms: &TermSet, tolerance: f64) -> ResidualReport {
    let per_token: Vec<f64> = (0..terms.tokens())
        .map(|t| {
            terms
                .total(t)
                .iter()
                .zip(terms.reference().row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let max = per_token.iter().copied().fold(0.0, f64::max);
    let mean = if per_token.is_empty() {
        0.0
    } else {
        per_token.iter().sum::<f64>() / per_token.len() as f64
    };
    // `!(r <= tol)` also flags NaN residuals
    let exceeding = per_token
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_nan() || **r > tolerance)
        .map(|(t, _)| t)
        .collect();
    ResidualReport {
        cut: terms.cut(),
        tolerance,
        per_token,
        max,
        mean,
        exceeding,
    }
}

/// Constant vectors spanning every bias term `c` of a model.
///
/// With `G(a)` the elementwise product of gains from sublayer `a` up to the
/// top and `S(a, t)` the matching product of deviations,
///
/// ```text
/// c_t = sum_{k=0..L2} p_k / S(k+1, t)  +  sum_{k in LNs} q_k * (-m_{k,t} / S(k, t))
/// p_k = G(k+1) * (b_LN,k + b_S,k+1)      q_k = G(k)
/// ```
///
/// where `L2 = 2L`, `b_S,k` is the bias emitted by sublayer `k` (zero beyond
/// the top) and `b_LN,0` is zero when the model has no embedding layer norm.
/// `p_{2L}` has coefficient one for every token, so the `c_t` lie on an
/// affine subspace spanned by the remaining `2L` vectors (`2L + 1` with an
/// embedding layer norm) through `p_{2L}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperplaneBasis {
    first: usize,
    depth: usize,
    p: Vec<Vector>,
    q: Vec<Vector>,
}

/// Scalar weights of the basis vectors for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisCoefficients {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Computes the constant basis vectors of `model`.
pub fn hyperplane_basis(model: &Model) -> Result<HyperplaneBasis> {
    let params = &model.params;
    let cfg = &model.config;
    let depth = cfg.sublayers();
    let first = cfg.first_ln();
    let d = cfg.hidden;

    // gains_from[k] = G(k), with G(depth + 1) = ones
    let mut gains_from = vec![vec![1.0; d]; depth + 2];
    for k in (first..=depth).rev() {
        let g = &params.ln(k).ok_or_else(|| missing_ln(k))?.gain;
        gains_from[k] = gains_from[k + 1].iter().zip(g).map(|(a, b)| a * b).collect();
    }
    if first == 1 {
        gains_from[0] = gains_from[1].clone();
    }

    let mut p = Vec::with_capacity(depth + 1);
    for k in 0..=depth {
        let mut v = match params.ln(k) {
            Some(ln) if k >= first => ln.bias.clone(),
            _ => vec![0.0; d],
        };
        if k < depth {
            for (x, b) in v.iter_mut().zip(params.sublayer_bias(k + 1)?) {
                *x += b;
            }
        }
        p.push(v.iter().zip(&gains_from[k + 1]).map(|(a, g)| a * g).collect());
    }
    let q = (first..=depth).map(|k| gains_from[k].clone()).collect();
    Ok(HyperplaneBasis { first, depth, p, q })
}

impl HyperplaneBasis {
    /// `p_{2L}`, the vector every `c_t` contains with unit weight.
    pub fn offset(&self) -> &[f64] {
        &self.p[self.depth]
    }

    /// The non-constant basis vectors: `p_0..p_{2L-1}` then the `q_k`.
    pub fn directions(&self) -> Vec<&[f64]> {
        self.p[..self.depth]
            .iter()
            .chain(&self.q)
            .map(Vec::as_slice)
            .collect()
    }

    /// Every basis vector including the offset.
    pub fn vectors(&self) -> Vec<&[f64]> {
        self.p.iter().chain(&self.q).map(Vec::as_slice).collect()
    }

    pub fn coefficients(&self, trace: &ForwardTrace, t: usize) -> Result<BasisCoefficients> {
        if trace.depth() != self.depth || trace.has_initial_ln() != (self.first == 0) {
            return Err(Error::Config("trace does not match the basis model".into()));
        }
        if t >= trace.tokens() {
            return Err(Error::Index {
                what: "token",
                position: t,
                value: t,
                bound: trace.tokens(),
            });
        }
        // inv_from[k] = 1 / S(k, t), with S(depth + 1, t) = 1
        let mut inv_from = vec![1.0; self.depth + 2];
        for k in (self.first..=self.depth).rev() {
            let s = trace.ln_stats(k).ok_or_else(|| missing_ln(k))?.std[t];
            inv_from[k] = inv_from[k + 1] / s;
        }
        if self.first == 1 {
            inv_from[0] = inv_from[1];
        }
        let p = (0..=self.depth).map(|k| inv_from[k + 1]).collect();
        let q = (self.first..=self.depth)
            .map(|k| -trace.ln_stats(k).expect("checked above").mean[t] * inv_from[k])
            .collect();
        Ok(BasisCoefficients { p, q })
    }

    /// Rebuilds `c_t` from the basis and the token's layer-norm statistics.
    pub fn reconstruct_c(&self, trace: &ForwardTrace, t: usize) -> Result<Vector> {
        let coeff = self.coefficients(trace, t)?;
        let mut out = vec![0.0; self.offset().len()];
        for (w, v) in coeff.p.iter().zip(&self.p).chain(coeff.q.iter().zip(&self.q)) {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        Ok(out)
    }
}

/// Singular values of the stacked rows, largest first.
pub fn singular_values(rows: &[&[f64]]) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let m = nalgebra::DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values at or above `rel_threshold * sigma_max`.
pub fn numerical_rank(rows: &[&[f64]], rel_threshold: f64) -> usize {
    let sv = singular_values(rows);
    match sv.first() {
        Some(&top) if top > 0.0 => sv.iter().filter(|&&s| s >= rel_threshold * top).count(),
        _ => 0,
    }
}

/// Rows minus their mean row.
pub fn centered(rows: &[Vector]) -> Vec<Vector> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect()
}
