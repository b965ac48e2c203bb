//! Multi-view feature aggregation with injected attention weights.
//!
//! A [`TokenSequence`] holds a target embedding `t` followed by one token per
//! view. Attention here has a single head; queries come from the target row
//! only, since only its output is consumed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::PI;

use crate::{Error, Result, Rgb};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    target: DVector<f64>,
    tokens: Vec<DVector<f64>>,
}

impl TokenSequence {
    pub fn new(target: DVector<f64>, tokens: Vec<DVector<f64>>) -> Result<Self> {
        if let Some(k) = tokens.iter().position(|x| x.len() != target.len()) {
            return Err(Error::shape(format!("token {k} has dimension {}, target has {}", tokens[k].len(), target.len())));
        }
        Ok(TokenSequence { target, tokens })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    /// Number of views `K`.
    pub fn views(&self) -> usize {
        self.tokens.len()
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn tokens(&self) -> &[DVector<f64>] {
        &self.tokens
    }

    /// Row `j` of the full sequence: `t` for `j = 0`, view `j` otherwise.
    pub fn row(&self, j: usize) -> &DVector<f64> {
        if j == 0 {
            &self.target
        } else {
            &self.tokens[j - 1]
        }
    }

    pub fn with_target(&self, target: DVector<f64>) -> Result<Self> {
        TokenSequence::new(target, self.tokens.clone())
    }
}

/// How the view-specific features are merged into a token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenMode {
    /// `x_k = f_spec^k + [I^k, f_context]`, the embedding-style sum.
    #[default]
    Additive,
    /// `x_k = [f_spec^k, I^k, f_context]`, the ablation without the sum.
    Concat,
}

/// Builds per-view tokens from specular features, view colors and a shared context vector.
pub fn build_tokens(
    f_spec: &[DVector<f64>],
    image_rgb: &[Rgb],
    f_context: &DVector<f64>,
    target: DVector<f64>,
    mode: TokenMode,
) -> Result<TokenSequence> {
    if f_spec.len() != image_rgb.len() {
        return Err(Error::shape(format!("{} specular features for {} views", f_spec.len(), image_rgb.len())));
    }
    let d_c = f_context.len();
    let tokens = f_spec
        .iter()
        .zip(image_rgb)
        .map(|(fs, rgb)| {
            let appended = DVector::from_iterator(3 + d_c, rgb.iter().chain(f_context.iter()).copied());
            match mode {
                TokenMode::Additive => {
                    if fs.len() != 3 + d_c {
                        return Err(Error::shape(format!("specular feature has dimension {}, expected 3 + {d_c}", fs.len())));
                    }
                    Ok(fs + appended)
                }
                TokenMode::Concat => Ok(DVector::from_iterator(fs.len() + 3 + d_c, fs.iter().chain(appended.iter()).copied())),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new(target, tokens)
}

/// Query, key and value projections (`d × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
}

impl AttentionParams {
    pub fn new(wq: DMatrix<f64>, wk: DMatrix<f64>, wv: DMatrix<f64>) -> Result<Self> {
        let d = wq.nrows();
        for (name, m) in [("query", &wq), ("key", &wk), ("value", &wv)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::shape(format!("{name} matrix is {}×{}, expected {d}×{d}", m.nrows(), m.ncols())));
            }
            if !m.iter().all(|x| x.is_finite()) {
                return Err(Error::domain(format!("{name} matrix has non-finite entries")));
            }
        }
        Ok(AttentionParams { wq, wk, wv })
    }

    /// Entries uniform in `±1/√d`.
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (d.max(1) as f64).sqrt();
        let mut m = || DMatrix::from_fn(d, d, |_, _| rng.gen_range(-s..s));
        AttentionParams { wq: m(), wk: m(), wv: m() }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    fn check(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.dim() != self.dim() {
            return Err(Error::shape(format!("tokens have dimension {}, weights {}", tokens.dim(), self.dim())));
        }
        Ok(())
    }

    fn score(&self, q: &DVector<f64>, row: &DVector<f64>) -> f64 {
        q.dot(&(&self.wk * row)) / (self.dim() as f64).sqrt()
    }
}

/// Softmax over the target row and unmasked views; masked rows are never read.
///
/// `mask` has `K + 1` entries and `mask[0]` (the target) must be 1.
pub fn masked_attention(tokens: &TokenSequence, params: &AttentionParams, mask: &[u8]) -> Result<DVector<f64>> {
    params.check(tokens)?;
    if mask.len() != tokens.views() + 1 {
        return Err(Error::shape(format!("mask has {} entries for {} views", mask.len(), tokens.views())));
    }
    if mask[0] != 1 {
        return Err(Error::domain("the target entry of the mask must be 1"));
    }
    let q = &params.wq * tokens.target();
    let kept: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] != 0).collect();
    let scores: Vec<f64> = kept.iter().map(|&j| params.score(&q, tokens.row(j))).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = DVector::zeros(tokens.dim());
    for (&j, e) in kept.iter().zip(&exps) {
        out += (&params.wv * tokens.row(j)) * (e / total);
    }
    Ok(out)
}

/// Convex coefficients over the `K + 1` rows: softmax scores times `(0, w)`, L1-normalized.
///
/// The target row carries weight 0. If every product vanishes the coefficients
/// fall back to the target row alone.
pub fn weighted_coefficients(tokens: &TokenSequence, params: &AttentionParams, w: &[f64]) -> Result<Vec<f64>> {
    params.check(tokens)?;
    if w.len() != tokens.views() {
        return Err(Error::shape(format!("{} weights for {} views", w.len(), tokens.views())));
    }
    if let Some(x) = w.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
        return Err(Error::domain(format!("view weight {x} is negative or not finite")));
    }
    let q = &params.wq * tokens.target();
    let scores: Vec<f64> = (0..=tokens.views()).map(|j| params.score(&q, tokens.row(j))).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut c: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    c[0] = 0.0;
    for (ck, wk) in c[1..].iter_mut().zip(w) {
        *ck *= wk;
    }
    let total: f64 = c.iter().sum();
    if total > 0.0 {
        c.iter_mut().for_each(|x| *x /= total);
    } else {
        c.iter_mut().for_each(|x| *x = 0.0);
        c[0] = 1.0;
    }
    Ok(c)
}

/// Convex combination of the value rows with [`weighted_coefficients`].
pub fn weighted_attention(tokens: &TokenSequence, params: &AttentionParams, w: &[f64]) -> Result<DVector<f64>> {
    let c = weighted_coefficients(tokens, params, w)?;
    let mut out = DVector::zeros(tokens.dim());
    for (j, cj) in c.iter().enumerate() {
        if *cj != 0.0 {
            out += (&params.wv * tokens.row(j)) * *cj;
        }
    }
    Ok(out)
}

/// Stacked masked-attention layers; each layer's output becomes the next target embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalAttention {
    layers: Vec<AttentionParams>,
}

/// Default depth of [`DirectionalAttention`].
pub const DEFAULT_LAYERS: usize = 2;

impl DirectionalAttention {
    pub fn new(layers: Vec<AttentionParams>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::domain("at least one attention layer is required"));
        };
        if layers.iter().any(|l| l.dim() != first.dim()) {
            return Err(Error::shape("attention layers differ in dimension"));
        }
        Ok(DirectionalAttention { layers })
    }

    pub fn random(d: usize, layers: usize, rng: &mut impl Rng) -> Result<Self> {
        DirectionalAttention::new((0..layers).map(|_| AttentionParams::random(d, rng)).collect())
    }

    pub fn layers(&self) -> &[AttentionParams] {
        &self.layers
    }

    pub fn forward(&self, tokens: &TokenSequence, mask: &[u8]) -> Result<DVector<f64>> {
        let mut seq = tokens.clone();
        let mut t = tokens.target().clone();
        for layer in &self.layers {
            t = masked_attention(&seq, layer, mask)?;
            seq = seq.with_target(t.clone())?;
        }
        Ok(t)
    }
}

/// Weighted mean and per-component weighted variance, concatenated (`2d` entries).
pub fn mean_variance_aggregate(values: &[DVector<f64>], w: &[f64]) -> Result<DVector<f64>> {
    let Some(first) = values.first() else {
        return Err(Error::NoData("no values to aggregate".into()));
    };
    if w.len() != values.len() {
        return Err(Error::shape(format!("{} weights for {} values", w.len(), values.len())));
    }
    let d = first.len();
    if values.iter().any(|v| v.len() != d) {
        return Err(Error::shape("values differ in dimension"));
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("weights must be nonnegative and sum to 1 (sum {sum})")));
    }
    let mut mean = DVector::zeros(d);
    for (v, wk) in values.iter().zip(w) {
        mean += v * *wk;
    }
    let mut var = DVector::zeros(d);
    for (v, wk) in values.iter().zip(w) {
        var += (v - &mean).map(|x| x * x) * *wk;
    }
    Ok(DVector::from_iterator(2 * d, mean.iter().chain(var.iter()).copied()))
}

/// `[sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]` for each component of `x`.
pub fn positional_encode(x: &[f64], num_freqs: usize) -> Result<Vec<f64>> {
    if num_freqs == 0 {
        return Err(Error::domain("num_freqs must be at least 1"));
    }
    let mut out = Vec::with_capacity(2 * num_freqs * x.len());
    for &v in x {
        for k in 0..num_freqs {
            let a = (1u64 << k) as f64 * PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(out)
}
