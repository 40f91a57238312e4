//! Word distance, the word-level triplet loss with margin capping, its
//! contrastive counterpart, and the per-sentence metric penalty.
//!
//! Every loss returns its value together with exact analytic gradients with
//! respect to each participating vector. Non-differentiable points use fixed
//! subgradients:
//!
//! * `ℓ2` at coincident vectors (distance below `epsilon_guard`): zero.
//! * `ℓ1`: `sign(0) = 0`.
//! * `ℓ∞`: the gradient flows through the coordinate of largest absolute
//!   difference only, ties going to the lowest coordinate index.
//! * `min(d, α)`: the cap is active (zero gradient) when `d >= α`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::synonyms::{NegativeSet, SynonymDict};

/// Order of the `ℓp` norm used as word distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
    LInf,
}

impl Norm {
    /// Distance without a dimensionality check.
    pub(crate) fn distance(self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), v.len());
        let diffs = u.iter().zip(v).map(|(a, b)| a - b);
        match self {
            Norm::L1 => diffs.map(f64::abs).sum(),
            Norm::L2 => diffs.map(|x| x * x).sum::<f64>().sqrt(),
            Norm::LInf => diffs.map(f64::abs).fold(0.0, f64::max),
        }
    }

    /// Adds `scale * ∂d(u, v)/∂u` into `out`. The gradient with respect to
    /// `v` is the negation.
    fn accumulate_grad(self, u: &[f64], v: &[f64], dist: f64, guard: f64, scale: f64, out: &mut [f64]) {
        match self {
            Norm::L1 => {
                for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                    *o += scale * sign(a - b);
                }
            }
            Norm::L2 => {
                if dist < guard {
                    return;
                }
                for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                    *o += scale * (a - b) / dist;
                }
            }
            Norm::LInf => {
                let mut best = 0;
                let mut best_abs = f64::NEG_INFINITY;
                for (j, (a, b)) in u.iter().zip(v).enumerate() {
                    let abs = (a - b).abs();
                    if abs > best_abs {
                        best = j;
                        best_abs = abs;
                    }
                }
                if let Some(o) = out.get_mut(best) {
                    *o += scale * sign(u[best] - v[best]);
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::LInf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "infinity" => Ok(Norm::LInf),
            other => Err(Error::InvalidConfig(format!("unknown norm order `{other}`"))),
        }
    }
}

/// `‖u − v‖_p`.
pub fn word_distance(u: &[f64], v: &[f64], p: Norm) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(p.distance(u, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    Triplet,
    Contrastive,
}

/// How the per-sentence penalty is averaged over tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AvgMode {
    /// Divide by the number of tokens that have at least one synonym.
    NonEmpty,
    /// Divide by the sentence length.
    All,
}

impl FromStr for AvgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nonempty" => Ok(AvgMode::NonEmpty),
            "all" => Ok(AvgMode::All),
            other => Err(Error::InvalidConfig(format!("unknown avg_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub p: Norm,
    /// Margin α; negatives farther than this are no longer pushed.
    pub alpha: f64,
    pub variant: LossVariant,
    /// Temperature τ of the contrastive variant.
    pub tau: f64,
    pub epsilon_guard: f64,
    /// Also cap the numerator distances of the contrastive loss.
    pub cap_numerator: bool,
    pub avg_mode: AvgMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            p: Norm::L2,
            alpha: 1.0,
            variant: LossVariant::Triplet,
            tau: 20.0,
            epsilon_guard: 1e-12,
            cap_numerator: false,
            avg_mode: AvgMode::NonEmpty,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be a nonnegative finite number, got {}", self.alpha)));
        }
        if self.variant == LossVariant::Contrastive && !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon_guard > 0.0) {
            return Err(Error::InvalidConfig("epsilon_guard must be positive".into()));
        }
        Ok(())
    }
}

/// Loss value and gradients for one anchor and its explicit positive and
/// negative vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorLoss {
    pub value: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Loss value with gradients keyed by word index. Words that do not
/// participate have no entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BTreeMap<usize, Vec<f64>>,
}

impl LossOutput {
    fn add_grad(&mut self, word: usize, grad: &[f64], scale: f64) {
        let entry = self.grads.entry(word).or_insert_with(|| vec![0.0; grad.len()]);
        for (e, g) in entry.iter_mut().zip(grad) {
            *e += scale * g;
        }
    }
}

fn check_dims(anchor: &[f64], others: &[&[f64]]) -> Result<()> {
    for other in others {
        if other.len() != anchor.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                found: other.len(),
            });
        }
    }
    Ok(())
}

/// Word-level triplet loss
/// `mean_{w'∈S} d(w, w') − mean_{w̃∈N} min(d(w, w̃), α) + α`.
///
/// An empty positive (or negative) list drops its mean term. The value is not
/// clipped at zero.
pub fn triplet_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], config: &LossConfig) -> Result<VectorLoss> {
    if positives.is_empty() && negatives.is_empty() {
        return Err(Error::Empty("triplet loss needs at least one positive or negative".into()));
    }
    check_dims(anchor, positives)?;
    check_dims(anchor, negatives)?;
    let dims = anchor.len();
    let p = config.p;
    let alpha = config.alpha;
    let guard = config.epsilon_guard;

    let mut out = VectorLoss {
        value: alpha,
        anchor: vec![0.0; dims],
        positives: Vec::with_capacity(positives.len()),
        negatives: Vec::with_capacity(negatives.len()),
    };

    if !positives.is_empty() {
        let w = 1.0 / positives.len() as f64;
        for pos in positives {
            let d = p.distance(anchor, pos);
            out.value += w * d;
            let mut g = vec![0.0; dims];
            p.accumulate_grad(anchor, pos, d, guard, w, &mut g);
            for (a, x) in out.anchor.iter_mut().zip(&g) {
                *a += x;
            }
            out.positives.push(g.into_iter().map(|x| -x).collect());
        }
    }
    if !negatives.is_empty() {
        let w = 1.0 / negatives.len() as f64;
        for neg in negatives {
            let d = p.distance(anchor, neg);
            out.value -= w * d.min(alpha);
            let mut g = vec![0.0; dims];
            if d < alpha {
                p.accumulate_grad(anchor, neg, d, guard, -w, &mut g);
            }
            for (a, x) in out.anchor.iter_mut().zip(&g) {
                *a += x;
            }
            out.negatives.push(g.into_iter().map(|x| -x).collect());
        }
    }
    Ok(out)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Contrastive variant
/// `−log( Σ_{S} exp(−d/τ) / Σ_{S∪N} exp(−min(d, α)/τ) )`.
///
/// The denominator caps every distance, positives included. With
/// `cap_numerator` the numerator distances are capped too.
pub fn contrastive_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], config: &LossConfig) -> Result<VectorLoss> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("contrastive loss needs positives and negatives".into()));
    }
    check_dims(anchor, positives)?;
    check_dims(anchor, negatives)?;
    let dims = anchor.len();
    let p = config.p;
    let alpha = config.alpha;
    let tau = config.tau;

    let pos_d: Vec<f64> = positives.iter().map(|v| p.distance(anchor, v)).collect();
    let neg_d: Vec<f64> = negatives.iter().map(|v| p.distance(anchor, v)).collect();

    let num_arg: Vec<f64> = pos_d
        .iter()
        .map(|&d| if config.cap_numerator { -d.min(alpha) / tau } else { -d / tau })
        .collect();
    let den_arg: Vec<f64> = pos_d.iter().chain(&neg_d).map(|&d| -d.min(alpha) / tau).collect();

    let num_lse = log_sum_exp(&num_arg);
    let den_lse = log_sum_exp(&den_arg);
    let value = den_lse - num_lse;

    // ∂value/∂d_j per participating distance.
    let mut d_pos = vec![0.0; pos_d.len()];
    for (j, &d) in pos_d.iter().enumerate() {
        let q = (num_arg[j] - num_lse).exp();
        if !config.cap_numerator || d < alpha {
            d_pos[j] += q / tau;
        }
        if d < alpha {
            let r = (den_arg[j] - den_lse).exp();
            d_pos[j] -= r / tau;
        }
    }
    let d_neg: Vec<f64> = neg_d
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            if d < alpha {
                -(den_arg[pos_d.len() + j] - den_lse).exp() / tau
            } else {
                0.0
            }
        })
        .collect();

    let mut out = VectorLoss {
        value,
        anchor: vec![0.0; dims],
        positives: Vec::with_capacity(positives.len()),
        negatives: Vec::with_capacity(negatives.len()),
    };
    let mut chain = |v: &[f64], d: f64, c: f64| {
        let mut g = vec![0.0; dims];
        if c != 0.0 {
            p.accumulate_grad(anchor, v, d, config.epsilon_guard, c, &mut g);
        }
        for (a, x) in out.anchor.iter_mut().zip(&g) {
            *a += x;
        }
        g.into_iter().map(|x| -x).collect::<Vec<f64>>()
    };
    let pos_grads: Vec<Vec<f64>> = (0..positives.len()).map(|j| chain(positives[j], pos_d[j], d_pos[j])).collect();
    let neg_grads: Vec<Vec<f64>> = (0..negatives.len()).map(|j| chain(negatives[j], neg_d[j], d_neg[j])).collect();
    out.positives = pos_grads;
    out.negatives = neg_grads;
    Ok(out)
}

/// Dispatches on `config.variant`.
pub fn metric_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], config: &LossConfig) -> Result<VectorLoss> {
    match config.variant {
        LossVariant::Triplet => triplet_loss(anchor, positives, negatives, config),
        LossVariant::Contrastive => contrastive_loss(anchor, positives, negatives, config),
    }
}

/// Loss for one vocabulary word against its synonyms and a negative set,
/// with gradients keyed by word index.
pub fn word_loss(matrix: &EmbeddingMatrix, anchor: usize, synonyms: &[usize], negatives: &NegativeSet, config: &LossConfig) -> Result<LossOutput> {
    let rows = matrix.rows();
    for &i in std::iter::once(&anchor).chain(synonyms).chain(negatives.words()) {
        if i >= rows {
            return Err(Error::OutOfRange { index: i, size: rows });
        }
    }
    let a = matrix.row_slice(anchor);
    let pos: Vec<&[f64]> = synonyms.iter().map(|&i| matrix.row_slice(i)).collect();
    let neg: Vec<&[f64]> = negatives.words().iter().map(|&i| matrix.row_slice(i)).collect();
    let loss = metric_loss(a, &pos, &neg, config)?;

    let mut out = LossOutput {
        value: loss.value,
        grads: BTreeMap::new(),
    };
    out.add_grad(anchor, &loss.anchor, 1.0);
    for (&i, g) in synonyms.iter().zip(&loss.positives) {
        out.add_grad(i, g, 1.0);
    }
    for (&i, g) in negatives.words().iter().zip(&loss.negatives) {
        out.add_grad(i, g, 1.0);
    }
    Ok(out)
}

/// Averaged metric term of one sentence: `(1/n) Σ_i L(w_i, S(w_i), N_i)`.
///
/// Tokens without synonyms are skipped; under [`AvgMode::NonEmpty`] they are
/// also excluded from `n`. `sample_negatives` is called once per contributing
/// token, in token order, with `(position, word)`. Gradients of repeated
/// words accumulate.
pub fn sentence_metric_penalty<F>(
    tokens: &[usize],
    matrix: &EmbeddingMatrix,
    dict: &SynonymDict,
    mut sample_negatives: F,
    config: &LossConfig,
) -> Result<LossOutput>
where
    F: FnMut(usize, usize) -> Result<NegativeSet>,
{
    if tokens.is_empty() {
        return Err(Error::Empty("sentence has no tokens".into()));
    }
    let mut total = LossOutput::default();
    let mut contributing = 0usize;
    let mut per_word = Vec::new();
    for (pos, &w) in tokens.iter().enumerate() {
        let syns = dict.synonyms(w);
        if syns.is_empty() {
            continue;
        }
        let negs = sample_negatives(pos, w)?;
        per_word.push(word_loss(matrix, w, syns, &negs, config)?);
        contributing += 1;
    }
    let n = match config.avg_mode {
        AvgMode::NonEmpty => contributing,
        AvgMode::All => tokens.len(),
    };
    if contributing == 0 {
        return Ok(total);
    }
    let scale = 1.0 / n as f64;
    for loss in per_word {
        total.value += scale * loss.value;
        for (w, g) in &loss.grads {
            total.add_grad(*w, g, scale);
        }
    }
    Ok(total)
}
