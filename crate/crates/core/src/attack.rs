//! Synonym-substitution attacks and robust-accuracy evaluation.
//!
//! An adversarial example `x'` for a correctly classified `x` changes the
//! prediction away from the true label, substitutes at most `ε·n` positions,
//! and only ever replaces `w_i` with a member of `S(w_i)`.

use std::cell::Cell;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, probabilities, ModelParams};
use crate::corpus::Example;
use crate::embedding::UNK_INDEX;
use crate::error::{Error, Result};
use crate::rng;
use crate::synonyms::SynonymDict;

/// Anything that maps a token sequence to class probabilities.
pub trait Model {
    fn probabilities(&self, tokens: &[usize]) -> Result<Array1<f64>>;

    fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(&self.probabilities(tokens)?))
    }
}

impl Model for ModelParams {
    fn probabilities(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        probabilities(self, tokens)
    }
}

/// Wraps a model and counts every call.
pub struct CountingModel<'a, M: ?Sized> {
    inner: &'a M,
    calls: Cell<usize>,
}

impl<'a, M: Model + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: Model + ?Sized> Model for CountingModel<'_, M> {
    fn probabilities(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.probabilities(tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "greedy")]
    GreedySaliency,
    #[serde(rename = "random")]
    Random,
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "greedy" | "greedy-saliency" => Ok(Self::GreedySaliency),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidConfig(format!("unknown attack `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Maximum substitution ratio ε.
    pub epsilon: f64,
    pub max_queries: usize,
    /// Restarts of the random attack.
    pub trials: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::GreedySaliency,
            epsilon: 0.25,
            max_queries: 5000,
            trials: 20,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if self.max_queries == 0 {
            return Err(Error::InvalidConfig("max_queries must be at least 1".into()));
        }
        Ok(())
    }

    /// Largest number of substitutions with ratio ≤ ε for length `n`.
    pub fn budget(&self, n: usize) -> usize {
        // guard against 0.25 * 8 evaluating to 1.9999…
        ((self.epsilon * n as f64) + 1e-9).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub adv_tokens: Vec<usize>,
    pub substitution_ratio: f64,
    pub queries: usize,
    pub flipped_from: Option<usize>,
    pub flipped_to: Option<usize>,
}

impl AttackResult {
    fn failure(x: &[usize], queries: usize) -> Self {
        Self {
            success: false,
            adv_tokens: x.to_vec(),
            substitution_ratio: 0.0,
            queries,
            flipped_from: None,
            flipped_to: None,
        }
    }
}

/// `(1/n) Σ 1[w_i ≠ w'_i]`.
pub fn substitution_ratio(x: &[usize], x_prime: &[usize]) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: x_prime.len(),
        });
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let changed = x.iter().zip(x_prime).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / x.len() as f64)
}

/// Checks the three conditions of a successful attack: the prediction on
/// `x_prime` differs from `true_label`, the substitution ratio is within
/// `epsilon`, and every changed word is a synonym of the original.
pub fn is_adversarial<M: Model + ?Sized>(model: &M, dict: &SynonymDict, x: &[usize], x_prime: &[usize], true_label: usize, epsilon: f64) -> Result<bool> {
    let ratio = substitution_ratio(x, x_prime)?;
    if ratio > epsilon + 1e-12 {
        return Ok(false);
    }
    let valid = x.iter().zip(x_prime).all(|(&w, &v)| w == v || dict.synonyms(w).contains(&v));
    if !valid {
        return Ok(false);
    }
    Ok(model.predict(x_prime)? != true_label)
}

struct Budgeted<'a, M: ?Sized> {
    model: &'a M,
    used: usize,
    max: usize,
}

impl<M: Model + ?Sized> Budgeted<'_, M> {
    /// `None` once the query budget is spent.
    fn query(&mut self, tokens: &[usize]) -> Result<Option<Array1<f64>>> {
        if self.used >= self.max {
            return Ok(None);
        }
        self.used += 1;
        self.model.probabilities(tokens).map(Some)
    }
}

fn success(x: &[usize], adv: Vec<usize>, queries: usize, from: usize, to: usize) -> Result<AttackResult> {
    Ok(AttackResult {
        success: true,
        substitution_ratio: substitution_ratio(x, &adv)?,
        adv_tokens: adv,
        queries,
        flipped_from: Some(from),
        flipped_to: Some(to),
    })
}

/// Greedy saliency-weighted substitution.
///
/// 1. Saliency of position `i`: `p_y(x) − p_y(x with w_i → <unk>)`.
/// 2. Best candidate per position: the synonym with the largest drop in `p_y`.
/// 3. Score: softmax over positions of the saliencies, times the best drop.
///
/// Positions are substituted in descending score order (ties to the lower
/// position) until the label flips, the `ε` budget is spent, or candidates
/// run out. Positions without synonyms are skipped. Every model call is one
/// query.
pub fn attack_greedy_saliency<M: Model + ?Sized>(model: &M, dict: &SynonymDict, x: &[usize], true_label: usize, config: &AttackConfig) -> Result<AttackResult> {
    config.validate()?;
    let mut oracle = Budgeted {
        model,
        used: 0,
        max: config.max_queries,
    };
    let Some(clean) = oracle.query(x)? else {
        return Ok(AttackResult::failure(x, oracle.used));
    };
    if true_label >= clean.len() {
        return Err(Error::OutOfRange {
            index: true_label,
            size: clean.len(),
        });
    }
    let budget = config.budget(x.len());
    if argmax(&clean) != true_label || budget == 0 {
        return Ok(AttackResult::failure(x, oracle.used));
    }
    let p_clean = clean[true_label];

    let positions: Vec<usize> = (0..x.len()).filter(|&i| !dict.synonyms(x[i]).is_empty()).collect();
    let mut saliency = Vec::with_capacity(positions.len());
    let mut probe = x.to_vec();
    for &i in &positions {
        probe[i] = UNK_INDEX;
        let Some(p) = oracle.query(&probe)? else {
            return Ok(AttackResult::failure(x, oracle.used));
        };
        probe[i] = x[i];
        saliency.push(p_clean - p[true_label]);
    }

    let mut best = Vec::with_capacity(positions.len());
    for &i in &positions {
        let mut choice: Option<(usize, f64)> = None;
        for &s in dict.synonyms(x[i]) {
            probe[i] = s;
            let Some(p) = oracle.query(&probe)? else {
                return Ok(AttackResult::failure(x, oracle.used));
            };
            let drop = p_clean - p[true_label];
            if choice.is_none_or(|(_, d)| drop > d) {
                choice = Some((s, drop));
            }
        }
        probe[i] = x[i];
        best.push(choice.expect("position has synonyms"));
    }

    let max_sal = saliency.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = saliency.iter().map(|s| (s - max_sal).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<(usize, f64)> = (0..positions.len()).map(|j| (j, weights[j] / total * best[j].1)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut adv = x.to_vec();
    for (j, _) in order.into_iter().take(budget) {
        adv[positions[j]] = best[j].0;
        let Some(p) = oracle.query(&adv)? else {
            break;
        };
        let pred = argmax(&p);
        if pred != true_label {
            return success(x, adv, oracle.used, true_label, pred);
        }
    }
    Ok(AttackResult::failure(x, oracle.used))
}

/// Random baseline: up to `trials` attempts, each replacing a uniformly
/// chosen set of `min(⌊ε·n⌋, #eligible)` synonym-bearing positions by
/// uniformly chosen synonyms. Returns the first success.
pub fn attack_random<M: Model + ?Sized>(model: &M, dict: &SynonymDict, x: &[usize], true_label: usize, config: &AttackConfig) -> Result<AttackResult> {
    config.validate()?;
    let eligible: Vec<usize> = (0..x.len()).filter(|&i| !dict.synonyms(x[i]).is_empty()).collect();
    let m = config.budget(x.len()).min(eligible.len());
    if m == 0 || config.trials == 0 {
        return Ok(AttackResult::failure(x, 0));
    }
    let mut rng = rng::stream(config.seed, "random-attack", 0);
    let mut oracle = Budgeted {
        model,
        used: 0,
        max: config.max_queries,
    };
    for _ in 0..config.trials {
        let mut adv = x.to_vec();
        for j in index::sample(&mut rng, eligible.len(), m) {
            let i = eligible[j];
            adv[i] = *dict.synonyms(x[i]).choose(&mut rng).expect("eligible position");
        }
        let Some(p) = oracle.query(&adv)? else {
            break;
        };
        let pred = argmax(&p);
        if pred != true_label {
            return success(x, adv, oracle.used, true_label, pred);
        }
    }
    Ok(AttackResult::failure(x, oracle.used))
}

pub fn run_attack<M: Model + ?Sized>(model: &M, dict: &SynonymDict, x: &[usize], true_label: usize, config: &AttackConfig) -> Result<AttackResult> {
    match config.kind {
        AttackKind::GreedySaliency => attack_greedy_saliency(model, dict, x, true_label, config),
        AttackKind::Random => attack_random(model, dict, x, true_label, config),
    }
}

/// Per-example line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    /// Position within the evaluated split.
    pub index: usize,
    pub clean_correct: bool,
    pub success: bool,
    pub ratio: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub sampled: usize,
    pub attacked: usize,
    pub successes: usize,
    /// Successes over attacked (clean-correct) examples.
    pub success_rate: f64,
    pub mean_ratio_on_success: f64,
    pub mean_queries: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub summary: RobustnessSummary,
    pub records: Vec<ExampleRecord>,
    /// Full attack outcome per sampled, clean-correct example.
    pub results: Vec<(usize, AttackResult)>,
}

/// Seeded subset of `0..n` of size `min(k, n)`, ascending.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = rng::stream(seed, "eval-sample", 0);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Clean accuracy over `examples`, and robust accuracy over a seeded sample
/// of `sample_size` of them: the fraction both correctly classified and not
/// flipped by the attack. Each example's attack gets its own seed derived
/// from `(config.seed, index)`, so results do not depend on scheduling.
pub fn evaluate_robust_accuracy(params: &ModelParams, dict: &SynonymDict, examples: &[&Example], config: &AttackConfig, sample_size: usize, max_len: usize) -> Result<RobustnessReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split is empty".into()));
    }
    let clean: Vec<Result<bool>> = examples
        .par_iter()
        .map(|ex| Ok(params.predict(&ex.tokens[..ex.tokens.len().min(max_len)])? == ex.label))
        .collect();
    let clean: Vec<bool> = clean.into_iter().collect::<Result<_>>()?;
    let clean_accuracy = clean.iter().filter(|&&c| c).count() as f64 / examples.len() as f64;

    let sample = sample_indices(examples.len(), sample_size, config.seed);
    let outcomes: Vec<Result<(ExampleRecord, Option<AttackResult>)>> = sample
        .par_iter()
        .map(|&i| {
            let ex = examples[i];
            if !clean[i] {
                let record = ExampleRecord {
                    index: i,
                    clean_correct: false,
                    success: false,
                    ratio: 0.0,
                    queries: 0,
                };
                return Ok((record, None));
            }
            let tokens = &ex.tokens[..ex.tokens.len().min(max_len)];
            let cfg = AttackConfig {
                seed: rng::derive_seed(config.seed, "attack-example", i as u64),
                ..config.clone()
            };
            let result = run_attack(params, dict, tokens, ex.label, &cfg)?;
            let record = ExampleRecord {
                index: i,
                clean_correct: true,
                success: result.success,
                ratio: result.substitution_ratio,
                queries: result.queries,
            };
            Ok((record, Some(result)))
        })
        .collect();

    let mut records = Vec::with_capacity(sample.len());
    let mut results = Vec::new();
    for o in outcomes {
        let (record, result) = o?;
        if let Some(r) = result {
            results.push((record.index, r));
        }
        records.push(record);
    }
    let attacked = records.iter().filter(|r| r.clean_correct).count();
    let successes = records.iter().filter(|r| r.success).count();
    let robust = records.iter().filter(|r| r.clean_correct && !r.success).count();
    let ratio_sum: f64 = records.iter().filter(|r| r.success).map(|r| r.ratio).sum();
    let query_sum: usize = records.iter().map(|r| r.queries).sum();
    let frac = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    Ok(RobustnessReport {
        summary: RobustnessSummary {
            attack: config.kind,
            epsilon: config.epsilon,
            clean_accuracy,
            robust_accuracy: frac(robust as f64, records.len()),
            sampled: records.len(),
            attacked,
            successes,
            success_rate: frac(successes as f64, attacked),
            mean_ratio_on_success: frac(ratio_sum, successes),
            mean_queries: frac(query_sum as f64, attacked),
        },
        records,
        results,
    })
}
