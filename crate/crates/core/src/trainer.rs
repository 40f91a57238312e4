//! Joint optimization of cross-entropy and the word-level metric penalty:
//! `mean CE + β · mean sentence penalty` per minibatch, with a from-scratch
//! SGD / Adam optimizer and checkpointing that supports exact resumption.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{backward, cross_entropy, forward, predict, Gradients, ModelParams};
use crate::corpus::{Dataset, Example};
use crate::embedding::{self, mean_pairwise_distance_rows, EmbeddingMatrix, PairSelection, UNK_INDEX};
use crate::error::{Error, Result};
use crate::losses::{sentence_metric_penalty, AvgMode, LossConfig, LossVariant};
use crate::rng;
use crate::synonyms::{sample_negatives_in, NegativeSet, SynonymDict};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Cross-entropy only (β forced to 0).
    Standard,
    /// Cross-entropy plus the triplet penalty.
    Ftml,
    /// Cross-entropy plus the contrastive penalty.
    Cml,
    /// Cross-entropy only with the embedding held fixed.
    FrozenStandard,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "standard" => Ok(Self::Standard),
            "ftml" => Ok(Self::Ftml),
            "cml" => Ok(Self::Cml),
            "frozen-standard" | "frozen" => Ok(Self::FrozenStandard),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// When negative sets are redrawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeResample {
    /// Fresh negatives for every token occurrence.
    PerStep,
    /// One set per word per epoch.
    PerEpoch,
    /// One set per word for the whole run.
    Fixed,
}

impl FromStr for NegativeResample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per-step" => Ok(Self::PerStep),
            "per-epoch" => Ok(Self::PerEpoch),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::InvalidConfig(format!("unknown negative_resample `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaMode {
    /// `ratio · α₀` where α₀ is the mean pairwise distance of the initial embedding.
    Relative(f64),
    Absolute(f64),
}

/// Which words define α₀ and the negative pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordScope {
    /// Every vocabulary word except `<unk>`.
    Vocabulary,
    /// Words occurring in the training split.
    Corpus,
}

impl FromStr for WordScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vocab" | "vocabulary" => Ok(Self::Vocabulary),
            "corpus" => Ok(Self::Corpus),
            other => Err(Error::InvalidConfig(format!("unknown scope `{other}`"))),
        }
    }
}

/// How sentence penalties combine within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchMetricMode {
    /// Average per sentence, then over the batch.
    PerSentence,
    /// Average over all contributing tokens of the batch.
    PooledTokens,
}

impl FromStr for BatchMetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per-sentence" => Ok(Self::PerSentence),
            "pooled" => Ok(Self::PooledTokens),
            other => Err(Error::InvalidConfig(format!("unknown batch_metric_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub beta: f64,
    /// `alpha` is overwritten by [`resolve_alpha`]; `variant` follows `mode`.
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub negative_resample: NegativeResample,
    pub alpha_mode: AlphaMode,
    pub alpha_scope: WordScope,
    pub negative_pool: WordScope,
    pub batch_metric_mode: BatchMetricMode,
    /// Truncation length for both the classifier and the metric term.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ftml,
            beta: 1.0,
            loss: LossConfig::default(),
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            negative_resample: NegativeResample::PerStep,
            alpha_mode: AlphaMode::Relative(0.7),
            alpha_scope: WordScope::Vocabulary,
            negative_pool: WordScope::Vocabulary,
            batch_metric_mode: BatchMetricMode::PerSentence,
            max_len: 200,
        }
    }
}

impl TrainConfig {
    /// β after the mode contract (zero for the standard modes).
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            TrainMode::Standard | TrainMode::FrozenStandard => 0.0,
            TrainMode::Ftml | TrainMode::Cml => self.beta,
        }
    }

    pub fn trains_embedding(&self) -> bool {
        self.mode != TrainMode::FrozenStandard
    }

    /// Loss configuration with the variant implied by the mode.
    pub fn loss_config(&self, alpha: f64) -> LossConfig {
        LossConfig {
            alpha,
            variant: if self.mode == TrainMode::Cml {
                LossVariant::Contrastive
            } else {
                LossVariant::Triplet
            },
            ..self.loss.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return bad("batch_size and max_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam parameters out of range".into());
        }
        match self.alpha_mode {
            AlphaMode::Relative(r) | AlphaMode::Absolute(r) if !(r >= 0.0 && r.is_finite()) => {
                return bad(format!("alpha setting must be nonnegative, got {r}"))
            }
            _ => {}
        }
        self.loss_config(1.0).validate()
    }
}

fn corpus_words(dataset: &Dataset, split: &str) -> Vec<usize> {
    let set: BTreeSet<usize> = dataset
        .split_indices(split)
        .iter()
        .flat_map(|&i| dataset.examples[i].tokens.iter().copied())
        .filter(|&t| t != UNK_INDEX)
        .collect();
    set.into_iter().collect()
}

/// Margin α: `ratio · α₀` on the given rows in relative mode, the
/// configured value in absolute mode.
pub fn resolve_alpha(config: &TrainConfig, matrix: &EmbeddingMatrix, rows: Option<&[usize]>) -> Result<f64> {
    match config.alpha_mode {
        AlphaMode::Absolute(a) => Ok(a),
        AlphaMode::Relative(ratio) => {
            let all: Vec<usize>;
            let rows = match rows {
                Some(r) => r,
                None => {
                    all = (1..matrix.rows()).collect();
                    &all
                }
            };
            let alpha0 = mean_pairwise_distance_rows(matrix, rows, config.loss.p, PairSelection::Auto, rng::derive_seed(config.seed, "alpha0", 0))?;
            Ok(ratio * alpha0)
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// SGD or Adam over the parameter groups, updated in the fixed order
/// embedding, W1, b1, W2, b2. Embedding rows are updated lazily: only rows
/// with a gradient in the current step move, and only their moments decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    embedding: Option<Moments>,
    head: Vec<Moments>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, params: &ModelParams) -> Self {
        let adam = config.optimizer == OptimizerKind::Adam;
        let embedding = (adam && config.trains_embedding()).then(|| Moments::zeros(params.embedding.as_slice().len()));
        let head = if adam {
            [params.w1.len(), params.b1.len(), params.w2.len(), params.b2.len()]
                .into_iter()
                .map(Moments::zeros)
                .collect()
        } else {
            Vec::new()
        };
        Self {
            kind: config.optimizer,
            lr: config.lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            embedding,
            head,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Whether optimizer state exists for the embedding.
    pub fn has_embedding_state(&self) -> bool {
        self.embedding.is_some()
    }

    fn update(&self, theta: &mut [f64], grad: &[f64], moments: Option<&mut Moments>, offset: usize) {
        match (self.kind, moments) {
            (OptimizerKind::Adam, Some(mo)) => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (j, (p, &g)) in theta.iter_mut().zip(grad).enumerate() {
                    let m = &mut mo.m[offset + j];
                    let v = &mut mo.v[offset + j];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
            _ => {
                for (p, &g) in theta.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
        }
    }

    /// Applies one update. Embedding gradients are ignored unless
    /// `train_embedding` is set.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, train_embedding: bool) -> Result<()> {
        if grads.w1.dim() != params.w1.dim() || grads.w2.dim() != params.w2.dim() || grads.b1.len() != params.b1.len() || grads.b2.len() != params.b2.len() {
            return Err(Error::DimensionMismatch {
                expected: params.w1.len(),
                found: grads.w1.len(),
            });
        }
        self.step += 1;
        let dims = params.embedding.dims();
        if train_embedding {
            let mut moments = self.embedding.take();
            for (&row, g) in &grads.embedding {
                if row >= params.embedding.rows() || g.len() != dims {
                    self.embedding = moments;
                    return Err(Error::OutOfRange {
                        index: row,
                        size: params.embedding.rows(),
                    });
                }
                self.update(params.embedding.row_slice_mut(row), g, moments.as_mut(), row * dims);
            }
            self.embedding = moments;
        }
        let mut head = std::mem::take(&mut self.head);
        let mut slot = head.iter_mut();
        self.update(params.w1.as_slice_mut().expect("standard layout"), grads.w1.as_slice().expect("standard layout"), slot.next(), 0);
        self.update(params.b1.as_slice_mut().expect("standard layout"), grads.b1.as_slice().expect("standard layout"), slot.next(), 0);
        self.update(params.w2.as_slice_mut().expect("standard layout"), grads.w2.as_slice().expect("standard layout"), slot.next(), 0);
        self.update(params.b2.as_slice_mut().expect("standard layout"), grads.b2.as_slice().expect("standard layout"), slot.next(), 0);
        self.head = head;
        Ok(())
    }
}

/// Per-epoch training record. Epoch 0 describes the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub tr_loss: f64,
    pub clean_accuracy: f64,
    pub mean_syn_dist: f64,
    pub mean_neg_dist: f64,
    pub capped_neg_fraction: f64,
}

/// Pre-sampled negatives, `[example][position]`; `None` for tokens without
/// synonyms.
pub type BatchNegatives = Vec<Vec<Option<NegativeSet>>>;

/// Batch objective terms and gradients.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub grads: Gradients,
    /// Mean cross-entropy over the batch.
    pub ce: f64,
    /// Mean metric penalty over the batch (unweighted by β).
    pub metric: f64,
}

/// Weights of the two objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub ce: f64,
    pub beta: f64,
}

fn truncated(tokens: &[usize], max_len: usize) -> &[usize] {
    &tokens[..tokens.len().min(max_len)]
}

/// Gradient of `ce · mean CE + beta · mean penalty` over a batch, at fixed
/// negatives. Per-example work runs in parallel and is reduced in example
/// order.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&Example],
    dict: &SynonymDict,
    negatives: &BatchNegatives,
    loss: &LossConfig,
    weights: ObjectiveWeights,
    train_embedding: bool,
    max_len: usize,
    metric_mode: BatchMetricMode,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    if negatives.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            found: negatives.len(),
        });
    }
    let use_metric = weights.beta != 0.0 && train_embedding;
    let per_example: Vec<Result<(f64, Gradients, f64, usize, BTreeMap<usize, Vec<f64>>)>> = batch
        .par_iter()
        .zip(negatives.par_iter())
        .map(|(ex, negs)| {
            let tokens = truncated(&ex.tokens, max_len);
            let (_, cache) = forward(params, tokens)?;
            let ce = cross_entropy(&cache, ex.label)?;
            let grads = backward(params, &cache, ex.label, train_embedding)?;
            if !use_metric {
                return Ok((ce, grads, 0.0, 0, BTreeMap::new()));
            }
            let contributing = tokens.iter().filter(|&&t| !dict.synonyms(t).is_empty()).count();
            let penalty = sentence_metric_penalty(
                tokens,
                &params.embedding,
                dict,
                |pos, _| {
                    negs.get(pos)
                        .and_then(Option::clone)
                        .ok_or_else(|| Error::InvalidConfig(format!("no negatives supplied for position {pos}")))
                },
                loss,
            )?;
            Ok((ce, grads, penalty.value, contributing, penalty.grads))
        })
        .collect();

    let n = batch.len() as f64;
    let mut out = Gradients::zeros_like(params);
    let mut ce_sum = 0.0;
    let mut parts = Vec::with_capacity(per_example.len());
    for r in per_example {
        let (ce, g, value, contributing, mgrads) = r?;
        ce_sum += ce;
        if weights.ce != 0.0 {
            out.add_scaled(&g, weights.ce / n);
        }
        parts.push((value, contributing, mgrads));
    }
    let mut metric = 0.0;
    if use_metric {
        let pooled_total: usize = parts.iter().map(|p| p.1).sum();
        for (value, contributing, mgrads) in &parts {
            let w = match metric_mode {
                BatchMetricMode::PerSentence => 1.0 / n,
                BatchMetricMode::PooledTokens if pooled_total == 0 => 0.0,
                BatchMetricMode::PooledTokens => match loss.avg_mode {
                    AvgMode::NonEmpty => *contributing as f64 / pooled_total as f64,
                    AvgMode::All => 1.0 / n,
                },
            };
            metric += w * value;
            for (&row, g) in mgrads {
                out.add_embedding_row(row, g, weights.beta * w);
            }
        }
    }
    Ok(BatchResult {
        grads: out,
        ce: ce_sum / n,
        metric,
    })
}

/// Distance statistics of an embedding under a synonym dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    pub mean_syn_dist: f64,
    pub mean_neg_dist: f64,
    pub capped_neg_fraction: f64,
    pub syn_pairs: usize,
    pub neg_pairs: usize,
}

/// Mean distance over all `(w, w')` with `w' ∈ S(w)`, and over a fixed
/// seeded probe of `k` negatives per covered word (at most `max_anchors`
/// anchors), with the fraction of probe negatives at distance ≥ α.
pub fn geometry_stats(matrix: &EmbeddingMatrix, dict: &SynonymDict, loss: &LossConfig, alpha: f64, seed: u64, max_anchors: usize) -> Result<GeometryStats> {
    let p = loss.p;
    let mut syn_sum = 0.0;
    let mut syn_pairs = 0usize;
    let mut anchors = Vec::new();
    for (w, set) in dict.sets().iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        anchors.push(w);
        for &s in set {
            syn_sum += p.distance(matrix.row_slice(w), matrix.row_slice(s));
            syn_pairs += 1;
        }
    }
    let mut rng = rng::stream(seed, "geometry-probe", 0);
    if anchors.len() > max_anchors {
        anchors.shuffle(&mut rng);
        anchors.truncate(max_anchors);
        anchors.sort_unstable();
    }
    let mut neg_sum = 0.0;
    let mut capped = 0usize;
    let mut neg_pairs = 0usize;
    for &a in &anchors {
        let negs = sample_negatives_in(dict, a, None, &mut rng)?;
        for &n in negs.words() {
            let d = p.distance(matrix.row_slice(a), matrix.row_slice(n));
            neg_sum += d;
            if d >= alpha {
                capped += 1;
            }
            neg_pairs += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(GeometryStats {
        mean_syn_dist: mean(syn_sum, syn_pairs),
        mean_neg_dist: mean(neg_sum, neg_pairs),
        capped_neg_fraction: mean(capped as f64, neg_pairs),
        syn_pairs,
        neg_pairs,
    })
}

/// Fraction of examples whose prediction matches the label.
pub fn accuracy(params: &ModelParams, examples: &[&Example], max_len: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let correct: Vec<Result<bool>> = examples
        .par_iter()
        .map(|ex| Ok(predict(params, truncated(&ex.tokens, max_len))? == ex.label))
        .collect();
    let mut n = 0usize;
    for c in correct {
        n += usize::from(c?);
    }
    Ok(n as f64 / examples.len() as f64)
}

const PROBE_ANCHORS: usize = 1000;

/// Complete training state: parameters, optimizer, margin, and the number of
/// finished epochs. Saved as a checkpoint, it resumes bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub alpha: f64,
    pub epoch: usize,
}

/// Drives training epochs over a dataset's `train` split, evaluating on
/// `dev` (or `train` when there is no dev split).
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    dict: &'a SynonymDict,
    state: TrainState,
    negative_pool: Option<Vec<usize>>,
    cache: HashMap<usize, NegativeSet>,
    cache_epoch: Option<usize>,
}

impl<'a> Trainer<'a> {
    /// Starts a fresh run, resolving α from the initial embedding.
    pub fn new(dataset: &'a Dataset, params: ModelParams, dict: &'a SynonymDict, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let train_words = corpus_words(dataset, "train");
        let alpha_rows = match config.alpha_scope {
            WordScope::Vocabulary => None,
            WordScope::Corpus => Some(train_words.as_slice()),
        };
        let alpha = resolve_alpha(&config, &params.embedding, alpha_rows)?;
        let optimizer = Optimizer::new(&config, &params);
        Self::resume(
            dataset,
            dict,
            config,
            TrainState {
                params,
                optimizer,
                alpha,
                epoch: 0,
            },
        )
    }

    /// Continues from a saved state.
    pub fn resume(dataset: &'a Dataset, dict: &'a SynonymDict, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        state.params.check_shapes()?;
        let train = dataset.split_indices("train");
        if train.is_empty() {
            return Err(Error::Empty("dataset has no training examples".into()));
        }
        let v = state.params.vocab_size();
        if dict.vocab_size() != v {
            return Err(Error::VocabularyMismatch(format!("dictionary indexes {} words, model has {v}", dict.vocab_size())));
        }
        if let Some(bad) = dataset.examples.iter().flat_map(|e| &e.tokens).find(|&&t| t >= v) {
            return Err(Error::VocabularyMismatch(format!("token index {bad} outside model vocabulary of {v}")));
        }
        if dataset.num_classes > state.params.num_classes() {
            return Err(Error::VocabularyMismatch(format!(
                "dataset has {} classes, model has {}",
                dataset.num_classes,
                state.params.num_classes()
            )));
        }
        let negative_pool = (config.negative_pool == WordScope::Corpus).then(|| corpus_words(dataset, "train"));
        Ok(Self {
            config,
            dataset,
            dict,
            state,
            negative_pool,
            cache: HashMap::new(),
            cache_epoch: None,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn alpha(&self) -> f64 {
        self.state.alpha
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn eval_split(&self) -> Vec<&'a Example> {
        let name = if self.dataset.split_indices("dev").is_empty() { "train" } else { "dev" };
        self.dataset.split(name).unwrap_or_default()
    }

    fn sample(&mut self, word: usize, epoch: usize, step_rng: &mut rng::Rng) -> Result<NegativeSet> {
        let pool = self.negative_pool.as_deref();
        match self.config.negative_resample {
            NegativeResample::PerStep => sample_negatives_in(self.dict, word, pool, step_rng),
            NegativeResample::PerEpoch | NegativeResample::Fixed => {
                let per_epoch = self.config.negative_resample == NegativeResample::PerEpoch;
                if per_epoch && self.cache_epoch != Some(epoch) {
                    self.cache.clear();
                    self.cache_epoch = Some(epoch);
                }
                if let Some(n) = self.cache.get(&word) {
                    return Ok(n.clone());
                }
                let mut r = if per_epoch {
                    rng::stream(self.config.seed, "negatives-epoch", (epoch * self.dict.vocab_size() + word) as u64)
                } else {
                    rng::stream(self.config.seed, "negatives-fixed", word as u64)
                };
                let n = sample_negatives_in(self.dict, word, pool, &mut r)?;
                self.cache.insert(word, n.clone());
                Ok(n)
            }
        }
    }

    /// Metrics of the current parameters, with losses averaged over the
    /// training split (negatives from a fixed probe stream).
    pub fn evaluate(&mut self) -> Result<EpochMetrics> {
        let train: Vec<&Example> = self.dataset.split("train").unwrap_or_default();
        let beta = self.config.effective_beta();
        let loss = self.config.loss_config(self.state.alpha);
        let mut probe = rng::stream(self.config.seed, "eval-negatives", 0);
        let mut ce = 0.0;
        let mut tr = 0.0;
        for ex in &train {
            let tokens = truncated(&ex.tokens, self.config.max_len);
            let (_, cache) = forward(&self.state.params, tokens)?;
            ce += cross_entropy(&cache, ex.label)?;
            if beta != 0.0 {
                let pool = self.negative_pool.as_deref();
                let dict = self.dict;
                tr += sentence_metric_penalty(tokens, &self.state.params.embedding, dict, |_, w| sample_negatives_in(dict, w, pool, &mut probe), &loss)?.value;
            }
        }
        let n = train.len() as f64;
        self.metrics(self.state.epoch, ce / n, tr / n)
    }

    fn metrics(&self, epoch: usize, ce_loss: f64, tr_loss: f64) -> Result<EpochMetrics> {
        let loss = self.config.loss_config(self.state.alpha);
        let geo = geometry_stats(&self.state.params.embedding, self.dict, &loss, self.state.alpha, self.config.seed, PROBE_ANCHORS)?;
        Ok(EpochMetrics {
            epoch,
            ce_loss,
            tr_loss,
            clean_accuracy: accuracy(&self.state.params, &self.eval_split(), self.config.max_len)?,
            mean_syn_dist: geo.mean_syn_dist,
            mean_neg_dist: geo.mean_neg_dist,
            capped_neg_fraction: geo.capped_neg_fraction,
        })
    }

    /// Runs one epoch and returns its metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.state.epoch + 1;
        let seed = self.config.seed;
        let mut order: Vec<usize> = self.dataset.split_indices("train").to_vec();
        order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
        let mut step_rng = rng::stream(seed, "negatives", epoch as u64);
        let beta = self.config.effective_beta();
        let train_embedding = self.config.trains_embedding();
        let loss = self.config.loss_config(self.state.alpha);
        let weights = ObjectiveWeights { ce: 1.0, beta };

        let mut ce_sum = 0.0;
        let mut tr_sum = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &self.dataset.examples[i]).collect();
            let mut negatives: BatchNegatives = Vec::with_capacity(batch.len());
            for ex in &batch {
                let tokens = truncated(&ex.tokens, self.config.max_len);
                let mut row = Vec::with_capacity(tokens.len());
                for &t in tokens {
                    if beta != 0.0 && train_embedding && !self.dict.synonyms(t).is_empty() {
                        row.push(Some(self.sample(t, epoch, &mut step_rng)?));
                    } else {
                        row.push(None);
                    }
                }
                negatives.push(row);
            }
            let result = batch_gradients(
                &self.state.params,
                &batch,
                self.dict,
                &negatives,
                &loss,
                weights,
                train_embedding,
                self.config.max_len,
                self.config.batch_metric_mode,
            )?;
            if !result.ce.is_finite() || !result.metric.is_finite() || !result.grads.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    ce: result.ce,
                    metric: result.metric,
                });
            }
            ce_sum += result.ce * batch.len() as f64;
            tr_sum += result.metric * batch.len() as f64;
            self.state.optimizer.step(&mut self.state.params, &result.grads, train_embedding)?;
        }
        if !self.state.params.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: order.len().div_ceil(self.config.batch_size),
                ce: ce_sum,
                metric: tr_sum,
            });
        }
        self.state.epoch = epoch;
        let n = order.len() as f64;
        self.metrics(epoch, ce_sum / n, tr_sum / n)
    }
}

/// Trains for `config.epochs` epochs. Returns the final state and one
/// metrics record per epoch, preceded by the epoch-0 record of the initial
/// parameters. `observer` sees each record as it is produced.
pub fn train(
    dataset: &Dataset,
    params: ModelParams,
    dict: &SynonymDict,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(dataset, params, dict, config.clone())?;
    let mut metrics = vec![trainer.evaluate()?];
    observer(&metrics[0]);
    while trainer.state().epoch < config.epochs {
        let m = trainer.run_epoch()?;
        observer(&m);
        metrics.push(m);
    }
    Ok((trainer.into_state(), metrics))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FTMLCKP\0";
const CHECKPOINT_VERSION: u32 = 1;

fn write_array<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    embedding::write_f64s(w, xs)
}

/// Writes parameters, optimizer state, α, epoch, and the vocabulary digest.
pub fn write_checkpoint<W: Write>(state: &TrainState, vocab_digest: &str, mut w: W) -> Result<()> {
    let p = &state.params;
    w.write_all(CHECKPOINT_MAGIC)?;
    embedding::write_u32(&mut w, CHECKPOINT_VERSION)?;
    embedding::write_str(&mut w, vocab_digest)?;
    embedding::write_u64(&mut w, state.epoch as u64)?;
    write_array(&mut w, &[state.alpha])?;
    for n in [p.vocab_size(), p.embedding.dims(), p.hidden_dim(), p.num_classes()] {
        embedding::write_u64(&mut w, n as u64)?;
    }
    write_array(&mut w, p.embedding.as_slice())?;
    write_array(&mut w, p.w1.as_slice().expect("standard layout"))?;
    write_array(&mut w, p.b1.as_slice().expect("standard layout"))?;
    write_array(&mut w, p.w2.as_slice().expect("standard layout"))?;
    write_array(&mut w, p.b2.as_slice().expect("standard layout"))?;

    let o = &state.optimizer;
    let kind = match o.kind {
        OptimizerKind::Sgd => 0u32,
        OptimizerKind::Adam => 1,
    };
    embedding::write_u32(&mut w, kind)?;
    write_array(&mut w, &[o.lr, o.beta1, o.beta2, o.eps])?;
    embedding::write_u64(&mut w, o.step)?;
    embedding::write_u32(&mut w, u32::from(o.embedding.is_some()))?;
    if let Some(m) = &o.embedding {
        write_array(&mut w, &m.m)?;
        write_array(&mut w, &m.v)?;
    }
    embedding::write_u32(&mut w, o.head.len() as u32)?;
    for m in &o.head {
        write_array(&mut w, &m.m)?;
        write_array(&mut w, &m.v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint; returns the state and the stored vocabulary digest.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(TrainState, String)> {
    embedding::read_magic(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let digest = embedding::read_str(&mut r)?;
    let epoch = embedding::read_u64(&mut r)? as usize;
    let alpha = embedding::read_f64s(&mut r, 1)?[0];
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = embedding::read_u64(&mut r)? as usize;
    }
    let [v, d, h, c] = dims;
    let size = |a: usize, b: usize| a.checked_mul(b).ok_or_else(|| Error::Format("shape overflows".into()));
    let emb = embedding::read_f64s(&mut r, size(v, d)?)?;
    let w1 = embedding::read_f64s(&mut r, size(h, d)?)?;
    let b1 = embedding::read_f64s(&mut r, h)?;
    let w2 = embedding::read_f64s(&mut r, size(c, h)?)?;
    let b2 = embedding::read_f64s(&mut r, c)?;
    let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
    let params = ModelParams {
        embedding: EmbeddingMatrix::from_array(Array2::from_shape_vec((v, d), emb).map_err(shape_err)?)?,
        w1: Array2::from_shape_vec((h, d), w1).map_err(shape_err)?,
        b1: Array1::from(b1),
        w2: Array2::from_shape_vec((c, h), w2).map_err(shape_err)?,
        b2: Array1::from(b2),
    };

    let kind = match embedding::read_u32(&mut r)? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        other => return Err(Error::Format(format!("unknown optimizer tag {other}"))),
    };
    let hyper = embedding::read_f64s(&mut r, 4)?;
    let step = embedding::read_u64(&mut r)?;
    let read_moments = |r: &mut R, n: usize| -> Result<Moments> {
        Ok(Moments {
            m: embedding::read_f64s(r, n)?,
            v: embedding::read_f64s(r, n)?,
        })
    };
    let embedding_state = match embedding::read_u32(&mut r)? {
        0 => None,
        1 => Some(read_moments(&mut r, size(v, d)?)?),
        other => return Err(Error::Format(format!("bad embedding-state flag {other}"))),
    };
    let groups = embedding::read_u32(&mut r)? as usize;
    let sizes = [h * d, h, c * h, c];
    if groups != 0 && groups != sizes.len() {
        return Err(Error::Format(format!("expected 0 or 4 head moment groups, found {groups}")));
    }
    let mut head = Vec::with_capacity(groups);
    for &n in sizes.iter().take(groups) {
        head.push(read_moments(&mut r, n)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let optimizer = Optimizer {
        kind,
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        step,
        embedding: embedding_state,
        head,
    };
    Ok((
        TrainState {
            params,
            optimizer,
            alpha,
            epoch,
        },
        digest,
    ))
}

pub fn save_checkpoint(state: &TrainState, vocab_digest: &str, path: &Path) -> Result<()> {
    write_checkpoint(state, vocab_digest, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, String)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Vocabulary;

    fn params_for(rows: &[Vec<f64>]) -> ModelParams {
        ModelParams::init(EmbeddingMatrix::from_rows(rows).unwrap(), 3, 2, 1).unwrap()
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = ModelParams::zeros(EmbeddingMatrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap(), 1, 2);
        let config = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&config, &p);
        let mut g = Gradients::zeros_like(&p);
        g.embedding.insert(1, vec![2.0]);
        opt.step(&mut p, &g, true).unwrap();
        assert!((p.embedding.row_slice(1)[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut p = ModelParams::zeros(EmbeddingMatrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap(), 1, 2);
            let config = TrainConfig {
                lr: 0.01,
                ..TrainConfig::default()
            };
            let mut opt = Optimizer::new(&config, &p);
            let mut g = Gradients::zeros_like(&p);
            g.embedding.insert(1, vec![scale]);
            opt.step(&mut p, &g, true).unwrap();
            assert!((p.embedding.row_slice(1)[0] + 0.01).abs() < 1e-6, "scale {scale}");
            assert_eq!(p.embedding.row_slice(0)[0], 0.0);
        }
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        // f(x, y) = (x - 3)^2 + 10 (y + 1)^2 placed in the b1 group
        let mut p = ModelParams::zeros(EmbeddingMatrix::zeros(1, 1), 2, 2);
        let config = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&config, &p);
        let dist = |p: &ModelParams| ((p.b1[0] - 3.0).powi(2) + (p.b1[1] + 1.0).powi(2)).sqrt();
        let start = dist(&p);
        for _ in 0..100 {
            let mut g = Gradients::zeros_like(&p);
            g.b1[0] = 2.0 * (p.b1[0] - 3.0);
            g.b1[1] = 20.0 * (p.b1[1] + 1.0);
            opt.step(&mut p, &g, false).unwrap();
        }
        assert!(dist(&p) < start * 0.5);
    }

    #[test]
    fn frozen_mode_allocates_no_embedding_state() {
        let p = params_for(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let config = TrainConfig {
            mode: TrainMode::FrozenStandard,
            ..TrainConfig::default()
        };
        assert!(!Optimizer::new(&config, &p).has_embedding_state());
        assert_eq!(config.effective_beta(), 0.0);
    }

    #[test]
    fn resolve_alpha_modes() {
        let m = EmbeddingMatrix::from_rows(&[vec![9.0, 9.0], vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let mut config = TrainConfig::default();
        assert!((resolve_alpha(&config, &m, None).unwrap() - 3.5).abs() < 1e-12);
        config.alpha_mode = AlphaMode::Relative(0.0);
        assert_eq!(resolve_alpha(&config, &m, None).unwrap(), 0.0);
        config.alpha_mode = AlphaMode::Absolute(5.978);
        assert_eq!(resolve_alpha(&config, &m, None).unwrap(), 5.978);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let vocab = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.1, 1.0 / (i as f64 + 3.0)]).collect();
        let mut p = params_for(&rows);
        let config = TrainConfig::default();
        let mut opt = Optimizer::new(&config, &p);
        let mut g = Gradients::zeros_like(&p);
        g.embedding.insert(2, vec![0.3, -0.1]);
        g.b2[1] = 0.7;
        opt.step(&mut p, &g, true).unwrap();
        let state = TrainState {
            params: p,
            optimizer: opt,
            alpha: 0.123,
            epoch: 4,
        };
        let mut buf = Vec::new();
        write_checkpoint(&state, &vocab.digest(), &mut buf).unwrap();
        let (back, digest) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, state);
        assert_eq!(digest, vocab.digest());
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
