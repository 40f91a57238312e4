//! Mean-pooling text classifier with a hand-derived backward pass:
//! embedding lookup → mean pool → affine → ReLU → affine → softmax.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Full trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingMatrix,
    /// `H × D`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `C × H`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ModelParams {
    /// Glorot-uniform affine weights and zero biases, seeded.
    pub fn init(embedding: EmbeddingMatrix, hidden_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if hidden_dim == 0 || num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need hidden_dim >= 1 and num_classes >= 2, got {hidden_dim} and {num_classes}"
            )));
        }
        let dims = embedding.dims();
        let mut rng = rng::stream(seed, "classifier-init", 0);
        let mut glorot = |rows: usize, cols: usize| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-s..s))
        };
        let w1 = glorot(hidden_dim, dims);
        let w2 = glorot(num_classes, hidden_dim);
        Ok(Self {
            embedding,
            w1,
            b1: Array1::zeros(hidden_dim),
            w2,
            b2: Array1::zeros(num_classes),
        })
    }

    /// All-zero head on top of the given embedding.
    pub fn zeros(embedding: EmbeddingMatrix, hidden_dim: usize, num_classes: usize) -> Self {
        let dims = embedding.dims();
        Self {
            embedding,
            w1: Array2::zeros((hidden_dim, dims)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((num_classes, hidden_dim)),
            b2: Array1::zeros(num_classes),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (h, d) = self.w1.dim();
        let mismatch = |expected, found| Err(Error::DimensionMismatch { expected, found });
        if d != self.embedding.dims() {
            return mismatch(self.embedding.dims(), d);
        }
        if self.b1.len() != h {
            return mismatch(h, self.b1.len());
        }
        if self.w2.ncols() != h {
            return mismatch(h, self.w2.ncols());
        }
        if self.b2.len() != self.w2.nrows() {
            return mismatch(self.w2.nrows(), self.b2.len());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.as_slice().iter().all(|x| x.is_finite())
            && self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|x| x.is_finite())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub tokens: Vec<usize>,
    pub pooled: Array1<f64>,
    pub pre_activation: Array1<f64>,
    pub hidden: Array1<f64>,
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

fn log_sum_exp(logits: &Array1<f64>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("input has no tokens".into()));
    }
    let v = params.vocab_size();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(Error::OutOfRange { index: bad, size: v });
    }
    Ok(())
}

pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<(Array1<f64>, ForwardCache)> {
    check_tokens(params, tokens)?;
    let dims = params.embedding.dims();
    let mut pooled = Array1::<f64>::zeros(dims);
    for &t in tokens {
        pooled += &params.embedding.row(t);
    }
    pooled /= tokens.len() as f64;
    let pre_activation = params.w1.dot(&pooled) + &params.b1;
    let hidden = pre_activation.mapv(|x| x.max(0.0));
    let logits = params.w2.dot(&hidden) + &params.b2;
    let probabilities = softmax(&logits);
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        pooled,
        pre_activation,
        hidden,
        logits,
        probabilities: probabilities.clone(),
    };
    Ok((probabilities, cache))
}

/// Class probabilities only.
pub fn probabilities(params: &ModelParams, tokens: &[usize]) -> Result<Array1<f64>> {
    forward(params, tokens).map(|(p, _)| p)
}

/// `−log p[label]` via log-sum-exp over the cached logits.
pub fn cross_entropy(cache: &ForwardCache, label: usize) -> Result<f64> {
    cross_entropy_from_logits(&cache.logits, label)
}

pub fn cross_entropy_from_logits(logits: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::OutOfRange {
            index: label,
            size: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, tokens: &[usize]) -> Result<usize> {
    let (_, cache) = forward(params, tokens)?;
    Ok(argmax(&cache.logits))
}

/// Gradients for every parameter group. Embedding rows are sparse and
/// absent entirely when the embedding is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub embedding: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            w1: Array2::zeros(params.w1.dim()),
            b1: Array1::zeros(params.b1.len()),
            w2: Array2::zeros(params.w2.dim()),
            b2: Array1::zeros(params.b2.len()),
            embedding: BTreeMap::new(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
        for (&w, g) in &other.embedding {
            self.add_embedding_row(w, g, scale);
        }
    }

    pub fn add_embedding_row(&mut self, word: usize, grad: &[f64], scale: f64) {
        let entry = self.embedding.entry(word).or_insert_with(|| vec![0.0; grad.len()]);
        for (e, g) in entry.iter_mut().zip(grad) {
            *e += scale * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|x| x.is_finite())
            && self.embedding.values().flatten().all(|x| x.is_finite())
    }
}

/// Exact gradient of `cross_entropy(forward(tokens), label)`. With
/// `train_embedding = false` no embedding rows are produced.
pub fn backward(params: &ModelParams, cache: &ForwardCache, label: usize, train_embedding: bool) -> Result<Gradients> {
    params.check_shapes()?;
    let c = params.num_classes();
    if cache.logits.len() != c || cache.pooled.len() != params.embedding.dims() || cache.hidden.len() != params.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: c,
            found: cache.logits.len(),
        });
    }
    if label >= c {
        return Err(Error::OutOfRange { index: label, size: c });
    }
    let mut d_logits = cache.probabilities.clone();
    d_logits[label] -= 1.0;

    let w2 = outer(&d_logits, &cache.hidden);
    let b2 = d_logits.clone();
    let d_hidden = params.w2.t().dot(&d_logits);
    let d_pre = ndarray::Zip::from(&d_hidden)
        .and(&cache.pre_activation)
        .map_collect(|&g, &z| if z > 0.0 { g } else { 0.0 });
    let w1 = outer(&d_pre, &cache.pooled);
    let b1 = d_pre.clone();

    let mut embedding = BTreeMap::new();
    if train_embedding {
        let d_pooled = params.w1.t().dot(&d_pre);
        let share = 1.0 / cache.tokens.len() as f64;
        for &t in &cache.tokens {
            let entry = embedding.entry(t).or_insert_with(|| vec![0.0; d_pooled.len()]);
            for (e, g) in entry.iter_mut().zip(d_pooled.iter()) {
                *e += share * g;
            }
        }
    }
    Ok(Gradients { w1, b1, w2, b2, embedding })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(v: usize, d: usize, h: usize, c: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..v).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut p = ModelParams::init(EmbeddingMatrix::from_rows(&rows).unwrap(), h, c, seed).unwrap();
        p.b1.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        p.b2.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        p
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let p = ModelParams::zeros(EmbeddingMatrix::zeros(4, 3), 5, 4);
        let (probs, _) = forward(&p, &[1, 2, 3]).unwrap();
        for x in probs.iter() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert_eq!(predict(&p, &[1]).unwrap(), 0);
    }

    #[test]
    fn single_token_pool_is_its_row() {
        let p = random_params(6, 4, 3, 2, 1);
        let (_, cache) = forward(&p, &[4]).unwrap();
        assert_eq!(cache.pooled.as_slice().unwrap(), p.embedding.row_slice(4));
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let p = random_params(10, 5, 4, 3, 2);
        let tokens = [3, 1, 3, 9, 0];
        let (probs, _) = forward(&p, &tokens).unwrap();

        let (h, d, c) = (4, 5, 3);
        let mut pooled = vec![0.0; d];
        for &t in &tokens {
            for j in 0..d {
                pooled[j] += p.embedding.row_slice(t)[j] / tokens.len() as f64;
            }
        }
        let mut hidden = vec![0.0; h];
        for i in 0..h {
            let mut z = p.b1[i];
            for j in 0..d {
                z += p.w1[[i, j]] * pooled[j];
            }
            hidden[i] = if z > 0.0 { z } else { 0.0 };
        }
        let mut logits = vec![0.0; c];
        for k in 0..c {
            logits[k] = p.b2[k] + (0..h).map(|i| p.w2[[k, i]] * hidden[i]).sum::<f64>();
        }
        let norm: f64 = logits.iter().map(|z: &f64| z.exp()).sum();
        for k in 0..c {
            assert!((probs[k] - logits[k].exp() / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Array1::from(vec![0.3, 0.3]);
        assert!((cross_entropy_from_logits(&uniform, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        let confident = Array1::from(vec![60.0, 0.0]);
        assert!(cross_entropy_from_logits(&confident, 0).unwrap() < 1e-20);
        assert!(cross_entropy_from_logits(&confident, 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let logits: Array1<f64> = Array1::from_shape_simple_fn(4, || rng.gen_range(-10.0..10.0));
            let label = rng.gen_range(0..4);
            let naive = -(logits[label].exp() / logits.iter().map(|z: &f64| z.exp()).sum::<f64>()).ln();
            assert!((cross_entropy_from_logits(&logits, label).unwrap() - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn logit_gradient_is_p_minus_onehot() {
        let p = random_params(6, 4, 3, 3, 5);
        let (probs, cache) = forward(&p, &[1, 2]).unwrap();
        let g = backward(&p, &cache, 2, true).unwrap();
        for k in 0..3 {
            let expected = probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((g.b2[k] - expected).abs() < 1e-15);
        }
        let frozen = backward(&p, &cache, 2, false).unwrap();
        assert!(frozen.embedding.is_empty());
    }

    #[test]
    fn ties_and_ordering() {
        assert_eq!(argmax(&Array1::from(vec![2.0, 1.0])), 0);
        assert_eq!(argmax(&Array1::from(vec![1.0, 1.0])), 0);
        assert_eq!(argmax(&Array1::from(vec![0.0, 1.0, 1.0])), 1);
    }

    #[test]
    fn errors() {
        let p = random_params(3, 2, 2, 2, 0);
        assert!(matches!(forward(&p, &[]), Err(Error::Empty(_))));
        assert!(matches!(forward(&p, &[3]), Err(Error::OutOfRange { index: 3, .. })));
    }
}
