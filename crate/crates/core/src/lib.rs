//! Robust word embeddings through word-level metric learning.
//!
//! A classifier is trained on `CE + β · (1/n) Σ L(w_i, S(w_i), N_i)`, where
//! `L` pulls each word toward its synonyms `S(w)` (nearest neighbours within
//! `δ` in a counter-fitted space) and pushes it away from sampled
//! non-synonyms `N`, up to a margin `α`. Robustness is measured with
//! synonym-substitution attacks.
//!
//! Modules:
//!
//! * [`embedding`]: vocabularies, vector files, snapshots, pairwise distance.
//! * [`synonyms`]: synonym dictionaries and negative sampling.
//! * [`losses`]: word distance, triplet and contrastive losses with gradients.
//! * [`classifier`]: mean-pool MLP with a hand-written backward pass.
//! * [`trainer`]: objective, optimizers, checkpoints.
//! * [`corpus`]: TSV datasets and the synthetic benchmark.
//! * [`attack`]: greedy saliency and random substitution attacks.
//! * [`experiment`]: config files and end-to-end pipelines.

pub mod attack;
pub mod classifier;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod rng;
pub mod synonyms;
pub mod trainer;

pub use attack::{AttackConfig, AttackKind, AttackResult, RobustnessReport, RobustnessSummary};
pub use classifier::{ForwardCache, Gradients, ModelParams};
pub use corpus::{Dataset, Example, GeneratorSpec, SyntheticBenchmark};
pub use embedding::{EmbeddingMatrix, EmbeddingSnapshot, SnapshotMeta, Vocabulary};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use losses::{LossConfig, LossOutput, LossVariant, Norm};
pub use synonyms::{NegativeSet, SynonymConfig, SynonymDict};
pub use trainer::{EpochMetrics, TrainConfig, TrainMode, TrainState};
