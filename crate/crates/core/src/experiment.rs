//! Experiment configuration and the end-to-end pipelines behind the
//! command-line tool.
//!
//! A configuration is a flat list of `key = value` lines (see [`KEYS`] for
//! every key and its default). Each pipeline validates the whole
//! configuration and checks its inputs before it creates any output, and
//! writes a `config.resolved` file with the effective values and the SHA-256
//! digests of its inputs.
//!
//! Seeds: every component draws from `derive_seed(seed, component, index)`
//! with the components `classifier-init`, `train`, `attack` and `distances`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::{evaluate_robust_accuracy, AttackConfig, AttackKind, RobustnessReport, RobustnessSummary};
use crate::classifier::ModelParams;
use crate::corpus::{generate_synthetic, Dataset, GeneratorSpec, ManifestEntry};
use crate::embedding::{
    load_snapshot, mean_pairwise_distance_rows, nearest_neighbors, read_embedding_file, save_snapshot, EmbeddingMatrix, EmbeddingSnapshot,
    PairSelection, SnapshotMeta, Vocabulary, UNK_INDEX,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::rng;
use crate::synonyms::{build_synonym_dict, file_digest, load_dict, save_dict, SynonymConfig, SynonymDict};
use crate::trainer::{geometry_stats, load_checkpoint, resolve_alpha, save_checkpoint, train, AlphaMode, EpochMetrics, TrainConfig, TrainState};

/// `(key, default, description)` for every configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "global seed; all component seeds derive from it"),
    ("embeddings", "", "training embedding file (word followed by its components)"),
    ("counter_fitted", "", "counter-fitted vectors that define synonym sets"),
    ("data_dir", "", "directory with train.tsv and optional dev.tsv / test.tsv"),
    ("out_dir", "out", "output directory"),
    ("dict", "", "synonym dictionary; empty means <out_dir>/synonyms.txt"),
    ("checkpoint", "", "checkpoint to read; empty means <out_dir>/checkpoint.bin"),
    ("init_embedding", "", "embedding snapshot that replaces the initial embedding"),
    ("syn_k", "8", "maximum synonyms per word"),
    ("syn_delta", "0.5", "synonym radius in the counter-fitted space"),
    ("syn_p", "2", "norm of the counter-fitted space: 1, 2 or inf"),
    ("mode", "ftml", "standard, ftml, cml or frozen-standard"),
    ("beta", "1", "weight of the metric term (ignored by standard modes)"),
    ("p", "2", "norm of the metric term: 1, 2 or inf"),
    ("alpha_ratio", "0.7", "margin as a multiple of the initial mean pairwise distance"),
    ("alpha", "", "absolute margin; overrides alpha_ratio when set"),
    ("tau", "20", "contrastive temperature"),
    ("epsilon_guard", "1e-12", "distances below this have zero gradient"),
    ("cap_numerator", "false", "cap positive distances in the contrastive numerator"),
    ("avg_mode", "nonempty", "sentence averaging: nonempty or all"),
    ("epochs", "20", "training epochs"),
    ("batch_size", "32", "minibatch size"),
    ("optimizer", "adam", "adam or sgd"),
    ("lr", "0.001", "learning rate"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam denominator offset"),
    ("negative_resample", "per-step", "per-step, per-epoch or fixed"),
    ("alpha_scope", "vocab", "words behind the initial mean distance: vocab or corpus"),
    ("negative_pool", "vocab", "words negatives are drawn from: vocab or corpus"),
    ("batch_metric_mode", "per-sentence", "per-sentence or pooled"),
    ("max_len", "200", "tokens kept per example"),
    ("hidden_dim", "64", "classifier hidden units"),
    ("attack", "greedy", "greedy or random"),
    ("epsilon", "0.25", "maximum substitution ratio"),
    ("max_queries", "5000", "model queries per attacked example"),
    ("trials", "20", "restarts of the random attack"),
    ("sample_size", "200", "examples drawn for robust accuracy"),
    ("eval_split", "test", "split that is evaluated and attacked"),
    ("alpha_grid", "0.0,0.35,0.7,1.05", "sweep values of alpha_ratio"),
    ("beta_grid", "1", "sweep values of beta"),
    ("neighbors", "10", "nearest neighbours listed per word by `distances`"),
    ("max_anchors", "1000", "anchor words probed for negative distances"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let values: Vec<f64> = value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::InvalidConfig(format!("`{key}` is empty")));
    }
    Ok(values)
}

/// Flat experiment configuration over the documented defaults.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, d, _)| (k, d.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)));
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(&(k, _, _)) = KEYS.iter().find(|(k, _, _)| *k == key) else {
            return Err(Error::InvalidConfig(format!("unknown key `{key}`")));
        };
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| default_of(key))
            .unwrap_or_else(|| panic!("undeclared key `{key}`"))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        parse(key, self.get(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn dict_path(&self) -> PathBuf {
        self.path("dict").unwrap_or_else(|| self.out_dir().join("synonyms.txt"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path("checkpoint").unwrap_or_else(|| self.out_dir().join("checkpoint.bin"))
    }

    pub fn synonym_config(&self) -> Result<SynonymConfig> {
        let config = SynonymConfig {
            k: self.typed("syn_k")?,
            delta: self.typed("syn_delta")?,
            p: self.typed("syn_p")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let alpha_mode = match self.get("alpha") {
            "" => AlphaMode::Relative(self.typed("alpha_ratio")?),
            v => AlphaMode::Absolute(parse("alpha", v)?),
        };
        let config = TrainConfig {
            mode: self.typed("mode")?,
            beta: self.typed("beta")?,
            loss: LossConfig {
                p: self.typed("p")?,
                tau: self.typed("tau")?,
                epsilon_guard: self.typed("epsilon_guard")?,
                cap_numerator: self.typed("cap_numerator")?,
                avg_mode: self.typed("avg_mode")?,
                ..LossConfig::default()
            },
            epochs: self.typed("epochs")?,
            batch_size: self.typed("batch_size")?,
            optimizer: self.typed("optimizer")?,
            lr: self.typed("lr")?,
            adam_beta1: self.typed("adam_beta1")?,
            adam_beta2: self.typed("adam_beta2")?,
            adam_eps: self.typed("adam_eps")?,
            seed: rng::derive_seed(self.seed()?, "train", 0),
            negative_resample: self.typed("negative_resample")?,
            alpha_mode,
            alpha_scope: self.typed("alpha_scope")?,
            negative_pool: self.typed("negative_pool")?,
            batch_metric_mode: self.typed("batch_metric_mode")?,
            max_len: self.typed("max_len")?,
        };
        config.validate()?;
        config.loss_config(0.0).validate()?;
        Ok(config)
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let config = AttackConfig {
            kind: self.typed::<AttackKind>("attack")?,
            epsilon: self.typed("epsilon")?,
            max_queries: self.typed("max_queries")?,
            trials: self.typed("trials")?,
            seed: rng::derive_seed(self.seed()?, "attack", 0),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn hidden_dim(&self) -> Result<usize> {
        let h: usize = self.typed("hidden_dim")?;
        if h == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be at least 1".into()));
        }
        Ok(h)
    }

    pub fn sample_size(&self) -> Result<usize> {
        self.typed("sample_size")
    }

    pub fn alpha_grid(&self) -> Result<Vec<f64>> {
        parse_list("alpha_grid", self.get("alpha_grid"))
    }

    pub fn beta_grid(&self) -> Result<Vec<f64>> {
        parse_list("beta_grid", self.get("beta_grid"))
    }

    /// Parses every typed key, so a bad value fails before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.synonym_config()?;
        self.train_config()?;
        self.attack_config()?;
        self.hidden_dim()?;
        self.sample_size()?;
        self.typed::<usize>("neighbors")?;
        self.typed::<usize>("max_anchors")?;
        for r in self.alpha_grid()? {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!("alpha_grid entries must be nonnegative, got {r}")));
            }
        }
        for b in self.beta_grid()? {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("beta_grid entries must be nonnegative, got {b}")));
            }
        }
        if self.get("eval_split").is_empty() {
            return Err(Error::InvalidConfig("eval_split is empty".into()));
        }
        Ok(())
    }

    /// `key = value` for every key in declaration order.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.get(k))).collect()
    }

    fn require_file(&self, key: &str) -> Result<PathBuf> {
        let path = self.path(key).ok_or_else(|| Error::InvalidConfig(format!("`{key}` is not set")))?;
        if !path.is_file() {
            return Err(Error::InvalidConfig(format!("`{key}`: {} does not exist", path.display())));
        }
        Ok(path)
    }

    fn require_dir(&self, key: &str) -> Result<PathBuf> {
        let path = self.path(key).ok_or_else(|| Error::InvalidConfig(format!("`{key}` is not set")))?;
        if !path.join("train.tsv").is_file() {
            return Err(Error::InvalidConfig(format!("`{key}`: {} has no train.tsv", path.display())));
        }
        Ok(path)
    }

    fn require_existing(path: PathBuf, what: &str) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::InvalidConfig(format!("{what} {} does not exist", path.display())));
        }
        Ok(path)
    }
}

/// Writes `config.resolved`: the effective configuration followed by input
/// digests as comment lines, so the file parses back as a configuration.
fn write_resolved(out_dir: &Path, body: &str, inputs: &[(&str, &Path)]) -> Result<()> {
    let mut text = String::from(body);
    for (name, path) in inputs {
        text.push_str(&format!("# input {name} {} sha256={}\n", path.display(), file_digest(path)?));
    }
    fs::write(out_dir.join("config.resolved"), text)?;
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

fn json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Generates the synthetic benchmark into `out_dir` and writes
/// `manifest.tsv` (`file`, `bytes`, `sha256`).
pub fn run_gen(spec: &GeneratorSpec, seed: u64, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    let (_, manifest) = generate_synthetic(spec, seed, out_dir)?;
    let mut resolved = format!("seed = {seed}\n");
    for (k, v) in spec.to_pairs() {
        resolved.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(out_dir.join("config.resolved"), resolved)?;
    let mut table = String::new();
    for entry in &manifest {
        let name = entry.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        table.push_str(&format!("{name}\t{}\t{}\n", entry.bytes, entry.digest));
    }
    fs::write(out_dir.join("manifest.tsv"), table)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynonymSummary {
    pub vocab_size: usize,
    pub covered_words: usize,
    pub mean_set_size: f64,
}

/// Builds the synonym dictionary for the training vocabulary and saves it
/// to [`ExperimentConfig::dict_path`].
pub fn run_build_syn(config: &ExperimentConfig) -> Result<SynonymSummary> {
    config.validate()?;
    let cf_path = config.require_file("counter_fitted")?;
    let emb_path = config.require_file("embeddings")?;
    let syn = config.synonym_config()?;

    let (cf_vocab, cf_matrix) = read_embedding_file(&cf_path)?;
    let (vocab, _) = read_embedding_file(&emb_path)?;
    let dict = build_synonym_dict(&cf_vocab, &cf_matrix, &vocab, syn)?.with_source_digest(file_digest(&cf_path)?);

    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir)?;
    let dict_path = config.dict_path();
    if let Some(parent) = dict_path.parent() {
        fs::create_dir_all(parent)?;
    }
    save_dict(&dict, &vocab, &dict_path)?;
    write_resolved(&out_dir, &config.render(), &[("counter_fitted", &cf_path), ("embeddings", &emb_path)])?;
    Ok(SynonymSummary {
        vocab_size: vocab.len(),
        covered_words: dict.covered_words(),
        mean_set_size: dict.mean_set_size(),
    })
}

/// Inputs shared by training and evaluation.
struct Inputs {
    vocab: Vocabulary,
    matrix: EmbeddingMatrix,
    dataset: Dataset,
    dict: SynonymDict,
    paths: Vec<(&'static str, PathBuf)>,
}

fn load_inputs(config: &ExperimentConfig) -> Result<Inputs> {
    let emb_path = config.require_file("embeddings")?;
    let data_dir = config.require_dir("data_dir")?;
    let dict_path = ExperimentConfig::require_existing(config.dict_path(), "synonym dictionary")?;
    let (vocab, matrix) = read_embedding_file(&emb_path)?;
    let dict = load_dict(&dict_path, &vocab)?;
    if let Some(cf) = config.path("counter_fitted") {
        dict.verify_source(&cf)?;
    }
    let dataset = Dataset::load_dir(&data_dir, &vocab)?;
    let mut paths = vec![("embeddings", emb_path), ("dict", dict_path)];
    for split in ["train", "dev", "test"] {
        let p = data_dir.join(format!("{split}.tsv"));
        if p.is_file() {
            paths.push((split, p));
        }
    }
    Ok(Inputs {
        vocab,
        matrix,
        dataset,
        dict,
        paths,
    })
}

fn input_refs<'a>(paths: &'a [(&'static str, PathBuf)]) -> Vec<(&'static str, &'a Path)> {
    paths.iter().map(|(n, p)| (*n, p.as_path())).collect()
}

fn initial_embedding(config: &ExperimentConfig, vocab: &Vocabulary, matrix: EmbeddingMatrix) -> Result<(EmbeddingMatrix, Option<PathBuf>)> {
    let Some(path) = config.path("init_embedding") else {
        return Ok((matrix, None));
    };
    let snapshot = load_snapshot(&path)?;
    if snapshot.vocabulary.digest() != vocab.digest() {
        return Err(Error::VocabularyMismatch(format!("{} was saved for another vocabulary", path.display())));
    }
    Ok((snapshot.matrix, Some(path)))
}

/// Trains one model in memory; shared by `train` and `sweep`.
fn train_model(config: &ExperimentConfig, inputs: &Inputs, embedding: EmbeddingMatrix, mut observer: impl FnMut(&EpochMetrics)) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let train_cfg = config.train_config()?;
    let init_seed = rng::derive_seed(config.seed()?, "classifier-init", 0);
    let num_classes = inputs.dataset.num_classes.max(2);
    let params = ModelParams::init(embedding, config.hidden_dim()?, num_classes, init_seed)?;
    train(&inputs.dataset, params, &inputs.dict, &train_cfg, &mut observer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains in the configured mode and writes `metrics.jsonl` (one record per
/// epoch, starting with the initial parameters), `checkpoint.bin` and
/// `embedding.snap` into the output directory.
pub fn run_train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let (embedding, init_path) = initial_embedding(config, &inputs.vocab, inputs.matrix.clone())?;

    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir)?;
    let mut refs = input_refs(&inputs.paths);
    if let Some(p) = &init_path {
        refs.push(("init_embedding", p.as_path()));
    }
    write_resolved(&out_dir, &config.render(), &refs)?;

    let mut stream = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
    let mut write_err = None;
    let result = train_model(config, &inputs, embedding, |m| {
        if write_err.is_none() {
            if let Err(e) = json_line(m).and_then(|line| Ok(writeln!(stream, "{line}")?)) {
                write_err = Some(e);
            }
        }
    });
    stream.flush()?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let (state, metrics) = result?;

    let vocab_digest = inputs.vocab.digest();
    save_checkpoint(&state, &vocab_digest, &out_dir.join("checkpoint.bin"))?;
    let snapshot = EmbeddingSnapshot {
        vocabulary: inputs.vocab.clone(),
        matrix: state.params.embedding.clone(),
        meta: SnapshotMeta {
            source: config.get("mode").to_string(),
            config_digest: rng::digest_bytes(config.render().as_bytes()),
            epoch: state.epoch as u64,
        },
    };
    save_snapshot(&snapshot, &out_dir.join("embedding.snap"))?;
    Ok(TrainOutcome { state, metrics })
}

fn load_trained(config: &ExperimentConfig, vocab: &Vocabulary) -> Result<(TrainState, PathBuf)> {
    let path = ExperimentConfig::require_existing(config.checkpoint_path(), "checkpoint")?;
    let (state, digest) = load_checkpoint(&path)?;
    if digest != vocab.digest() {
        return Err(Error::VocabularyMismatch(format!("{} was trained on another vocabulary", path.display())));
    }
    Ok((state, path))
}

fn evaluate(config: &ExperimentConfig, inputs: &Inputs, params: &ModelParams) -> Result<RobustnessReport> {
    let split = config.get("eval_split");
    let examples = inputs
        .dataset
        .split(split)
        .ok_or_else(|| Error::InvalidConfig(format!("dataset has no `{split}` split")))?;
    let max_len = config.typed("max_len")?;
    evaluate_robust_accuracy(params, &inputs.dict, &examples, &config.attack_config()?, config.sample_size()?, max_len)
}

#[derive(Serialize)]
struct AttackLine {
    index: usize,
    label: usize,
    clean_correct: bool,
    success: bool,
    ratio: f64,
    queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    adversarial: Option<String>,
}

/// Attacks the checkpointed model and writes `attack.jsonl` (one line per
/// sampled example) and `attack_summary.json`.
pub fn run_attack(config: &ExperimentConfig) -> Result<RobustnessReport> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let (state, ckpt_path) = load_trained(config, &inputs.vocab)?;
    let split = config.get("eval_split");
    let examples = inputs
        .dataset
        .split(split)
        .ok_or_else(|| Error::InvalidConfig(format!("dataset has no `{split}` split")))?;
    let report = evaluate(config, &inputs, &state.params)?;

    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir)?;
    let mut refs = input_refs(&inputs.paths);
    refs.push(("checkpoint", ckpt_path.as_path()));
    write_resolved(&out_dir, &config.render(), &refs)?;

    let adversarial: BTreeMap<usize, &[usize]> = report
        .results
        .iter()
        .filter(|(_, r)| r.success)
        .map(|(i, r)| (*i, r.adv_tokens.as_slice()))
        .collect();
    let mut lines = BufWriter::new(File::create(out_dir.join("attack.jsonl"))?);
    for rec in &report.records {
        let text = adversarial.get(&rec.index).map(|tokens| {
            tokens
                .iter()
                .map(|&t| inputs.vocab.word(t).unwrap_or(crate::embedding::UNK))
                .collect::<Vec<_>>()
                .join(" ")
        });
        let line = AttackLine {
            index: rec.index,
            label: examples[rec.index].label,
            clean_correct: rec.clean_correct,
            success: rec.success,
            ratio: rec.ratio,
            queries: rec.queries,
            adversarial: text,
        };
        writeln!(lines, "{}", json_line(&line)?)?;
    }
    lines.flush()?;
    fs::write(out_dir.join("attack_summary.json"), json_pretty(&report.summary)?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha_ratio: f64,
    pub beta: f64,
    /// `Err` holds the failure message of the cell.
    pub outcome: std::result::Result<RobustnessSummary, String>,
}

/// Trains and attacks one model per `(alpha_ratio, beta)` grid point and
/// writes `sweep.tsv`. Every cell uses the same derived seeds, so cells
/// differ only in the swept values. A failing cell is recorded and the
/// sweep continues.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let (embedding, init_path) = initial_embedding(config, &inputs.vocab, inputs.matrix.clone())?;
    let alphas = config.alpha_grid()?;
    let betas = config.beta_grid()?;

    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir)?;
    let mut refs = input_refs(&inputs.paths);
    if let Some(p) = &init_path {
        refs.push(("init_embedding", p.as_path()));
    }
    write_resolved(&out_dir, &config.render(), &refs)?;

    let mut rows = Vec::new();
    let mut table = BufWriter::new(File::create(out_dir.join("sweep.tsv"))?);
    writeln!(table, "alpha_ratio\tbeta\tclean_accuracy\trobust_accuracy\tstatus")?;
    for &alpha_ratio in &alphas {
        for &beta in &betas {
            let mut cell = config.clone();
            cell.set("alpha_ratio", &alpha_ratio.to_string())?;
            cell.set("alpha", "")?;
            cell.set("beta", &beta.to_string())?;
            let outcome = train_model(&cell, &inputs, embedding.clone(), |_| {})
                .and_then(|(state, _)| evaluate(&cell, &inputs, &state.params))
                .map(|r| r.summary)
                .map_err(|e| e.to_string());
            match &outcome {
                Ok(s) => writeln!(table, "{alpha_ratio}\t{beta}\t{}\t{}\tok", s.clean_accuracy, s.robust_accuracy)?,
                Err(e) => writeln!(table, "{alpha_ratio}\t{beta}\t-\t-\tfailed: {}", e.replace(['\t', '\n'], " "))?,
            }
            table.flush()?;
            rows.push(SweepRow { alpha_ratio, beta, outcome });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceReport {
    pub alpha: f64,
    pub mean_syn_dist: f64,
    pub mean_neg_dist: f64,
    pub mean_random_pair_dist: f64,
    /// `mean_syn_dist / mean_random_pair_dist`, 0 when the latter is 0.
    pub syn_to_random_ratio: f64,
    pub capped_neg_fraction: f64,
    pub syn_pairs: usize,
    pub neg_pairs: usize,
}

/// Distance statistics of a trained embedding under the synonym
/// dictionary. The embedding comes from `init_embedding` when that names a
/// snapshot, otherwise from the checkpoint. Writes `distances.json` and
/// `neighbors.tsv` (each covered word with its nearest neighbours).
pub fn run_distances(config: &ExperimentConfig) -> Result<DistanceReport> {
    config.validate()?;
    let emb_path = config.require_file("embeddings")?;
    let dict_path = ExperimentConfig::require_existing(config.dict_path(), "synonym dictionary")?;
    let (vocab, _) = read_embedding_file(&emb_path)?;
    let dict = load_dict(&dict_path, &vocab)?;
    let train_cfg = config.train_config()?;
    let loss = train_cfg.loss_config(0.0);

    let (matrix, alpha, source) = match config.path("init_embedding") {
        Some(path) => {
            let snapshot = load_snapshot(&path)?;
            if snapshot.vocabulary.digest() != vocab.digest() {
                return Err(Error::VocabularyMismatch(format!("{} was saved for another vocabulary", path.display())));
            }
            let alpha = resolve_alpha(&train_cfg, &snapshot.matrix, None)?;
            (snapshot.matrix, alpha, ("init_embedding", path))
        }
        None => {
            let (state, path) = load_trained(config, &vocab)?;
            (state.params.embedding, state.alpha, ("checkpoint", path))
        }
    };
    if matrix.rows() != vocab.len() {
        return Err(Error::VocabularyMismatch(format!("embedding has {} rows, vocabulary {} words", matrix.rows(), vocab.len())));
    }

    let seed = rng::derive_seed(config.seed()?, "distances", 0);
    let max_anchors: usize = config.typed("max_anchors")?;
    let stats = geometry_stats(&matrix, &dict, &loss, alpha, seed, max_anchors)?;
    let rows: Vec<usize> = (0..vocab.len()).filter(|&w| w != UNK_INDEX).collect();
    let random = if rows.len() < 2 {
        0.0
    } else {
        mean_pairwise_distance_rows(&matrix, &rows, loss.p, PairSelection::Auto, seed)?
    };
    let report = DistanceReport {
        alpha,
        mean_syn_dist: stats.mean_syn_dist,
        mean_neg_dist: stats.mean_neg_dist,
        mean_random_pair_dist: random,
        syn_to_random_ratio: if random > 0.0 { stats.mean_syn_dist / random } else { 0.0 },
        capped_neg_fraction: stats.capped_neg_fraction,
        syn_pairs: stats.syn_pairs,
        neg_pairs: stats.neg_pairs,
    };

    let out_dir = config.out_dir();
    fs::create_dir_all(&out_dir)?;
    write_resolved(&out_dir, &config.render(), &[("embeddings", &emb_path), ("dict", &dict_path), (source.0, &source.1)])?;
    fs::write(out_dir.join("distances.json"), json_pretty(&report)?)?;

    let k: usize = config.typed("neighbors")?;
    let mut table = BufWriter::new(File::create(out_dir.join("neighbors.tsv"))?);
    for (w, set) in dict.sets().iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let candidates = rows.iter().copied().filter(|&c| c != w);
        let nbrs: Vec<String> = nearest_neighbors(&matrix, w, candidates, k, loss.p)
            .into_iter()
            .map(|(n, d)| format!("{}:{d:.6}", vocab.word(n).unwrap_or_default()))
            .collect();
        writeln!(table, "{}\t{}", vocab.word(w).unwrap_or_default(), nbrs.join(","))?;
    }
    table.flush()?;
    Ok(report)
}

/// Reads the per-epoch records written by [`run_train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cover_every_key_and_validate() {
        let c = ExperimentConfig::default();
        assert_eq!(c.render().lines().count(), KEYS.len());
        c.validate().unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.lr, 1e-3);
        assert_eq!(t.epochs, 20);
        assert_eq!(t.alpha_mode, AlphaMode::Relative(0.7));
        assert_eq!(c.synonym_config().unwrap().k, 8);
    }

    #[test]
    fn parse_overrides_and_round_trips() {
        let c = ExperimentConfig::parse("# comment\nmode = cml\nlr=0.01  # trailing\n\nalpha = 2.5\n").unwrap();
        assert_eq!(c.get("mode"), "cml");
        assert_eq!(c.train_config().unwrap().alpha_mode, AlphaMode::Absolute(2.5));
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("nope = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(ExperimentConfig::parse("mode"), Err(Error::InvalidConfig(_))));
        for (k, v) in [("lr", "0"), ("mode", "fancy"), ("epsilon", "1.5"), ("syn_k", "0"), ("beta_grid", "1,x"), ("hidden_dim", "0")] {
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn component_seeds_differ() {
        let c = ExperimentConfig::default();
        assert_ne!(c.train_config().unwrap().seed, c.attack_config().unwrap().seed);
    }

    #[test]
    fn missing_inputs_create_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let mut c = ExperimentConfig::default();
        c.set("out_dir", out.to_str().unwrap()).unwrap();
        c.set("embeddings", dir.path().join("missing.txt").to_str().unwrap()).unwrap();
        assert!(matches!(run_build_syn(&c), Err(Error::InvalidConfig(_))));
        assert!(matches!(run_train(&c), Err(Error::InvalidConfig(_))));
        assert!(!out.exists());
    }
}
