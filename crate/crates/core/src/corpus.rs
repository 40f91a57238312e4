//! Labeled text datasets and the synthetic synonym-cluster benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Vocabulary;
use crate::error::{Error, Result};
use crate::rng;

/// Lowercases, splits on Unicode whitespace, and strips leading/trailing
/// ASCII punctuation from each token. Tokens that become empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub tokens: Vec<usize>,
    pub raw_text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    /// Named, disjoint partitions of `examples` by index.
    pub splits: BTreeMap<String, Vec<usize>>,
    /// Lines dropped at load time because no token survived tokenization.
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<Vec<&Example>> {
        self.splits.get(name).map(|idx| idx.iter().map(|&i| &self.examples[i]).collect())
    }

    pub fn split_indices(&self, name: &str) -> &[usize] {
        self.splits.get(name).map_or(&[], Vec::as_slice)
    }

    /// Loads `train.tsv`, and `dev.tsv` / `test.tsv` when present, from a
    /// directory into one dataset with matching splits.
    pub fn load_dir(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let mut out = Dataset::default();
        for name in ["train", "dev", "test"] {
            let path = dir.join(format!("{name}.tsv"));
            if !path.exists() {
                if name == "train" {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("{} not found", path.display()),
                    )));
                }
                continue;
            }
            let part = load_tsv(BufReader::new(File::open(&path)?), vocab)?;
            let offset = out.examples.len();
            out.splits.insert(name.to_string(), (offset..offset + part.examples.len()).collect());
            out.num_classes = out.num_classes.max(part.num_classes);
            out.skipped += part.skipped;
            out.examples.extend(part.examples);
        }
        Ok(out)
    }

    /// Re-serializes a split as TSV from the original text.
    pub fn write_tsv<W: Write>(&self, split: &str, mut out: W) -> Result<()> {
        for &i in self.split_indices(split) {
            let ex = &self.examples[i];
            writeln!(out, "{}\t{}", ex.label, ex.raw_text)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parses `label<TAB>text` lines into a single split named `all`.
pub fn load_tsv<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let mut max_label = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: "expected `label<TAB>text`".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("label `{label}` is not a nonnegative integer"),
        })?;
        let tokens: Vec<usize> = tokenize(text).iter().map(|t| vocab.index_or_unk(t)).collect();
        if tokens.is_empty() {
            ds.skipped += 1;
            continue;
        }
        max_label = max_label.max(Some(label));
        ds.examples.push(Example {
            label,
            tokens,
            raw_text: text.to_string(),
        });
    }
    ds.num_classes = max_label.map_or(0, |m| m + 1);
    ds.splits.insert("all".into(), (0..ds.examples.len()).collect());
    Ok(ds)
}

/// Parameters of the synthetic benchmark. Every field has a default; see
/// [`GeneratorSpec::parse`] for the key names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub vocab_size: usize,
    /// Dimension of the counter-fitted space.
    pub cf_dim: usize,
    /// Dimension of the training embedding.
    pub emb_dim: usize,
    /// Synonym radius δ the counter-fitted geometry is built for.
    pub delta: f64,
    pub cluster_min: usize,
    pub cluster_max: usize,
    /// Probability that a new cluster is a singleton (a word with no synonyms).
    pub singleton_prob: f64,
    pub num_classes: usize,
    /// Fraction of clusters that indicate a class; the rest are neutral.
    pub indicative_fraction: f64,
    pub sentence_min: usize,
    pub sentence_max: usize,
    /// Range of label-class indicative words per sentence.
    pub indicative_min: usize,
    pub indicative_max: usize,
    /// Probability of writing a non-canonical cluster member.
    pub rare_prob: f64,
    /// Half-width of the uniform distribution of training-embedding entries.
    pub emb_scale: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            cf_dim: 16,
            emb_dim: 16,
            delta: 0.5,
            cluster_min: 2,
            cluster_max: 6,
            singleton_prob: 0.1,
            num_classes: 2,
            indicative_fraction: 0.4,
            sentence_min: 8,
            sentence_max: 16,
            indicative_min: 2,
            indicative_max: 3,
            rare_prob: 0.05,
            emb_scale: 1.0,
            train_size: 2000,
            dev_size: 500,
            test_size: 500,
        }
    }
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

impl GeneratorSpec {
    /// Reads `key = value` lines (`#` starts a comment) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            spec.set(key.trim(), value.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = parse_field(key, value)?,
            "cf_dim" => self.cf_dim = parse_field(key, value)?,
            "emb_dim" => self.emb_dim = parse_field(key, value)?,
            "delta" => self.delta = parse_field(key, value)?,
            "cluster_min" => self.cluster_min = parse_field(key, value)?,
            "cluster_max" => self.cluster_max = parse_field(key, value)?,
            "singleton_prob" => self.singleton_prob = parse_field(key, value)?,
            "num_classes" => self.num_classes = parse_field(key, value)?,
            "indicative_fraction" => self.indicative_fraction = parse_field(key, value)?,
            "sentence_min" => self.sentence_min = parse_field(key, value)?,
            "sentence_max" => self.sentence_max = parse_field(key, value)?,
            "indicative_min" => self.indicative_min = parse_field(key, value)?,
            "indicative_max" => self.indicative_max = parse_field(key, value)?,
            "rare_prob" => self.rare_prob = parse_field(key, value)?,
            "emb_scale" => self.emb_scale = parse_field(key, value)?,
            "train_size" => self.train_size = parse_field(key, value)?,
            "dev_size" => self.dev_size = parse_field(key, value)?,
            "test_size" => self.test_size = parse_field(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown generator key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in declaration order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("cf_dim", self.cf_dim.to_string()),
            ("emb_dim", self.emb_dim.to_string()),
            ("delta", self.delta.to_string()),
            ("cluster_min", self.cluster_min.to_string()),
            ("cluster_max", self.cluster_max.to_string()),
            ("singleton_prob", self.singleton_prob.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("indicative_fraction", self.indicative_fraction.to_string()),
            ("sentence_min", self.sentence_min.to_string()),
            ("sentence_max", self.sentence_max.to_string()),
            ("indicative_min", self.indicative_min.to_string()),
            ("indicative_max", self.indicative_max.to_string()),
            ("rare_prob", self.rare_prob.to_string()),
            ("emb_scale", self.emb_scale.to_string()),
            ("train_size", self.train_size.to_string()),
            ("dev_size", self.dev_size.to_string()),
            ("test_size", self.test_size.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.cluster_min < 1 || self.cluster_min > self.cluster_max {
            return bad(format!("cluster size range {}..={} is empty", self.cluster_min, self.cluster_max));
        }
        if self.cluster_max > 26 {
            return bad("cluster_max may not exceed 26".into());
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if !(self.delta > 0.0) || self.cf_dim == 0 || self.emb_dim == 0 {
            return bad("delta, cf_dim and emb_dim must be positive".into());
        }
        if self.indicative_min < 1 || self.indicative_min > self.indicative_max {
            return bad("indicative word range is empty".into());
        }
        if self.sentence_min < 1 || self.sentence_min > self.sentence_max {
            return bad("sentence length range is empty".into());
        }
        // worst case: label class at max, every other class one below
        let worst = self.indicative_max + (self.num_classes - 1) * (self.indicative_max - 1);
        if worst > self.sentence_min {
            return bad(format!("sentence_min {} cannot hold {worst} indicative words", self.sentence_min));
        }
        if !(0.0..=1.0).contains(&self.singleton_prob) || !(0.0..=1.0).contains(&self.rare_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if !(self.indicative_fraction > 0.0 && self.indicative_fraction < 1.0) {
            return bad("indicative_fraction must lie in (0, 1)".into());
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train_size and test_size must be positive".into());
        }
        Ok(())
    }
}

/// Ground truth of a generated benchmark plus its rendered files.
#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub spec: GeneratorSpec,
    pub words: Vec<String>,
    /// Cluster id of each word.
    pub cluster_of: Vec<usize>,
    /// Member word indices per cluster; the first member is canonical.
    pub clusters: Vec<Vec<usize>>,
    /// Class indicated by each cluster, `None` for neutral clusters.
    pub cluster_class: Vec<Option<usize>>,
    pub cf_vectors: Vec<Vec<f64>>,
    pub emb_vectors: Vec<Vec<f64>>,
    /// `(label, word indices)` per split.
    pub train: Vec<(usize, Vec<usize>)>,
    pub dev: Vec<(usize, Vec<usize>)>,
    pub test: Vec<(usize, Vec<usize>)>,
}

pub const SYNTHETIC_FILES: [&str; 5] = ["counter_fitted.txt", "embeddings.txt", "train.tsv", "dev.tsv", "test.tsv"];

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl SyntheticBenchmark {
    pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "synthetic", 0);

        // partition the vocabulary into clusters
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        let mut next = 0;
        while next < spec.vocab_size {
            let size = if rng.gen_bool(spec.singleton_prob) {
                1
            } else {
                rng.gen_range(spec.cluster_min..=spec.cluster_max)
            };
            let size = size.min(spec.vocab_size - next);
            clusters.push((next..next + size).collect());
            next += size;
        }
        let n_clusters = clusters.len();
        let n_indicative = ((n_clusters as f64) * spec.indicative_fraction).round() as usize;
        if n_indicative < spec.num_classes || n_indicative >= n_clusters {
            return Err(Error::Infeasible(format!(
                "{n_clusters} clusters cannot provide {} classes plus neutral words",
                spec.num_classes
            )));
        }
        let mut order: Vec<usize> = (0..n_clusters).collect();
        order.shuffle(&mut rng);
        let mut cluster_class = vec![None; n_clusters];
        for (j, &c) in order.iter().take(n_indicative).enumerate() {
            cluster_class[c] = Some(j % spec.num_classes);
        }

        let mut cluster_of = vec![0; spec.vocab_size];
        let mut words = vec![String::new(); spec.vocab_size];
        for (c, members) in clusters.iter().enumerate() {
            for (j, &w) in members.iter().enumerate() {
                cluster_of[w] = c;
                words[w] = format!("w{c:04}{}", (b'a' + j as u8) as char);
            }
        }

        // counter-fitted geometry: members within radius 0.45δ of their
        // center, centers at least 4δ + 0.9δ apart
        let radius = 0.45 * spec.delta;
        let separation = 4.0 * spec.delta + 2.0 * radius;
        let half_width = separation * (n_clusters as f64).powf(1.0 / spec.cf_dim as f64).max(1.0) * 2.0;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
        for _ in 0..n_clusters {
            let mut placed = false;
            for _ in 0..1000 {
                let cand: Vec<f64> = (0..spec.cf_dim).map(|_| rng.gen_range(-half_width..half_width)).collect();
                let ok = centers.iter().all(|c| {
                    c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
                });
                if ok {
                    centers.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Infeasible(format!(
                    "could not place {n_clusters} separated clusters in {} dimensions",
                    spec.cf_dim
                )));
            }
        }
        let mut cf_vectors = vec![Vec::new(); spec.vocab_size];
        for (c, members) in clusters.iter().enumerate() {
            for &w in members {
                let dir = random_unit(&mut rng, spec.cf_dim);
                let r = radius * rng.gen::<f64>();
                cf_vectors[w] = centers[c].iter().zip(&dir).map(|(x, u)| x + r * u).collect();
            }
        }

        let emb_vectors: Vec<Vec<f64>> = (0..spec.vocab_size)
            .map(|_| (0..spec.emb_dim).map(|_| rng.gen_range(-spec.emb_scale..spec.emb_scale)).collect())
            .collect();

        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
        let mut neutral = Vec::new();
        for (c, class) in cluster_class.iter().enumerate() {
            match class {
                Some(k) => by_class[*k].push(c),
                None => neutral.push(c),
            }
        }

        let mut bench = Self {
            spec: spec.clone(),
            words,
            cluster_of,
            clusters,
            cluster_class,
            cf_vectors,
            emb_vectors,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        let draw_split = |n: usize, rng: &mut rng::Rng, bench: &Self| -> Vec<(usize, Vec<usize>)> {
            (0..n).map(|_| bench.sample_sentence(rng, &by_class, &neutral)).collect()
        };
        bench.train = draw_split(spec.train_size, &mut rng, &bench);
        bench.dev = draw_split(spec.dev_size, &mut rng, &bench);
        bench.test = draw_split(spec.test_size, &mut rng, &bench);
        Ok(bench)
    }

    fn pick_word<R: Rng>(&self, rng: &mut R, cluster: usize) -> usize {
        let members = &self.clusters[cluster];
        if members.len() > 1 && rng.gen_bool(self.spec.rare_prob) {
            members[rng.gen_range(1..members.len())]
        } else {
            members[0]
        }
    }

    fn sample_sentence<R: Rng>(&self, rng: &mut R, by_class: &[Vec<usize>], neutral: &[usize]) -> (usize, Vec<usize>) {
        let spec = &self.spec;
        let label = rng.gen_range(0..spec.num_classes);
        let n_label = rng.gen_range(spec.indicative_min..=spec.indicative_max);
        let len = rng.gen_range(spec.sentence_min..=spec.sentence_max);
        let mut words = Vec::with_capacity(len);
        for _ in 0..n_label {
            let c = *by_class[label].choose(rng).expect("every class has clusters");
            words.push(self.pick_word(rng, c));
        }
        for (class, clusters) in by_class.iter().enumerate() {
            if class == label {
                continue;
            }
            for _ in 0..rng.gen_range(0..n_label) {
                let c = *clusters.choose(rng).expect("every class has clusters");
                words.push(self.pick_word(rng, c));
            }
        }
        while words.len() < len {
            let c = *neutral.choose(rng).expect("neutral clusters exist");
            words.push(self.pick_word(rng, c));
        }
        words.shuffle(rng);
        (label, words)
    }

    /// Class with the strict majority of class-indicative words, or `None`
    /// when there is no strict majority. Depends only on cluster membership.
    pub fn label_of(&self, words: &[usize]) -> Option<usize> {
        let mut counts = vec![0usize; self.spec.num_classes];
        for &w in words {
            if let Some(c) = self.cluster_class[self.cluster_of[w]] {
                counts[c] += 1;
            }
        }
        let max = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
        let (first, _) = winners.next()?;
        if winners.next().is_some() || max == 0 {
            None
        } else {
            Some(first)
        }
    }

    fn render_vectors(&self, vectors: &[Vec<f64>]) -> String {
        let mut s = String::new();
        for (w, v) in self.words.iter().zip(vectors) {
            s.push_str(w);
            for x in v {
                write!(s, " {x}").expect("writing to a String");
            }
            s.push('\n');
        }
        s
    }

    fn render_split(&self, split: &[(usize, Vec<usize>)]) -> String {
        let mut s = String::new();
        for (label, words) in split {
            let text: Vec<&str> = words.iter().map(|&w| self.words[w].as_str()).collect();
            writeln!(s, "{label}\t{}", text.join(" ")).expect("writing to a String");
        }
        s
    }

    /// `(file name, contents)` in [`SYNTHETIC_FILES`] order.
    pub fn render(&self) -> Vec<(&'static str, String)> {
        vec![
            (SYNTHETIC_FILES[0], self.render_vectors(&self.cf_vectors)),
            (SYNTHETIC_FILES[1], self.render_vectors(&self.emb_vectors)),
            (SYNTHETIC_FILES[2], self.render_split(&self.train)),
            (SYNTHETIC_FILES[3], self.render_split(&self.dev)),
            (SYNTHETIC_FILES[4], self.render_split(&self.test)),
        ]
    }
}

/// A generated file and its SHA-256.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub digest: String,
    pub bytes: usize,
}

/// Generates the benchmark and writes its files into `out_dir`.
pub fn generate_synthetic(spec: &GeneratorSpec, seed: u64, out_dir: &Path) -> Result<(SyntheticBenchmark, Vec<ManifestEntry>)> {
    let bench = SyntheticBenchmark::generate(spec, seed)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::new();
    for (name, contents) in bench.render() {
        let path = out_dir.join(name);
        fs::write(&path, contents.as_bytes())?;
        manifest.push(ManifestEntry {
            path,
            digest: rng::digest_bytes(contents.as_bytes()),
            bytes: contents.len(),
        });
    }
    Ok((bench, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{parse_embedding_file, UNK_INDEX};
    use crate::losses::Norm;
    use crate::synonyms::{build_synonym_dict, SynonymConfig};

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            vocab_size: 300,
            train_size: 100,
            dev_size: 20,
            test_size: 50,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn tokenization_rules() {
        assert_eq!(tokenize("Great movie !"), vec!["great", "movie"]);
        assert_eq!(tokenize("  \"Hello,\"  WORLD...\u{3000}it's "), vec!["hello", "world", "it's"]);
        let once = tokenize("A (b) c!");
        assert_eq!(tokenize(&once.join(" ")), once);
    }

    #[test]
    fn load_tsv_example_and_oov() {
        let vocab = Vocabulary::from_words(["great", "movie"]).unwrap();
        let ds = load_tsv("1\tGreat movie !\n0\tawful movie\n2\t!!!\n".as_bytes(), &vocab).unwrap();
        assert_eq!(ds.examples.len(), 2);
        assert_eq!(ds.examples[0].label, 1);
        assert_eq!(ds.examples[0].tokens, vec![1, 2]);
        assert_eq!(ds.examples[1].tokens, vec![UNK_INDEX, 2]);
        assert_eq!(ds.skipped, 1);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn load_tsv_errors_name_lines() {
        let vocab = Vocabulary::new();
        assert!(matches!(load_tsv("0\tok\nno tab here\n".as_bytes(), &vocab), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(load_tsv("-1\tx\n".as_bytes(), &vocab), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn tsv_round_trip() {
        let vocab = Vocabulary::from_words(["a", "b"]).unwrap();
        let ds = load_tsv("0\tA b, zz\n1\tb\n".as_bytes(), &vocab).unwrap();
        let mut buf = Vec::new();
        ds.write_tsv("all", &mut buf).unwrap();
        let again = load_tsv(buf.as_slice(), &vocab).unwrap();
        let toks = |d: &Dataset| d.examples.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>();
        assert_eq!(toks(&ds), toks(&again));
    }

    #[test]
    fn generator_geometry_postconditions() {
        let spec = small_spec();
        let bench = SyntheticBenchmark::generate(&spec, 3).unwrap();
        let d = |a: usize, b: usize| Norm::L2.distance(&bench.cf_vectors[a], &bench.cf_vectors[b]);
        for a in 0..spec.vocab_size {
            for b in a + 1..spec.vocab_size {
                if bench.cluster_of[a] == bench.cluster_of[b] {
                    assert!(d(a, b) <= spec.delta);
                } else {
                    assert!(d(a, b) >= 4.0 * spec.delta);
                }
            }
        }
    }

    #[test]
    fn synonym_dict_recovers_clusters() {
        let spec = small_spec();
        let bench = SyntheticBenchmark::generate(&spec, 4).unwrap();
        let files = bench.render();
        let (cf_vocab, cf) = parse_embedding_file(files[0].1.as_bytes()).unwrap();
        let k = 8;
        let dict = build_synonym_dict(&cf_vocab, &cf, &cf_vocab, SynonymConfig { k, delta: spec.delta, p: Norm::L2 }).unwrap();
        for w in 0..spec.vocab_size {
            let idx = cf_vocab.get(&bench.words[w]).unwrap();
            let mut got: Vec<usize> = dict.synonyms(idx).iter().map(|&s| s - 1).collect();
            got.sort_unstable();
            let truth: Vec<usize> = bench.clusters[bench.cluster_of[w]].iter().copied().filter(|&x| x != w).collect();
            assert!(truth.len() <= k);
            assert_eq!(got, truth);
        }
    }

    #[test]
    fn labels_are_invariant_under_cluster_substitution() {
        let bench = SyntheticBenchmark::generate(&small_spec(), 5).unwrap();
        let mut rng = rng::stream(0, "test", 0);
        for (label, words) in bench.train.iter().chain(&bench.test) {
            assert_eq!(bench.label_of(words), Some(*label));
        }
        for t in 0..1000 {
            let (label, words) = &bench.test[t % bench.test.len()];
            let mut w = words.clone();
            let pos = rng.gen_range(0..w.len());
            let cluster = &bench.clusters[bench.cluster_of[w[pos]]];
            w[pos] = *cluster.choose(&mut rng).unwrap();
            assert_eq!(bench.label_of(&w), Some(*label));
        }
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let a = SyntheticBenchmark::generate(&small_spec(), 9).unwrap().render();
        let b = SyntheticBenchmark::generate(&small_spec(), 9).unwrap().render();
        let c = SyntheticBenchmark::generate(&small_spec(), 10).unwrap().render();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = GeneratorSpec {
            sentence_min: 2,
            ..GeneratorSpec::default()
        };
        assert!(matches!(SyntheticBenchmark::generate(&spec, 0), Err(Error::Infeasible(_))));
        let spec = GeneratorSpec {
            vocab_size: 3,
            ..GeneratorSpec::default()
        };
        assert!(matches!(SyntheticBenchmark::generate(&spec, 0), Err(Error::Infeasible(_))));
        let parsed = GeneratorSpec::parse("vocab_size = 500 # smaller\nrare_prob=0.2\n").unwrap();
        assert_eq!(parsed.vocab_size, 500);
        assert_eq!(parsed.rare_prob, 0.2);
        assert!(GeneratorSpec::parse("bogus = 1").is_err());
    }
}
