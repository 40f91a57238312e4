//! Synonym sets `S(w)`: the at most `k` nearest words of `w` within distance
//! `δ` in a counter-fitted vector space, and negative sampling against them.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, Vocabulary, UNK_INDEX};
use crate::error::{Error, Result};
use crate::losses::Norm;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynonymConfig {
    pub k: usize,
    pub delta: f64,
    pub p: Norm,
}

impl Default for SynonymConfig {
    fn default() -> Self {
        Self {
            k: 8,
            delta: 0.5,
            p: Norm::L2,
        }
    }
}

impl SynonymConfig {
    /// `k >= 1` and `δ >= 0`. A zero `δ` is accepted and yields empty sets.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta must be a nonnegative finite number, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Per-word synonym lists, indexed by the target (model) vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SynonymDict {
    sets: Vec<Vec<usize>>,
    config: SynonymConfig,
    source_digest: String,
}

/// Sampled non-synonyms for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSet {
    words: Vec<usize>,
}

impl NegativeSet {
    pub fn new(words: Vec<usize>) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }
}

/// Builds `S(w)` for every target word by exact brute-force search in the
/// counter-fitted space. Candidates are restricted to target words that also
/// have a counter-fitted vector; `<unk>` never participates.
pub fn build_synonym_dict(cf_vocab: &Vocabulary, cf_matrix: &EmbeddingMatrix, target_vocab: &Vocabulary, config: SynonymConfig) -> Result<SynonymDict> {
    config.validate()?;
    if cf_vocab.len() != cf_matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: cf_vocab.len(),
            found: cf_matrix.rows(),
        });
    }
    // (target index, cf row) for shared words
    let shared: Vec<(usize, usize)> = target_vocab
        .words()
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(t, w)| cf_vocab.get(w).filter(|&c| c != UNK_INDEX).map(|c| (t, c)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Empty("counter-fitted and target vocabularies share no words".into()));
    }

    let found: Vec<(usize, Vec<usize>)> = shared
        .par_iter()
        .map(|&(t, c)| {
            let anchor = cf_matrix.row_slice(c);
            let mut hits: Vec<(f64, usize)> = shared
                .iter()
                .filter(|&&(t2, _)| t2 != t)
                .filter_map(|&(t2, c2)| {
                    let d = config.p.distance(anchor, cf_matrix.row_slice(c2));
                    (d <= config.delta).then_some((d, t2))
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            hits.truncate(config.k);
            (t, hits.into_iter().map(|(_, i)| i).collect())
        })
        .collect();

    let mut sets = vec![Vec::new(); target_vocab.len()];
    for (t, set) in found {
        sets[t] = set;
    }
    Ok(SynonymDict {
        sets,
        config,
        source_digest: String::new(),
    })
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(rng::digest_bytes(&std::fs::read(path)?))
}

impl SynonymDict {
    /// Constructs a dictionary from explicit sets, validating the structural
    /// invariants (size cap, no self-synonyms, no duplicates, in range).
    pub fn from_sets(sets: Vec<Vec<usize>>, config: SynonymConfig, source_digest: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let n = sets.len();
        for (w, set) in sets.iter().enumerate() {
            if set.len() > config.k {
                return Err(Error::InvalidConfig(format!("word {w} has {} synonyms but k = {}", set.len(), config.k)));
            }
            let mut seen = HashSet::new();
            for &s in set {
                if s >= n {
                    return Err(Error::OutOfRange { index: s, size: n });
                }
                if s == w {
                    return Err(Error::InvalidConfig(format!("word {w} lists itself as a synonym")));
                }
                if s == UNK_INDEX {
                    return Err(Error::InvalidConfig(format!("word {w} lists <unk> as a synonym")));
                }
                if !seen.insert(s) {
                    return Err(Error::InvalidConfig(format!("word {w} lists synonym {s} twice")));
                }
            }
        }
        Ok(Self {
            sets,
            config,
            source_digest: source_digest.into(),
        })
    }

    pub fn with_source_digest(mut self, digest: impl Into<String>) -> Self {
        self.source_digest = digest.into();
        self
    }

    pub fn synonyms(&self, word: usize) -> &[usize] {
        self.sets.get(word).map_or(&[], Vec::as_slice)
    }

    pub fn config(&self) -> &SynonymConfig {
        &self.config
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    /// Size of the target vocabulary the dictionary indexes.
    pub fn vocab_size(&self) -> usize {
        self.sets.len()
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    /// Number of words with a nonempty synonym set.
    pub fn covered_words(&self) -> usize {
        self.sets.iter().filter(|s| !s.is_empty()).count()
    }

    pub fn mean_set_size(&self) -> f64 {
        let covered = self.covered_words();
        if covered == 0 {
            return 0.0;
        }
        self.sets.iter().map(Vec::len).sum::<usize>() as f64 / covered as f64
    }

    /// Fails with [`Error::StaleDictionary`] if `path` is not the
    /// counter-fitted file the dictionary was built from.
    pub fn verify_source(&self, path: &Path) -> Result<()> {
        let found = file_digest(path)?;
        if found != self.source_digest {
            return Err(Error::StaleDictionary {
                expected: self.source_digest.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Draws `k` distinct words uniformly from the whole vocabulary, excluding
/// `<unk>`, the anchor and its synonyms.
pub fn sample_negatives<R: Rng + ?Sized>(dict: &SynonymDict, anchor: usize, rng: &mut R) -> Result<NegativeSet> {
    sample_negatives_in(dict, anchor, None, rng)
}

/// As [`sample_negatives`], drawing from `pool` instead of the full
/// vocabulary when given.
pub fn sample_negatives_in<R: Rng + ?Sized>(dict: &SynonymDict, anchor: usize, pool: Option<&[usize]>, rng: &mut R) -> Result<NegativeSet> {
    let k = dict.config.k;
    let syns = dict.synonyms(anchor);
    let excluded = |w: usize| w == UNK_INDEX || w == anchor || syns.contains(&w);
    let size = pool.map_or(dict.vocab_size(), <[usize]>::len);
    let eligible = match pool {
        Some(pool) => pool.iter().filter(|&&w| !excluded(w)).count(),
        None => (0..dict.vocab_size()).filter(|&w| !excluded(w)).count(),
    };
    if eligible < k {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {k} negatives for word {anchor}: only {eligible} eligible words"
        )));
    }
    let mut words = Vec::with_capacity(k);
    while words.len() < k {
        let draw = rng.gen_range(0..size);
        let w = pool.map_or(draw, |p| p[draw]);
        if !excluded(w) && !words.contains(&w) {
            words.push(w);
        }
    }
    Ok(NegativeSet { words })
}

const DICT_HEADER: &str = "# ftml synonym dictionary v1";

/// Writes the dictionary as text: a header block of `key=value` lines, then
/// one `word<TAB>syn1,syn2,...` line per vocabulary word (excluding `<unk>`).
pub fn write_dict<W: Write>(dict: &SynonymDict, vocab: &Vocabulary, mut out: W) -> Result<()> {
    if vocab.len() != dict.vocab_size() {
        return Err(Error::VocabularyMismatch(format!(
            "dictionary indexes {} words, vocabulary has {}",
            dict.vocab_size(),
            vocab.len()
        )));
    }
    writeln!(out, "{DICT_HEADER}")?;
    writeln!(out, "k={}", dict.config.k)?;
    writeln!(out, "delta={}", dict.config.delta)?;
    writeln!(out, "p={}", dict.config.p)?;
    writeln!(out, "digest={}", dict.source_digest)?;
    for (w, word) in vocab.words().iter().enumerate().skip(1) {
        let mut syns = Vec::with_capacity(dict.sets[w].len());
        for &s in &dict.sets[w] {
            let name = &vocab.words()[s];
            if name.contains(',') {
                return Err(Error::Format(format!("synonym `{name}` contains a comma")));
            }
            syns.push(name.as_str());
        }
        writeln!(out, "{word}\t{}", syns.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dict<R: BufRead>(reader: R, vocab: &Vocabulary) -> Result<SynonymDict> {
    let mut lines = reader.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, line)) => Ok((i + 1, line?)),
            None => Err(Error::Format(format!("missing {expect}"))),
        }
    };
    let (_, header) = next_line("header")?;
    if header != DICT_HEADER {
        return Err(Error::Format(format!("unexpected header `{header}`")));
    }
    let mut field = |key: &str| -> Result<String> {
        let (line, text) = next_line(key)?;
        text.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("expected `{key}=`"),
            })
    };
    let k: usize = field("k")?.parse().map_err(|_| Error::Format("bad k".into()))?;
    let delta: f64 = field("delta")?.parse().map_err(|_| Error::Format("bad delta".into()))?;
    let p: Norm = field("p")?.parse()?;
    let digest = field("digest")?;

    let mut sets = vec![Vec::new(); vocab.len()];
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let (word, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: "missing tab separator".into(),
        })?;
        let w = vocab.get(word).ok_or_else(|| Error::VocabularyMismatch(format!("word `{word}` (line {lineno}) is not in the vocabulary")))?;
        if !sets[w].is_empty() {
            return Err(Error::DuplicateWord(word.to_string()));
        }
        if rest.is_empty() {
            continue;
        }
        for s in rest.split(',') {
            let idx = vocab.get(s).ok_or_else(|| Error::VocabularyMismatch(format!("synonym `{s}` (line {lineno}) is not in the vocabulary")))?;
            sets[w].push(idx);
        }
    }
    SynonymDict::from_sets(sets, SynonymConfig { k, delta, p }, digest)
}

pub fn save_dict(dict: &SynonymDict, vocab: &Vocabulary, path: &Path) -> Result<()> {
    write_dict(dict, vocab, BufWriter::new(File::create(path)?))
}

pub fn load_dict(path: &Path, vocab: &Vocabulary) -> Result<SynonymDict> {
    read_dict(BufReader::new(File::open(path)?), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Five words on a line at 0, 0.3, 0.6, 2.0, 5.0.
    fn line_fixture() -> (Vocabulary, EmbeddingMatrix) {
        let vocab = Vocabulary::from_words(["w0", "w1", "w2", "w3", "w4"]).unwrap();
        let m = EmbeddingMatrix::from_rows(&[vec![2.0], vec![0.0], vec![0.3], vec![0.6], vec![2.0], vec![5.0]]).unwrap();
        (vocab, m)
    }

    fn cfg(k: usize, delta: f64) -> SynonymConfig {
        SynonymConfig { k, delta, p: Norm::L2 }
    }

    #[test]
    fn line_example() {
        let (vocab, m) = line_fixture();
        let dict = build_synonym_dict(&vocab, &m, &vocab, cfg(2, 0.5)).unwrap();
        assert_eq!(dict.synonyms(1), &[2]);
        assert_eq!(dict.synonyms(2), &[1, 3]);
        assert_eq!(dict.synonyms(3), &[2]);
        assert!(dict.synonyms(4).is_empty());
        assert!(dict.synonyms(5).is_empty());
        assert!(dict.synonyms(UNK_INDEX).is_empty());
    }

    #[test]
    fn zero_delta_gives_empty_sets() {
        let (vocab, m) = line_fixture();
        let dict = build_synonym_dict(&vocab, &m, &vocab, cfg(8, 0.0)).unwrap();
        assert_eq!(dict.covered_words(), 0);
    }

    #[test]
    fn restricted_to_target_vocabulary() {
        let (cf_vocab, m) = line_fixture();
        let target = Vocabulary::from_words(["w1", "w3", "zzz"]).unwrap();
        let dict = build_synonym_dict(&cf_vocab, &m, &target, cfg(8, 0.5)).unwrap();
        assert_eq!(dict.vocab_size(), 4);
        assert!(dict.synonyms(1).is_empty());
        assert!(dict.synonyms(3).is_empty());
        let none = Vocabulary::from_words(["nope"]).unwrap();
        assert!(matches!(build_synonym_dict(&cf_vocab, &m, &none, cfg(8, 0.5)), Err(Error::Empty(_))));
    }

    #[test]
    fn dict_text_round_trip_and_rebuild_is_byte_identical() {
        let (vocab, m) = line_fixture();
        let dict = build_synonym_dict(&vocab, &m, &vocab, cfg(2, 0.5)).unwrap().with_source_digest("feed");
        let mut a = Vec::new();
        write_dict(&dict, &vocab, &mut a).unwrap();
        let back = read_dict(a.as_slice(), &vocab).unwrap();
        assert_eq!(back, dict);
        let rebuilt = build_synonym_dict(&vocab, &m, &vocab, cfg(2, 0.5)).unwrap().with_source_digest("feed");
        let mut b = Vec::new();
        write_dict(&rebuilt, &vocab, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn edited_k_fails_validation() {
        let (vocab, m) = line_fixture();
        let dict = build_synonym_dict(&vocab, &m, &vocab, cfg(2, 0.5)).unwrap();
        let mut buf = Vec::new();
        write_dict(&dict, &vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("k=2", "k=1");
        assert!(matches!(read_dict(text.as_bytes(), &vocab), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stale_digest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cf.txt");
        std::fs::write(&path, "a 1\nb 2\n").unwrap();
        let (vocab, m) = line_fixture();
        let dict = build_synonym_dict(&vocab, &m, &vocab, cfg(2, 0.5)).unwrap().with_source_digest(file_digest(&path).unwrap());
        dict.verify_source(&path).unwrap();
        std::fs::write(&path, "a 1\nb 3\n").unwrap();
        assert!(matches!(dict.verify_source(&path), Err(Error::StaleDictionary { .. })));
    }

    #[test]
    fn negatives_exhaust_a_minimal_vocabulary() {
        // vocab = unk + anchor + 2 synonyms + k eligible words
        let k = 3;
        let mut sets = vec![Vec::new(); 1 + 1 + 2 + k];
        sets[1] = vec![2, 3];
        let dict = SynonymDict::from_sets(sets, cfg(k, 0.5), "").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut negs = sample_negatives(&dict, 1, &mut rng).unwrap().words().to_vec();
        negs.sort_unstable();
        assert_eq!(negs, vec![4, 5, 6]);

        let mut sets = vec![Vec::new(); 1 + 1 + 2 + k - 1];
        sets[1] = vec![2, 3];
        let small = SynonymDict::from_sets(sets, cfg(k, 0.5), "").unwrap();
        assert!(sample_negatives(&small, 1, &mut rng).is_err());
    }

    #[test]
    fn negatives_are_deterministic_per_seed() {
        let dict = SynonymDict::from_sets(vec![Vec::new(); 50], cfg(8, 0.5), "").unwrap();
        let a = sample_negatives(&dict, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_negatives(&dict, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.size(), 8);
    }

    #[test]
    fn negatives_are_uniform() {
        let v = 1000;
        let k = 8;
        let mut sets = vec![Vec::new(); v];
        sets[10] = vec![11, 12];
        let dict = SynonymDict::from_sets(sets, cfg(k, 0.5), "").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0usize; v];
        let samples = 10_000;
        for _ in 0..samples {
            for &w in sample_negatives(&dict, 10, &mut rng).unwrap().words() {
                counts[w] += 1;
            }
        }
        for w in [0, 10, 11, 12] {
            assert_eq!(counts[w], 0);
        }
        let eligible = (v - 4) as f64;
        let p = k as f64 / eligible;
        let mean = samples as f64 * p;
        let sd = (samples as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for (w, &c) in counts.iter().enumerate() {
            if [0, 10, 11, 12].contains(&w) {
                continue;
            }
            // loose per-word band; the chi-squared statistic below is the sharp check
            assert!((c as f64 - mean).abs() <= 5.0 * sd, "word {w}: {c} vs {mean}");
            chi2 += (c as f64 - mean).powi(2) / mean;
        }
        // chi-squared with 995 dof: mean 995, sd ~44.6
        assert!((chi2 - 995.0).abs() < 3.0 * (2.0f64 * 995.0).sqrt(), "chi2 = {chi2}");
    }
}
