//! Word-vector tables: parsing text vector files, binary snapshots, and
//! simple geometry queries (mean pairwise distance, exact nearest neighbors).

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Norm;
use crate::rng;

pub const UNK: &str = "<unk>";
pub const UNK_INDEX: usize = 0;

/// Bijection between words and dense indices. Index 0 is always `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only `<unk>`.
    pub fn new() -> Self {
        let mut index = HashMap::new();
        index.insert(UNK.to_string(), UNK_INDEX);
        Self {
            words: vec![UNK.to_string()],
            index,
        }
    }

    /// Builds a vocabulary from words in order, after the reserved `<unk>`.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for w in words {
            vocab.push(w)?;
        }
        Ok(vocab)
    }

    pub fn push(&mut self, word: impl Into<String>) -> Result<usize> {
        let word = word.into();
        if self.index.contains_key(&word) {
            return Err(Error::DuplicateWord(word));
        }
        let idx = self.words.len();
        self.index.insert(word.clone(), idx);
        self.words.push(word);
        Ok(idx)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn index_or_unk(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK_INDEX)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// Always false: `<unk>` is always present.
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_index(&self) -> usize {
        UNK_INDEX
    }

    /// SHA-256 over the ordered word list.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for w in &self.words {
            bytes.extend_from_slice(w.as_bytes());
            bytes.push(b'\n');
        }
        rng::digest_bytes(&bytes)
    }
}

/// `V × D` table of finite word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dims: usize) -> Self {
        Self {
            data: Array2::zeros((rows, dims)),
        }
    }

    /// Wraps an array, rejecting non-finite entries.
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        let m = Self { data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            if r.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        let data = Array2::from_shape_vec((rows.len(), dims), flat).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_array(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn row_mut(&mut self, i: usize) -> ArrayViewMut1<'_, f64> {
        self.data.row_mut(i)
    }

    /// Row `i` as a contiguous slice.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let d = self.dims();
        &self.as_slice()[i * d..(i + 1) * d]
    }

    pub fn row_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dims();
        &mut self.as_slice_mut()[i * d..(i + 1) * d]
    }

    /// Row-major backing storage.
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("embedding matrix is always standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("embedding matrix is always standard layout")
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|x| !x.is_finite()) {
            let d = self.dims().max(1);
            return Err(Error::Format(format!("non-finite value at row {}, column {}", pos / d, pos % d)));
        }
        Ok(())
    }
}

/// Parses `word f1 … fD` lines. `<unk>` is prepended at index 0 with the
/// element-wise mean of all parsed vectors.
pub fn parse_embedding_file<R: BufRead>(reader: R) -> Result<(Vocabulary, EmbeddingMatrix)> {
    let mut vocab = Vocabulary::new();
    let mut flat: Vec<f64> = Vec::new();
    let mut dims: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue;
        };
        let start = flat.len();
        for field in fields {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("non-numeric field `{field}`"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite value `{field}`"),
                });
            }
            flat.push(value);
        }
        let found = flat.len() - start;
        match dims {
            None if found == 0 => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "vector has no components".into(),
                })
            }
            None => dims = Some(found),
            Some(d) if d != found => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected {d} components, found {found}"),
                })
            }
            Some(_) => {}
        }
        if word == UNK {
            return Err(Error::DuplicateWord(word.to_string()));
        }
        vocab.push(word)?;
    }

    let Some(dims) = dims else {
        return Err(Error::Empty("embedding file has no vectors".into()));
    };
    let n = vocab.len() - 1;
    let mut data = Vec::with_capacity((n + 1) * dims);
    let mut mean = vec![0.0; dims];
    for row in flat.chunks_exact(dims) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    data.extend_from_slice(&mean);
    data.extend_from_slice(&flat);
    let matrix = Array2::from_shape_vec((n + 1, dims), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((vocab, EmbeddingMatrix::from_array(matrix)?))
}

pub fn read_embedding_file(path: &Path) -> Result<(Vocabulary, EmbeddingMatrix)> {
    parse_embedding_file(BufReader::new(File::open(path)?))
}

/// Writes every row except `<unk>` as `word f1 … fD`, using the shortest
/// float representation that parses back to the same value.
pub fn write_embedding_file<W: Write>(vocab: &Vocabulary, matrix: &EmbeddingMatrix, mut out: W) -> Result<()> {
    if vocab.len() != matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: vocab.len(),
            found: matrix.rows(),
        });
    }
    for (i, word) in vocab.words().iter().enumerate().skip(1) {
        out.write_all(word.as_bytes())?;
        for x in matrix.row_slice(i) {
            write!(out, " {x}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Which unordered row pairs enter [`mean_pairwise_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSelection {
    /// All `V(V−1)/2` pairs.
    Exact,
    /// This many distinct pairs, drawn uniformly without replacement.
    Sampled(usize),
    /// Exact up to [`AUTO_EXACT_LIMIT`] pairs, otherwise
    /// [`AUTO_SAMPLE_PAIRS`] sampled pairs.
    Auto,
}

pub const AUTO_EXACT_LIMIT: usize = 10_000_000;
pub const AUTO_SAMPLE_PAIRS: usize = 1_000_000;

/// Mean `ℓp` distance over unordered pairs of distinct rows (the average
/// word distance α₀ of an embedding).
pub fn mean_pairwise_distance(matrix: &EmbeddingMatrix, p: Norm, selection: PairSelection, seed: u64) -> Result<f64> {
    let rows: Vec<usize> = (0..matrix.rows()).collect();
    mean_pairwise_distance_rows(matrix, &rows, p, selection, seed)
}

/// As [`mean_pairwise_distance`], restricted to the given rows.
pub fn mean_pairwise_distance_rows(matrix: &EmbeddingMatrix, rows: &[usize], p: Norm, selection: PairSelection, seed: u64) -> Result<f64> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Empty(format!("need at least 2 rows for a pairwise distance, got {n}")));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= matrix.rows()) {
        return Err(Error::OutOfRange {
            index: bad,
            size: matrix.rows(),
        });
    }
    let total = n * (n - 1) / 2;
    let selection = match selection {
        PairSelection::Auto if total > AUTO_EXACT_LIMIT => PairSelection::Sampled(AUTO_SAMPLE_PAIRS),
        PairSelection::Auto => PairSelection::Exact,
        PairSelection::Sampled(0) => return Err(Error::InvalidConfig("sample_pairs must be at least 1".into())),
        PairSelection::Sampled(m) if m >= total => PairSelection::Exact,
        other => other,
    };
    match selection {
        PairSelection::Exact => {
            let mut sum = 0.0;
            for a in 0..n {
                let u = matrix.row_slice(rows[a]);
                for &rb in &rows[a + 1..] {
                    sum += p.distance(u, matrix.row_slice(rb));
                }
            }
            Ok(sum / total as f64)
        }
        PairSelection::Sampled(m) => {
            let mut rng = rng::stream(seed, "pairwise-distance", 0);
            let mut seen = HashSet::with_capacity(m);
            let mut sum = 0.0;
            while seen.len() < m {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a == b {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    sum += p.distance(matrix.row_slice(rows[key.0]), matrix.row_slice(rows[key.1]));
                }
            }
            Ok(sum / m as f64)
        }
        PairSelection::Auto => unreachable!("resolved above"),
    }
}

/// Exact `k` nearest rows to `query` among `candidates` (excluding `query`
/// itself), sorted by distance then index.
pub fn nearest_neighbors(matrix: &EmbeddingMatrix, query: usize, candidates: impl IntoIterator<Item = usize>, k: usize, p: Norm) -> Vec<(usize, f64)> {
    let q = matrix.row_slice(query);
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .filter(|&c| c != query)
        .map(|c| (c, p.distance(q, matrix.row_slice(c))))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Provenance recorded with a snapshot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub source: String,
    pub config_digest: String,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSnapshot {
    pub vocabulary: Vocabulary,
    pub matrix: EmbeddingMatrix,
    pub meta: SnapshotMeta,
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"FTMLEMB\0";
const SNAPSHOT_VERSION: u32 = 1;

pub(crate) fn write_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format("file is truncated".into()));
    }
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 in string field".into()))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b).map_err(truncated)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8], expected_version: u32) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::Format("bad magic tag".into()));
    }
    let version = read_u32(r)?;
    if version != expected_version {
        return Err(Error::Version {
            expected: expected_version,
            found: version,
        });
    }
    Ok(())
}

pub fn write_snapshot<W: Write>(snapshot: &EmbeddingSnapshot, mut w: W) -> Result<()> {
    let EmbeddingSnapshot { vocabulary, matrix, meta } = snapshot;
    if vocabulary.len() != matrix.rows() {
        return Err(Error::DimensionMismatch {
            expected: vocabulary.len(),
            found: matrix.rows(),
        });
    }
    w.write_all(SNAPSHOT_MAGIC)?;
    write_u32(&mut w, SNAPSHOT_VERSION)?;
    write_str(&mut w, &meta.source)?;
    write_str(&mut w, &meta.config_digest)?;
    write_u64(&mut w, meta.epoch)?;
    write_u64(&mut w, matrix.rows() as u64)?;
    write_u64(&mut w, matrix.dims() as u64)?;
    for word in vocabulary.words() {
        write_str(&mut w, word)?;
    }
    write_f64s(&mut w, matrix.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut r: R) -> Result<EmbeddingSnapshot> {
    read_magic(&mut r, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let meta = SnapshotMeta {
        source: read_str(&mut r)?,
        config_digest: read_str(&mut r)?,
        epoch: read_u64(&mut r)?,
    };
    let rows = read_u64(&mut r)? as usize;
    let dims = read_u64(&mut r)? as usize;
    if rows == 0 {
        return Err(Error::Format("snapshot has no rows".into()));
    }
    let mut words = Vec::new();
    for _ in 0..rows {
        words.push(read_str(&mut r)?);
    }
    if words[0] != UNK {
        return Err(Error::Format("first vocabulary entry must be <unk>".into()));
    }
    let vocabulary = Vocabulary::from_words(words.into_iter().skip(1))?;
    let count = rows.checked_mul(dims).ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let data = read_f64s(&mut r, count)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after matrix".into()));
    }
    let array = Array2::from_shape_vec((rows, dims), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(EmbeddingSnapshot {
        vocabulary,
        matrix: EmbeddingMatrix::from_array(array)?,
        meta,
    })
}

pub fn save_snapshot(snapshot: &EmbeddingSnapshot, path: &Path) -> Result<()> {
    write_snapshot(snapshot, BufWriter::new(File::create(path)?))
}

pub fn load_snapshot(path: &Path) -> Result<EmbeddingSnapshot> {
    read_snapshot(BufReader::new(File::open(path)?))
}
