//! Vocabularies, labeled datasets and pretrained embedding files.
//!
//! Datasets arrive pre-tokenized: one document per line, written as
//! `label<TAB>token token ...`. Embedding files use the word2vec layouts:
//!
//! * text: a `V d` header line, then `word v1 ... vd` per line;
//! * binary: an ASCII `V d\n` header, then per word the word bytes, a single
//!   space, `d` little-endian `f32` values and an optional `\n`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Order in which [`Vocabulary::build`] assigns ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabOrder {
    #[default]
    FirstOccurrence,
    Sorted,
}

/// Dense bijection between tokens and ids `0..len()`.
///
/// Two reserved ids sit past the real words: [`Vocabulary::unk_id`] for
/// tokens missing from the vocabulary and [`Vocabulary::pad_id`] for padding.
/// Embedding tables hold `len() + 1` rows (words plus UNK); the padding row is
/// an implicit zero vector and is never a parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Collects the distinct tokens of `docs`.
    pub fn build<D, T>(docs: &[D], order: VocabOrder) -> Result<Self>
    where
        D: AsRef<[T]>,
        T: AsRef<str>,
    {
        if docs.is_empty() {
            return Err(Error::Empty("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut seen = HashSet::new();
        let mut words = Vec::new();
        for doc in docs {
            for tok in doc.as_ref() {
                let tok = tok.as_ref();
                if seen.insert(tok) {
                    words.push(tok.to_owned());
                }
            }
        }
        if words.is_empty() {
            return Err(Error::Empty("corpus contains no tokens".into()));
        }
        if order == VocabOrder::Sorted {
            words.sort();
        }
        Self::from_words(words)
    }

    /// Wraps an explicit word list; ids follow list order.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w == UNK_TOKEN || w == PAD_TOKEN {
                return Err(Error::InvalidArgument(format!("reserved token {w:?} in vocabulary")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// Number of real words (excluding UNK and PAD).
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk_id(&self) -> usize {
        self.words.len()
    }

    pub fn pad_id(&self) -> usize {
        self.words.len() + 1
    }

    /// Rows of a model embedding table: every word plus the UNK row.
    pub fn table_rows(&self) -> usize {
        self.words.len() + 1
    }

    /// Resolves a token, falling back to UNK.
    pub fn lookup(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| self.unk_id())
    }

    /// Stable 64-bit digest of the ordered word list.
    pub fn fingerprint(&self) -> u64 {
        let mut h = seed::hash_bytes(b"vocab-v1");
        for w in &self.words {
            h = seed::mix64(h ^ seed::hash_bytes(w.as_bytes()));
        }
        h
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| match self.word(i) {
                Some(w) => w.to_owned(),
                None if i == self.pad_id() => PAD_TOKEN.to_owned(),
                None => UNK_TOKEN.to_owned(),
            })
            .collect()
    }
}

/// One parsed dataset line before id resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub label: String,
    pub tokens: Vec<String>,
}

/// Parsed dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCorpus {
    pub name: String,
    pub docs: Vec<RawDocument>,
}

impl RawCorpus {
    /// Parses `label<TAB>token token ...` lines. Blank lines are skipped.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (label, body) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(name, lineno, "expected label<TAB>tokens"))?;
            let label = label.trim();
            if label.is_empty() {
                return Err(Error::parse(name, lineno, "empty label"));
            }
            let tokens: Vec<String> = body.split_whitespace().map(str::to_owned).collect();
            if tokens.is_empty() {
                return Err(Error::parse(name, lineno, "document has no tokens"));
            }
            docs.push(RawDocument {
                label: label.to_owned(),
                tokens,
            });
        }
        Ok(RawCorpus {
            name: name.to_owned(),
            docs,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn token_lists(&self) -> Vec<&[String]> {
        self.docs.iter().map(|d| d.tokens.as_slice()).collect()
    }
}

/// Encoded documents with dense class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub documents: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    /// Original label string of each class id.
    pub label_names: Vec<String>,
}

impl Dataset {
    /// Resolves tokens against `vocab` and maps labels to dense ids.
    ///
    /// If every label parses as a non-negative integer the integer is the
    /// class id (so `1` stays the positive class); otherwise distinct label
    /// strings are numbered in sorted order.
    pub fn encode(raw: &RawCorpus, vocab: &Vocabulary) -> Result<Self> {
        let numeric: Option<Vec<usize>> = raw.docs.iter().map(|d| d.label.parse().ok()).collect();
        let (labels, label_names) = match numeric {
            Some(ids) => {
                let c = ids.iter().copied().max().map_or(0, |m| m + 1);
                (ids, (0..c).map(|i| i.to_string()).collect())
            }
            None => {
                let mut names: Vec<String> = raw.docs.iter().map(|d| d.label.clone()).collect();
                names.sort();
                names.dedup();
                let ids = raw
                    .docs
                    .iter()
                    .map(|d| names.binary_search(&d.label).expect("label collected above"))
                    .collect();
                (ids, names)
            }
        };
        let documents = raw
            .docs
            .iter()
            .map(|d| d.tokens.iter().map(|t| vocab.lookup(t)).collect())
            .collect();
        Ok(Dataset {
            name: raw.name.clone(),
            documents,
            labels,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Sub-dataset holding the given document indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }
}

/// Parses and encodes dataset text in one go.
pub fn encode(name: &str, text: &str, vocab: &Vocabulary) -> Result<Dataset> {
    Dataset::encode(&RawCorpus::parse(name, text)?, vocab)
}

/// Row-major `rows × dim` matrix of finite embedding values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding entry ({}, {})",
                pos / values.ncols(),
                pos % values.ncols()
            )));
        }
        Ok(EmbeddingMatrix { values })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    Text,
    Binary,
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(EmbeddingFormat::Text),
            "binary" | "bin" => Ok(EmbeddingFormat::Binary),
            other => Err(Error::InvalidArgument(format!("unknown embedding format {other:?}"))),
        }
    }
}

/// How rows are filled for vocabulary words absent from an embedding file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OovPolicy {
    /// Independent draws from `U[-scale, scale]`, seeded.
    Uniform { scale: f64, seed: u64 },
    Zeros,
}

impl OovPolicy {
    pub const DEFAULT_SCALE: f64 = 0.25;

    pub fn uniform(seed: u64) -> Self {
        OovPolicy::Uniform {
            scale: Self::DEFAULT_SCALE,
            seed,
        }
    }
}

/// Draws a `rows × dim` matrix from `U[-scale, scale]`.
pub fn random_uniform_matrix(rows: usize, dim: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed);
    Array2::from_shape_simple_fn((rows, dim), || rng.gen_range(-scale..=scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadStats {
    pub file_entries: usize,
    pub found: usize,
    pub oov: usize,
}

/// Reads vectors for `vocab` from an embedding file. Row `i` is the file
/// vector of word `i`; missing words are filled by `oov`. File words not in
/// the vocabulary are ignored, and the first occurrence of a repeated word
/// wins.
pub fn load_pretrained(
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
    vocab: &Vocabulary,
    oov: OovPolicy,
) -> Result<(EmbeddingMatrix, LoadStats)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = match format {
        EmbeddingFormat::Text => parse_text_embeddings(&bytes)?,
        EmbeddingFormat::Binary => parse_binary_embeddings(&bytes)?,
    };
    fill_matrix(entries, vocab, oov)
}

struct ParsedEmbeddings {
    dim: usize,
    entries: Vec<(String, Vec<f32>)>,
}

fn fill_matrix(
    parsed: ParsedEmbeddings,
    vocab: &Vocabulary,
    oov: OovPolicy,
) -> Result<(EmbeddingMatrix, LoadStats)> {
    let d = parsed.dim;
    let mut values = Array2::<f64>::zeros((vocab.len(), d));
    let mut filled = vec![false; vocab.len()];
    let mut stats = LoadStats {
        file_entries: parsed.entries.len(),
        ..Default::default()
    };
    for (word, vec) in &parsed.entries {
        if let Some(i) = vocab.id(word) {
            if filled[i] {
                continue;
            }
            for (dst, &v) in values.row_mut(i).iter_mut().zip(vec) {
                *dst = v as f64;
            }
            filled[i] = true;
            stats.found += 1;
        }
    }
    if let OovPolicy::Uniform { scale, seed } = oov {
        let mut rng = seed::rng(seed);
        for (i, _) in filled.iter().enumerate().filter(|(_, f)| !**f) {
            for v in values.row_mut(i).iter_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
    }
    stats.oov = filled.iter().filter(|f| !**f).count();
    Ok((EmbeddingMatrix::new(values)?, stats))
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut it = line.split_whitespace();
    let (Some(v), Some(d), None) = (it.next(), it.next(), it.next()) else {
        return Err(Error::EmbeddingFormat(format!("bad header {line:?}, expected \"V d\"")));
    };
    let v: usize = v
        .parse()
        .map_err(|_| Error::EmbeddingFormat(format!("bad word count {v:?}")))?;
    let d: usize = d
        .parse()
        .map_err(|_| Error::EmbeddingFormat(format!("bad dimension {d:?}")))?;
    if d == 0 {
        return Err(Error::EmbeddingFormat("dimension must be positive".into()));
    }
    Ok((v, d))
}

fn parse_text_embeddings(bytes: &[u8]) -> Result<ParsedEmbeddings> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::EmbeddingFormat(format!("text embeddings are not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::EmbeddingFormat("empty file".into()))?;
    let (count, dim) = parse_header(header)?;
    let mut entries = Vec::with_capacity(count);
    for (n, line) in lines {
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-blank line has a field").to_owned();
        let vec = fields
            .map(|f| {
                f.parse::<f32>()
                    .map_err(|_| Error::EmbeddingFormat(format!("line {}: bad value {f:?}", n + 1)))
            })
            .collect::<Result<Vec<f32>>>()?;
        if vec.len() != dim {
            return Err(Error::EmbeddingFormat(format!(
                "line {}: {} values for {word:?}, header says {dim}",
                n + 1,
                vec.len()
            )));
        }
        entries.push((word, vec));
    }
    if entries.len() != count {
        return Err(Error::EmbeddingFormat(format!(
            "header announces {count} words, file has {}",
            entries.len()
        )));
    }
    Ok(ParsedEmbeddings { dim, entries })
}

fn parse_binary_embeddings(bytes: &[u8]) -> Result<ParsedEmbeddings> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::EmbeddingFormat("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::EmbeddingFormat("header is not ASCII".into()))?;
    let (count, dim) = parse_header(header)?;
    let mut pos = nl + 1;
    let mut entries = Vec::with_capacity(count);
    for k in 0..count {
        while pos < bytes.len() && bytes[pos] == b'\n' {
            pos += 1;
        }
        let space = bytes[pos..].iter().position(|&b| b == b' ').ok_or_else(|| {
            Error::EmbeddingFormat(format!("payload ends inside entry {k} of {count}"))
        })?;
        let word = std::str::from_utf8(&bytes[pos..pos + space])
            .map_err(|_| Error::EmbeddingFormat(format!("entry {k}: word is not UTF-8")))?
            .to_owned();
        if word.is_empty() {
            return Err(Error::EmbeddingFormat(format!("entry {k}: empty word")));
        }
        pos += space + 1;
        let need = dim * 4;
        if bytes.len() - pos < need {
            return Err(Error::EmbeddingFormat(format!(
                "entry {k} ({word:?}): payload truncated, header dimension {dim}"
            )));
        }
        let mut vec = vec![0f32; dim];
        LittleEndian::read_f32_into(&bytes[pos..pos + need], &mut vec);
        pos += need;
        entries.push((word, vec));
    }
    if bytes[pos..].iter().any(|b| !b.is_ascii_whitespace()) {
        return Err(Error::EmbeddingFormat(format!(
            "trailing data after {count} announced entries"
        )));
    }
    Ok(ParsedEmbeddings { dim, entries })
}

/// Writes one row per vocabulary word. Values are stored as `f32`.
pub fn write_pretrained(
    matrix: &EmbeddingMatrix,
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<()> {
    if vocab.is_empty() {
        return Err(Error::Empty("cannot write an embedding file for V=0".into()));
    }
    if matrix.rows() != vocab.len() {
        return Err(Error::Shape(format!(
            "matrix has {} rows, vocabulary {} words",
            matrix.rows(),
            vocab.len()
        )));
    }
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embeddings(&mut w, matrix, vocab, format).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_embeddings<W: Write>(
    w: &mut W,
    matrix: &EmbeddingMatrix,
    vocab: &Vocabulary,
    format: EmbeddingFormat,
) -> std::io::Result<()> {
    writeln!(w, "{} {}", vocab.len(), matrix.dim())?;
    for (word, row) in vocab.words().iter().zip(matrix.values().rows()) {
        match format {
            EmbeddingFormat::Text => {
                write!(w, "{word}")?;
                for &v in row {
                    write!(w, " {}", v as f32)?;
                }
                writeln!(w)?;
            }
            EmbeddingFormat::Binary => {
                write!(w, "{word} ")?;
                for &v in row {
                    w.write_f32::<LittleEndian>(v as f32)?;
                }
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}
