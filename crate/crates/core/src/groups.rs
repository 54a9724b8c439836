//! Word groups compiled from external resources.
//!
//! Every adapter funnels `(group key, word)` pairs through one builder, so
//! the resulting [`GroupTable`] has the same shape regardless of origin:
//! group ids follow first appearance of their key in the source file, words
//! outside the vocabulary are dropped, and groups left without members are
//! removed before ids are made dense.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingMatrix, Vocabulary};
use crate::{Error, Result};

/// Supported resource layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    /// Canonical `group_key<TAB>word`.
    Tsv,
    /// Brown clustering output: `bitstring<TAB>word<TAB>count`.
    Brown,
    /// `term<TAB>treenum(;treenum)*`.
    Mesh,
    /// SentiWordNet: `POS<TAB>id<TAB>pos<TAB>neg<TAB>term#sense ...<TAB>gloss`.
    Sentilex,
}

impl FromStr for ResourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ResourceKind::Tsv),
            "brown" => Ok(ResourceKind::Brown),
            "mesh" => Ok(ResourceKind::Mesh),
            "sentilex" => Ok(ResourceKind::Sentilex),
            other => Err(Error::InvalidArgument(format!(
                "unknown resource kind {other:?} (expected tsv|brown|mesh|sentilex)"
            ))),
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::Tsv => "tsv",
            ResourceKind::Brown => "brown",
            ResourceKind::Mesh => "mesh",
            ResourceKind::Sentilex => "sentilex",
        })
    }
}

pub const DEFAULT_PREFIX_DEPTH: usize = 3;

/// Bookkeeping collected while compiling a resource.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    /// Data lines read (comments and blanks excluded).
    pub lines: usize,
    /// `(group, word)` pairs offered to the builder.
    pub pairs: usize,
    /// Pairs whose word is outside the vocabulary.
    pub oov_skipped: usize,
    /// Multi-word lexicon terms skipped.
    pub multiword_skipped: usize,
    /// Lexicon synsets excluded as objective.
    pub objective_skipped: usize,
    /// Groups dropped because no member survived filtering.
    pub empty_groups_dropped: usize,
}

/// The word-to-groups map and its inverse. Equality ignores build
/// statistics.
#[derive(Debug, Clone)]
pub struct GroupTable {
    keys: Vec<String>,
    members: Vec<Vec<usize>>,
    membership: Vec<Vec<usize>>,
    stats: BuildStats,
}

impl PartialEq for GroupTable {
    fn eq(&self, other: &Self) -> bool {
        self.keys == other.keys && self.membership == other.membership
    }
}

impl Eq for GroupTable {}

impl GroupTable {
    /// Table over `num_words` words with no groups.
    pub fn empty(num_words: usize) -> Self {
        GroupTable {
            keys: Vec::new(),
            members: Vec::new(),
            membership: vec![Vec::new(); num_words],
            stats: BuildStats::default(),
        }
    }

    /// Builds from explicit member lists. Keys default to `g0, g1, ...`.
    pub fn from_members(num_words: usize, members: Vec<Vec<usize>>) -> Result<Self> {
        let mut b = GroupTableBuilder::new(num_words);
        for (k, ms) in members.iter().enumerate() {
            b.declare(&format!("g{k}"));
            for &w in ms {
                if w >= num_words {
                    return Err(Error::InvalidArgument(format!(
                        "group {k} lists word {w} but there are only {num_words} words"
                    )));
                }
                b.add_id(&format!("g{k}"), w);
            }
        }
        Ok(b.finish())
    }

    /// Every word of the table in its own group.
    pub fn singletons(num_words: usize) -> Self {
        Self::from_members(num_words, (0..num_words).map(|i| vec![i]).collect())
            .expect("ids in range")
    }

    pub fn num_groups(&self) -> usize {
        self.keys.len()
    }

    pub fn num_words(&self) -> usize {
        self.membership.len()
    }

    pub fn key(&self, group: usize) -> &str {
        &self.keys[group]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Word ids of `group`, ascending.
    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    /// Group ids of `word`, ascending. Empty for ids past the table.
    pub fn groups_of(&self, word: usize) -> &[usize] {
        self.membership.get(word).map_or(&[], Vec::as_slice)
    }

    /// Number of groups `word` belongs to.
    pub fn k(&self, word: usize) -> usize {
        self.groups_of(word).len()
    }

    pub fn stats(&self) -> &BuildStats {
        &self.stats
    }

    /// Words belonging to at least one group.
    pub fn covered_words(&self) -> usize {
        self.membership.iter().filter(|g| !g.is_empty()).count()
    }

    /// `hist[k]` = number of words with exactly `k` groups.
    pub fn membership_histogram(&self) -> Vec<usize> {
        let max = self.membership.iter().map(Vec::len).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for g in &self.membership {
            hist[g.len()] += 1;
        }
        hist
    }

    /// Same groups over a table extended to `num_words` (new ids ungrouped).
    pub fn with_num_words(mut self, num_words: usize) -> Result<Self> {
        if num_words < self.membership.len() {
            return Err(Error::Shape(format!(
                "cannot shrink group table from {} to {num_words} words",
                self.membership.len()
            )));
        }
        self.membership.resize(num_words, Vec::new());
        Ok(self)
    }

    /// Writes the canonical `key<TAB>word` form, groups in id order and
    /// members ascending. Reading it back with [`groups_from_tsv`] reproduces
    /// the table.
    pub fn write_tsv<W: Write>(&self, mut w: W, vocab: &Vocabulary) -> std::io::Result<()> {
        for (key, members) in self.keys.iter().zip(&self.members) {
            for &m in members {
                let word = vocab.word(m).expect("member ids are vocabulary ids");
                writeln!(w, "{key}\t{word}")?;
            }
        }
        Ok(())
    }

    /// Checks the mutual consistency of `members` and `membership`.
    pub fn validate(&self) -> Result<()> {
        for (k, ms) in self.members.iter().enumerate() {
            if ms.is_empty() {
                return Err(Error::InvalidArgument(format!("group {k} is empty")));
            }
            if ms.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("group {k} members not strictly ascending")));
            }
            for &i in ms {
                if i >= self.membership.len() || self.membership[i].binary_search(&k).is_err() {
                    return Err(Error::InvalidArgument(format!("word {i} missing group {k}")));
                }
            }
        }
        for (i, gs) in self.membership.iter().enumerate() {
            if gs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("word {i} groups not strictly ascending")));
            }
            for &k in gs {
                if k >= self.members.len() || self.members[k].binary_search(&i).is_err() {
                    return Err(Error::InvalidArgument(format!("group {k} missing word {i}")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(keys: Vec<String>, membership: Vec<Vec<usize>>) -> Result<Self> {
        let mut members = vec![Vec::new(); keys.len()];
        for (i, gs) in membership.iter().enumerate() {
            for &k in gs {
                let list: &mut Vec<usize> = members
                    .get_mut(k)
                    .ok_or_else(|| Error::InvalidArgument(format!("group id {k} out of range")))?;
                list.push(i);
            }
        }
        let table = GroupTable {
            keys,
            members,
            membership,
            stats: BuildStats::default(),
        };
        table.validate()?;
        Ok(table)
    }
}

/// Accumulates `(key, word)` pairs in source order.
#[derive(Debug)]
pub struct GroupTableBuilder {
    num_words: usize,
    key_ids: HashMap<String, usize>,
    keys: Vec<String>,
    members: Vec<Vec<usize>>,
    stats: BuildStats,
}

impl GroupTableBuilder {
    pub fn new(num_words: usize) -> Self {
        GroupTableBuilder {
            num_words,
            key_ids: HashMap::new(),
            keys: Vec::new(),
            members: Vec::new(),
            stats: BuildStats::default(),
        }
    }

    fn declare(&mut self, key: &str) -> usize {
        if let Some(&k) = self.key_ids.get(key) {
            return k;
        }
        let k = self.keys.len();
        self.key_ids.insert(key.to_owned(), k);
        self.keys.push(key.to_owned());
        self.members.push(Vec::new());
        k
    }

    /// Registers `key` (so its first-appearance position is fixed even if it
    /// ends up empty) and adds `word` when it is in the vocabulary.
    pub fn add(&mut self, key: &str, word: &str, vocab: &Vocabulary) {
        let k = self.declare(key);
        self.stats.pairs += 1;
        match vocab.id(word) {
            Some(i) => self.members[k].push(i),
            None => self.stats.oov_skipped += 1,
        }
    }

    fn add_id(&mut self, key: &str, word: usize) {
        let k = self.declare(key);
        self.stats.pairs += 1;
        self.members[k].push(word);
    }

    pub fn finish(mut self) -> GroupTable {
        let mut keys = Vec::new();
        let mut members = Vec::new();
        for (key, mut ms) in self.keys.into_iter().zip(self.members) {
            ms.sort_unstable();
            ms.dedup();
            if ms.is_empty() {
                self.stats.empty_groups_dropped += 1;
            } else {
                keys.push(key);
                members.push(ms);
            }
        }
        let mut membership = vec![Vec::new(); self.num_words];
        for (k, ms) in members.iter().enumerate() {
            for &i in ms {
                membership[i].push(k);
            }
        }
        GroupTable {
            keys,
            members,
            membership,
            stats: self.stats,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Data lines with 1-based numbers; blank lines skipped.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Canonical `group_key<TAB>word` lines.
pub fn groups_from_tsv(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<GroupTable> {
    let path = path.as_ref();
    parse_tsv(&read_text(path)?, path, vocab)
}

pub fn parse_tsv(text: &str, source: &Path, vocab: &Vocabulary) -> Result<GroupTable> {
    let mut b = GroupTableBuilder::new(vocab.len());
    for (n, line) in data_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [key, word] = fields[..] else {
            return Err(Error::parse(source, n, "expected group_key<TAB>word"));
        };
        if key.is_empty() || word.is_empty() {
            return Err(Error::parse(source, n, "empty group key or word"));
        }
        b.stats.lines += 1;
        b.add(key, word, vocab);
    }
    Ok(b.finish())
}

/// Brown clustering `paths` output; each distinct bitstring is a group.
pub fn groups_from_brown(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<GroupTable> {
    let path = path.as_ref();
    parse_brown(&read_text(path)?, path, vocab)
}

pub fn parse_brown(text: &str, source: &Path, vocab: &Vocabulary) -> Result<GroupTable> {
    let mut b = GroupTableBuilder::new(vocab.len());
    for (n, line) in data_lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [bits, word, count] = fields[..] else {
            return Err(Error::parse(source, n, "expected bitstring<TAB>word<TAB>count"));
        };
        if bits.is_empty() || !bits.bytes().all(|c| c == b'0' || c == b'1') {
            return Err(Error::parse(source, n, format!("bad cluster bitstring {bits:?}")));
        }
        if word.is_empty() {
            return Err(Error::parse(source, n, "empty word"));
        }
        count
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(source, n, format!("bad count {count:?}")))?;
        b.stats.lines += 1;
        b.add(bits, word, vocab);
    }
    Ok(b.finish())
}

/// Splits and validates a MeSH tree number such as `C06.552.150.125`.
///
/// The first component is letters followed by digits; the rest are digits.
pub fn parse_tree_number(tree: &str) -> Option<Vec<&str>> {
    let parts: Vec<&str> = tree.split('.').collect();
    let first = parts[0];
    let letters = first.bytes().take_while(u8::is_ascii_alphabetic).count();
    if letters == 0 || letters == first.len() || !first[letters..].bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    if parts[1..]
        .iter()
        .any(|p| p.is_empty() || !p.bytes().all(|c| c.is_ascii_digit()))
    {
        return None;
    }
    Some(parts)
}

/// Group key of a tree number: its first `depth` components, or the whole
/// number when it is shorter.
pub fn tree_prefix(tree: &str, depth: usize) -> Option<String> {
    let parts = parse_tree_number(tree)?;
    Some(parts[..depth.min(parts.len())].join("."))
}

/// MeSH terms grouped by tree-number prefix.
///
/// Terms are matched against the vocabulary verbatim, then with internal
/// whitespace replaced by `_` (how multi-word headings appear in
/// whitespace-tokenized documents).
pub fn groups_from_mesh(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    prefix_depth: usize,
) -> Result<GroupTable> {
    let path = path.as_ref();
    parse_mesh(&read_text(path)?, path, vocab, prefix_depth)
}

pub fn mesh_token(term: &str) -> String {
    term.split_whitespace().collect::<Vec<_>>().join("_")
}

pub fn parse_mesh(
    text: &str,
    source: &Path,
    vocab: &Vocabulary,
    prefix_depth: usize,
) -> Result<GroupTable> {
    if prefix_depth == 0 {
        return Err(Error::InvalidArgument("prefix depth must be at least 1".into()));
    }
    let mut b = GroupTableBuilder::new(vocab.len());
    for (n, line) in data_lines(text) {
        let (term, trees) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source, n, "expected term<TAB>treenum(;treenum)*"))?;
        let term = term.trim();
        if term.is_empty() {
            return Err(Error::parse(source, n, "empty term"));
        }
        let word = if vocab.id(term).is_some() {
            term.to_owned()
        } else {
            mesh_token(term)
        };
        b.stats.lines += 1;
        for tree in trees.split(';').map(str::trim) {
            let key = tree_prefix(tree, prefix_depth)
                .ok_or_else(|| Error::parse(source, n, format!("malformed tree number {tree:?}")))?;
            b.add(&key, &word, vocab);
        }
    }
    Ok(b.finish())
}

/// SentiWordNet synsets with a positive or negative score.
pub fn groups_from_sentiment_lexicon(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<GroupTable> {
    let path = path.as_ref();
    parse_sentiment_lexicon(&read_text(path)?, path, vocab)
}

pub fn parse_sentiment_lexicon(text: &str, source: &Path, vocab: &Vocabulary) -> Result<GroupTable> {
    let mut b = GroupTableBuilder::new(vocab.len());
    for (n, line) in data_lines(text) {
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 5 {
            return Err(Error::parse(
                source,
                n,
                "expected POS<TAB>id<TAB>pos<TAB>neg<TAB>terms[<TAB>gloss]",
            ));
        }
        let score = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(source, n, format!("non-numeric score {s:?}")))
        };
        let (pos, neg) = (score(fields[2])?, score(fields[3])?);
        b.stats.lines += 1;
        if !(pos > 0.0 || neg > 0.0) {
            b.stats.objective_skipped += 1;
            continue;
        }
        let key = format!("{}:{}", fields[0].trim(), fields[1].trim());
        b.declare(&key);
        for term in fields[4].split_whitespace() {
            let lemma = term.rsplit_once('#').map_or(term, |(l, _)| l);
            if lemma.contains('_') {
                b.stats.multiword_skipped += 1;
                continue;
            }
            b.add(&key, lemma, vocab);
        }
    }
    Ok(b.finish())
}

/// Dispatches on `kind`.
pub fn build_groups(
    kind: ResourceKind,
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    prefix_depth: usize,
) -> Result<GroupTable> {
    match kind {
        ResourceKind::Tsv => groups_from_tsv(path, vocab),
        ResourceKind::Brown => groups_from_brown(path, vocab),
        ResourceKind::Mesh => groups_from_mesh(path, vocab, prefix_depth),
        ResourceKind::Sentilex => groups_from_sentiment_lexicon(path, vocab),
    }
}

/// The trainable group vectors `g`, one row per group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEmbeddings {
    pub values: Array2<f64>,
    pub member_counts: Vec<usize>,
}

impl GroupEmbeddings {
    pub fn num_groups(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Row `k` is the mean of the pretrained rows of `members(k)`, summed in
/// ascending member order.
pub fn init_group_embeddings(
    table: &GroupTable,
    pretrained: &EmbeddingMatrix,
) -> Result<GroupEmbeddings> {
    let d = pretrained.dim();
    let mut values = Array2::zeros((table.num_groups(), d));
    let mut member_counts = Vec::with_capacity(table.num_groups());
    for k in 0..table.num_groups() {
        let members = table.members(k);
        if members.is_empty() {
            return Err(Error::Empty(format!("group {} has no members", table.key(k))));
        }
        let mut row = values.row_mut(k);
        for &i in members {
            if i >= pretrained.rows() {
                return Err(Error::Shape(format!(
                    "member {i} of group {} outside the {}-row pretrained matrix",
                    table.key(k),
                    pretrained.rows()
                )));
            }
            row += &pretrained.row(i);
        }
        row /= members.len() as f64;
        member_counts.push(members.len());
    }
    Ok(GroupEmbeddings {
        values,
        member_counts,
    })
}
