#![allow(dead_code)]

use grouptie::corpus::{Dataset, RawCorpus, RawDocument, VocabOrder, Vocabulary};
use grouptie::groups::{GroupTable, GroupTableBuilder};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shape of a synthetic synonym-set corpus.
#[derive(Debug, Clone, Copy)]
pub struct SynonymCorpusSpec {
    pub docs: usize,
    pub sets: usize,
    pub set_size: usize,
    pub fillers: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub cues_per_doc: usize,
    pub label_noise: f64,
}

impl Default for SynonymCorpusSpec {
    fn default() -> Self {
        SynonymCorpusSpec {
            docs: 2000,
            sets: 40,
            set_size: 15,
            fillers: 300,
            min_len: 8,
            max_len: 15,
            cues_per_doc: 1,
            label_noise: 0.3,
        }
    }
}

pub struct SynonymCorpus {
    pub raw: RawCorpus,
    pub vocab: Vocabulary,
    pub dataset: Dataset,
    pub groups: GroupTable,
}

/// Documents whose label is set by the polarity of the synonym sets their
/// cue words come from. Even sets are positive, odd sets negative. Words
/// inside a set follow a Zipf law, so many members are rare.
pub fn synonym_corpus(spec: SynonymCorpusSpec, seed: u64) -> SynonymCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = WeightedIndex::new((0..spec.set_size).map(|r| 1.0 / (r + 1) as f64)).unwrap();
    let mut docs = Vec::with_capacity(spec.docs);
    for _ in 0..spec.docs {
        let y: usize = rng.gen_range(0..2);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut tokens: Vec<String> = (0..len - spec.cues_per_doc)
            .map(|_| format!("f{}", rng.gen_range(0..spec.fillers)))
            .collect();
        for _ in 0..spec.cues_per_doc {
            let set = 2 * rng.gen_range(0..spec.sets / 2) + (1 - y);
            tokens.push(format!("s{set}_{}", zipf.sample(&mut rng)));
        }
        tokens.shuffle(&mut rng);
        let label = if rng.gen_bool(spec.label_noise) { 1 - y } else { y };
        docs.push(RawDocument {
            label: label.to_string(),
            tokens,
        });
    }
    let raw = RawCorpus {
        name: "synthetic".into(),
        docs,
    };
    let vocab = Vocabulary::build(&raw.token_lists(), VocabOrder::FirstOccurrence).unwrap();
    let dataset = Dataset::encode(&raw, &vocab).unwrap();
    let mut b = GroupTableBuilder::new(vocab.len());
    for s in 0..spec.sets {
        for r in 0..spec.set_size {
            b.add(&format!("set{s}"), &format!("s{s}_{r}"), &vocab);
        }
    }
    SynonymCorpus {
        raw,
        vocab,
        dataset,
        groups: b.finish(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Noisy stand-in for pretrained vectors: members of synonym set `s` get
/// `center_s + noise · U[-0.25, 0.25]^d`, every other word a plain uniform
/// draw from `U[-0.25, 0.25]^d`.
pub fn clustered_vectors(vocab: &Vocabulary, dim: usize, noise: f64, seed: u64) -> grouptie::corpus::EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    let mut values = ndarray::Array2::zeros((vocab.len(), dim));
    for (i, w) in vocab.words().iter().enumerate() {
        let set = w
            .strip_prefix('s')
            .and_then(|r| r.split_once('_'))
            .and_then(|(s, _)| s.parse::<usize>().ok());
        let center = match set {
            Some(s) => centers
                .entry(s)
                .or_insert_with(|| (0..dim).map(|_| rng.gen_range(-0.25..0.25)).collect())
                .clone(),
            None => vec![0.0; dim],
        };
        let scale = if set.is_some() { noise } else { 1.0 };
        for j in 0..dim {
            values[[i, j]] = center[j] + scale * rng.gen_range(-0.25..0.25);
        }
    }
    grouptie::corpus::EmbeddingMatrix::new(values).unwrap()
}
