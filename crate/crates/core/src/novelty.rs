//! Novelty of candidate triples against reference triple sets.
//!
//! Concepts are compared as bags of stems: lowercase, tokenize, drop
//! stopwords, lemmatize, then Porter-stem. A candidate is novel when no
//! reference triple has equal head and tail bags (and, by default, the same
//! relation).

use std::collections::{HashMap, HashSet};
use std::io::Read;

use serde::Serialize;

use crate::corpus::{RelationId, Triple, TripleKey};
use crate::embedding::WordEmbeddings;
use crate::tsv::numbered_lines;
use crate::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Sorted multiset of stems.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize)]
pub struct ConceptBag(Vec<String>);

impl ConceptBag {
    pub fn from_stems(mut stems: Vec<String>) -> Self {
        stems.sort_unstable();
        ConceptBag(stems)
    }

    pub fn stems(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stems joined by single spaces.
    pub fn to_text(&self) -> String {
        self.0.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizationPipeline {
    stopwords: HashSet<String>,
    lemmas: HashMap<String, String>,
}

impl Default for NormalizationPipeline {
    fn default() -> Self {
        NormalizationPipeline::new(
            DEFAULT_STOPWORDS.lines().map(str::to_string),
            HashMap::new(),
        )
    }
}

/// Porter stemming applied until the stem stops changing.
pub fn stem(word: &str) -> String {
    let mut current = word.to_string();
    loop {
        let next = porter_stemmer::stem(&current);
        if next == current || next.is_empty() {
            return current;
        }
        current = next;
    }
}

impl NormalizationPipeline {
    pub fn new<I: IntoIterator<Item = String>>(
        stopwords: I,
        lemmas: HashMap<String, String>,
    ) -> Self {
        NormalizationPipeline {
            stopwords: stopwords
                .into_iter()
                .map(|w| w.trim().to_lowercase())
                .filter(|w| !w.is_empty())
                .collect(),
            lemmas: lemmas
                .into_iter()
                .map(|(w, l)| (w.to_lowercase(), l.to_lowercase()))
                .collect(),
        }
    }

    /// Stopword file: one word per line. Lemma file: `word<TAB>lemma`.
    pub fn from_readers<R1: Read, R2: Read>(stopwords: R1, lemmas: Option<R2>) -> Result<Self> {
        let mut words = Vec::new();
        for (_, line) in numbered_lines(stopwords) {
            words.push(line?);
        }
        let mut lemma_map = HashMap::new();
        if let Some(r) = lemmas {
            for (line_no, line) in numbered_lines(r) {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let (w, l) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(line_no, "expected `word<TAB>lemma`"))?;
                lemma_map.insert(w.trim().to_string(), l.trim().to_string());
            }
        }
        Ok(Self::new(words, lemma_map))
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(word)
    }

    pub fn normalize(&self, text: &str) -> ConceptBag {
        let lower = text.to_lowercase();
        let stems = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty() && !self.stopwords.contains(*w))
            .map(|w| {
                let lemma = self.lemmas.get(w).map(String::as_str).unwrap_or(w);
                stem(lemma)
            })
            .collect();
        ConceptBag::from_stems(stems)
    }
}

pub fn normalize_concept(text: &str, pipeline: &NormalizationPipeline) -> ConceptBag {
    pipeline.normalize(text)
}

type RelationKey = (RelationId, ConceptBag, ConceptBag);
type PairKey = (ConceptBag, ConceptBag);

/// Exact-match index over normalized reference triples.
#[derive(Debug, Clone, Default)]
pub struct ReferenceIndex {
    by_relation: HashMap<RelationKey, TripleKey>,
    by_pair: HashMap<PairKey, TripleKey>,
}

impl ReferenceIndex {
    pub fn len(&self) -> usize {
        self.by_relation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_relation.is_empty()
    }

    pub fn insert(&mut self, triple: &Triple, pipeline: &NormalizationPipeline) {
        let head = pipeline.normalize(&triple.head);
        let tail = pipeline.normalize(&triple.tail);
        self.by_pair
            .entry((head.clone(), tail.clone()))
            .or_insert_with(|| triple.key());
        self.by_relation
            .entry((triple.relation, head, tail))
            .or_insert_with(|| triple.key());
    }
}

pub fn build_reference_index(
    references: &[Triple],
    pipeline: &NormalizationPipeline,
) -> ReferenceIndex {
    let mut index = ReferenceIndex::default();
    for t in references {
        index.insert(t, pipeline);
    }
    index
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NoveltyVerdict {
    pub novel: bool,
    pub matched_reference: Option<TripleKey>,
}

pub fn is_novel(
    candidate: &TripleKey,
    index: &ReferenceIndex,
    pipeline: &NormalizationPipeline,
    relation_agnostic: bool,
) -> NoveltyVerdict {
    let head = pipeline.normalize(&candidate.head);
    let tail = pipeline.normalize(&candidate.tail);
    let witness = if relation_agnostic {
        index.by_pair.get(&(head, tail))
    } else {
        index.by_relation.get(&(candidate.relation, head, tail))
    };
    NoveltyVerdict {
        novel: witness.is_none(),
        matched_reference: witness.cloned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoveltyRate {
    pub novel: usize,
    pub total: usize,
    pub rate: f64,
}

/// Fraction of novel candidates; an empty candidate set counts as fully novel.
pub fn novelty_rate(
    candidates: &[TripleKey],
    index: &ReferenceIndex,
    pipeline: &NormalizationPipeline,
    relation_agnostic: bool,
) -> NoveltyRate {
    let novel = candidates
        .iter()
        .filter(|c| is_novel(c, index, pipeline, relation_agnostic).novel)
        .count();
    rate_of(novel, candidates.len())
}

pub(crate) fn rate_of(novel: usize, total: usize) -> NoveltyRate {
    if total == 0 {
        log::warn!("novelty rate over zero candidates, reporting 1");
        return NoveltyRate {
            novel: 0,
            total: 0,
            rate: 1.0,
        };
    }
    NoveltyRate {
        novel,
        total,
        rate: novel as f64 / total as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingDistance {
    pub distance: f64,
    pub nearest: TripleKey,
    /// Some concept involved had no known word and fell back to the zero vector.
    pub zero_vector_used: bool,
}

/// Smallest `‖head_c − head_r‖ + ‖tail_c − tail_r‖` over the references, using
/// averaged word vectors. Diagnostic only.
pub fn embedding_novelty_distance(
    candidate: &TripleKey,
    references: &[TripleKey],
    embeddings: &WordEmbeddings,
) -> Result<EmbeddingDistance> {
    if references.is_empty() {
        return Err(Error::Invalid(
            "embedding distance needs at least one reference".into(),
        ));
    }
    let ch = embeddings.average(&candidate.head);
    let ct = embeddings.average(&candidate.tail);
    let mut zero = ch.all_oov() || ct.all_oov();
    let mut best: Option<(f64, &TripleKey)> = None;
    for r in references {
        let rh = embeddings.average(&r.head);
        let rt = embeddings.average(&r.tail);
        zero |= rh.all_oov() || rt.all_oov();
        let d = euclidean(&ch.vector, &rh.vector) + euclidean(&ct.vector, &rt.vector);
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, r));
        }
    }
    let (distance, nearest) = best.expect("non-empty references");
    Ok(EmbeddingDistance {
        distance,
        nearest: nearest.clone(),
        zero_vector_used: zero,
    })
}

fn euclidean(a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>) -> f64 {
    (a - b).mapv(|x| x * x).sum().sqrt()
}
