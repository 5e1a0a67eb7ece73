//! Per-relation part-of-speech patterns mined from reference concepts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{RelationId, Triple};
use crate::tagging::{Tagger, Upos};
use crate::tsv::numbered_lines;
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 15;
pub const DEFAULT_MAX_PATTERN_LEN: usize = 8;

/// A non-empty sequence of tags, serialised as `VERB,CCONJ,VERB,NOUN`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PosPattern {
    tags: Vec<Upos>,
    canonical: String,
}

impl PosPattern {
    pub fn new(tags: Vec<Upos>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::Invalid("a pattern needs at least one tag".into()));
        }
        let canonical = tags
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(",");
        Ok(PosPattern { tags, canonical })
    }

    pub fn tags(&self) -> &[Upos] {
        &self.tags
    }

    pub fn canonical_form(&self) -> &str {
        &self.canonical
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for PosPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

impl FromStr for PosPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tags = s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<Vec<Upos>>>()?;
        PosPattern::new(tags)
    }
}

impl TryFrom<String> for PosPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PosPattern> for String {
    fn from(p: PosPattern) -> String {
        p.canonical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    #[default]
    Tail,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Side::Head),
            "tail" => Ok(Side::Tail),
            other => Err(Error::Invalid(format!(
                "side must be `head` or `tail`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternEntry {
    pub pattern: PosPattern,
    pub frequency: u64,
}

/// Pattern frequencies per relation, kept in canonical order: frequency
/// descending, then canonical form ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternTable {
    pub side: Side,
    /// `Some(k)` once [`select_top_k`] has been applied.
    pub k: Option<usize>,
    entries: BTreeMap<RelationId, Vec<PatternEntry>>,
}

impl PatternTable {
    pub fn empty(side: Side) -> Self {
        PatternTable {
            side,
            k: None,
            entries: RelationId::ALL
                .into_iter()
                .map(|r| (r, Vec::new()))
                .collect(),
        }
    }

    /// Builds a table from raw counts, sorting each relation canonically.
    pub fn from_counts(side: Side, counts: HashMap<RelationId, HashMap<PosPattern, u64>>) -> Self {
        let mut table = Self::empty(side);
        for (rel, pats) in counts {
            let list = table.entries.entry(rel).or_default();
            list.extend(
                pats.into_iter()
                    .map(|(pattern, frequency)| PatternEntry { pattern, frequency }),
            );
            sort_canonical(list);
        }
        table
    }

    pub fn patterns(&self, relation: RelationId) -> &[PatternEntry] {
        self.entries
            .get(&relation)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (RelationId, &[PatternEntry])> {
        self.entries.iter().map(|(r, v)| (*r, v.as_slice()))
    }

    /// Keeps only the listed relations (others become empty).
    pub fn restrict(&mut self, relations: &[RelationId]) {
        for (rel, list) in self.entries.iter_mut() {
            if !relations.contains(rel) {
                list.clear();
            }
        }
    }

    pub fn total_frequency(&self, relation: RelationId) -> u64 {
        self.patterns(relation).iter().map(|e| e.frequency).sum()
    }
}

fn sort_canonical(list: &mut [PatternEntry]) {
    list.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then_with(|| a.pattern.canonical_form().cmp(b.pattern.canonical_form()))
    });
}

/// Tags the chosen slot of every triple and counts its tag sequence as one
/// observation for the triple's relation. Punctuation tokens are dropped, and
/// sequences longer than `max_len` are discarded.
pub fn mine_patterns<T: Tagger + ?Sized>(
    triples: &[Triple],
    tagger: &T,
    side: Side,
    max_len: usize,
) -> PatternTable {
    let mut counts: HashMap<RelationId, HashMap<PosPattern, u64>> = HashMap::new();
    for t in triples {
        let phrase = match side {
            Side::Head => &t.head,
            Side::Tail => &t.tail,
        };
        let tags: Vec<Upos> = tagger
            .tag(phrase)
            .into_iter()
            .map(|tok| tok.tag)
            .filter(|tag| *tag != Upos::Punct)
            .collect();
        if tags.is_empty() || tags.len() > max_len {
            continue;
        }
        let pattern = PosPattern::new(tags).expect("non-empty");
        *counts
            .entry(t.relation)
            .or_default()
            .entry(pattern)
            .or_insert(0) += 1;
    }
    PatternTable::from_counts(side, counts)
}

/// Keeps the first `k` patterns of every relation.
pub fn select_top_k(table: &PatternTable, k: usize) -> PatternTable {
    let mut out = table.clone();
    for list in out.entries.values_mut() {
        list.truncate(k);
    }
    out.k = Some(k);
    out
}

/// Writes `relation<TAB>canonical_form<TAB>frequency` rows in canonical order.
pub fn write_table<W: Write>(mut w: W, table: &PatternTable) -> Result<()> {
    for (rel, list) in table.iter() {
        for e in list {
            writeln!(w, "{rel}\t{}\t{}", e.pattern, e.frequency)?;
        }
    }
    Ok(())
}

pub fn read_table<R: Read>(reader: R, side: Side) -> Result<PatternTable> {
    let mut counts: HashMap<RelationId, HashMap<PosPattern, u64>> = HashMap::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                line_no,
                "expected relation, pattern and frequency",
            ));
        }
        let wrap = |e: Error| Error::parse(line_no, e.to_string());
        let rel: RelationId = cols[0].parse().map_err(wrap)?;
        let pattern: PosPattern = cols[1].parse().map_err(wrap)?;
        let freq: u64 = cols[2]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad frequency `{}`", cols[2])))?;
        *counts.entry(rel).or_default().entry(pattern).or_insert(0) += freq;
    }
    Ok(PatternTable::from_counts(side, counts))
}
