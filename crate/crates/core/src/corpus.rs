//! Reference knowledge-graph dumps, the positive training set and definition corpora.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tsv::{clean_field, numbered_lines, Parsed, RowCounts};
use crate::{Error, Result};

/// The twelve relations targeted for extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationId {
    AtLocation,
    CapableOf,
    Causes,
    CreatedBy,
    Desires,
    HasProperty,
    HasSubevent,
    IsA,
    MadeOf,
    PartOf,
    ReceivesAction,
    UsedFor,
}

impl RelationId {
    pub const ALL: [RelationId; 12] = [
        RelationId::AtLocation,
        RelationId::CapableOf,
        RelationId::Causes,
        RelationId::CreatedBy,
        RelationId::Desires,
        RelationId::HasProperty,
        RelationId::HasSubevent,
        RelationId::IsA,
        RelationId::MadeOf,
        RelationId::PartOf,
        RelationId::ReceivesAction,
        RelationId::UsedFor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationId::AtLocation => "AtLocation",
            RelationId::CapableOf => "CapableOf",
            RelationId::Causes => "Causes",
            RelationId::CreatedBy => "CreatedBy",
            RelationId::Desires => "Desires",
            RelationId::HasProperty => "HasProperty",
            RelationId::HasSubevent => "HasSubevent",
            RelationId::IsA => "IsA",
            RelationId::MadeOf => "MadeOf",
            RelationId::PartOf => "PartOf",
            RelationId::ReceivesAction => "ReceivesAction",
            RelationId::UsedFor => "UsedFor",
        }
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationId {
    type Err = Error;

    /// Accepts the bare label or a `/r/Label` URI.
    fn from_str(s: &str) -> Result<Self> {
        let label = s.strip_prefix("/r/").unwrap_or(s);
        RelationId::ALL
            .into_iter()
            .find(|r| r.as_str() == label)
            .ok_or_else(|| Error::UnknownRelation(s.to_string()))
    }
}

/// Identity of a triple independent of provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripleKey {
    pub head: String,
    pub relation: RelationId,
    pub tail: String,
}

impl TripleKey {
    pub fn new(head: impl Into<String>, relation: RelationId, tail: impl Into<String>) -> Self {
        TripleKey {
            head: head.into(),
            relation,
            tail: tail.into(),
        }
    }
}

impl fmt::Display for TripleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: RelationId,
    pub tail: String,
    /// Dump name and line number, plus any row metadata worth keeping.
    pub source: String,
}

impl Triple {
    /// Builds a triple, trimming both concepts. Empty concepts are rejected.
    pub fn new(
        head: &str,
        relation: RelationId,
        tail: &str,
        source: impl Into<String>,
    ) -> Result<Self> {
        let (head, tail) = (head.trim(), tail.trim());
        if head.is_empty() || tail.is_empty() {
            return Err(Error::Invalid("triple concepts must be non-empty".into()));
        }
        Ok(Triple {
            head: head.to_string(),
            relation,
            tail: tail.to_string(),
            source: source.into(),
        })
    }

    pub fn head_normalized(&self) -> String {
        self.head.to_lowercase()
    }

    pub fn tail_normalized(&self) -> String {
        self.tail.to_lowercase()
    }

    pub fn key(&self) -> TripleKey {
        TripleKey::new(self.head.clone(), self.relation, self.tail.clone())
    }
}

/// Which assertions of a knowledge-graph dump to keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KgFilter {
    pub language: String,
    /// When set, the metadata column must contain this substring.
    pub metadata_contains: Option<String>,
}

impl KgFilter {
    pub fn language(language: impl Into<String>) -> Self {
        KgFilter {
            language: language.into(),
            metadata_contains: None,
        }
    }
}

/// Splits `/c/<lang>/<text>[/...]` into language and surface text.
fn decode_concept_uri(uri: &str) -> Option<(&str, String)> {
    let mut parts = uri.split('/');
    if parts.next() != Some("") || parts.next() != Some("c") {
        return None;
    }
    let lang = parts.next().filter(|l| !l.is_empty())?;
    let text = parts.next().filter(|t| !t.is_empty())?;
    Some((lang, text.replace('_', " ")))
}

/// Parses a ConceptNet-style assertion dump.
///
/// Rows are `uri<TAB>relation<TAB>start<TAB>end<TAB>metadata`. Rows in another
/// language, with a relation outside [`RelationId`], or otherwise malformed are
/// counted as skipped.
pub fn parse_kg_dump<R: Read>(
    reader: R,
    filter: &KgFilter,
    dump_name: &str,
) -> Result<Parsed<Triple>> {
    let mut out = Parsed::default();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        match parse_kg_row(&line, filter, dump_name, line_no) {
            Some(t) => {
                out.items.push(t);
                out.counts.parsed += 1;
            }
            None => out.counts.skipped += 1,
        }
    }
    if out.items.is_empty() {
        log::warn!(
            "{dump_name}: no triples parsed ({} rows skipped)",
            out.counts.skipped
        );
    }
    Ok(out)
}

fn parse_kg_row(line: &str, filter: &KgFilter, dump_name: &str, line_no: usize) -> Option<Triple> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 4 {
        return None;
    }
    let relation = RelationId::from_str(cols[1]).ok()?;
    let (head_lang, head) = decode_concept_uri(cols[2])?;
    let (tail_lang, tail) = decode_concept_uri(cols[3])?;
    if head_lang != filter.language || tail_lang != filter.language {
        return None;
    }
    if let Some(needle) = &filter.metadata_contains {
        if !cols.get(4).is_some_and(|m| m.contains(needle.as_str())) {
            return None;
        }
    }
    Triple::new(&head, relation, &tail, format!("{dump_name}:{line_no}")).ok()
}

/// Loads the positive training set, rows `relation<TAB>head<TAB>tail<TAB>confidence`.
pub fn load_training_triples<R: Read>(reader: R, dump_name: &str) -> Result<Parsed<Triple>> {
    let mut out = Parsed::default();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').collect();
        let triple = (cols.len() == 4)
            .then(|| RelationId::from_str(cols[0]).ok())
            .flatten()
            .and_then(|rel| {
                let source = format!("{dump_name}:{line_no};confidence={}", cols[3].trim());
                Triple::new(cols[1], rel, cols[2], source).ok()
            });
        match triple {
            Some(t) => {
                out.items.push(t);
                out.counts.parsed += 1;
            }
            None => out.counts.skipped += 1,
        }
    }
    Ok(out)
}

/// Writes triples as `relation<TAB>head<TAB>tail<TAB>source`.
pub fn write_triples<W: Write>(mut w: W, triples: &[Triple]) -> Result<()> {
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            t.relation,
            clean_field(&t.head),
            clean_field(&t.tail),
            clean_field(&t.source)
        )?;
    }
    Ok(())
}

/// Reads the canonical triple TSV written by [`write_triples`]. Strict: any bad row is an error.
pub fn read_triples<R: Read>(reader: R) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(
                line_no,
                format!("expected 4 columns, found {}", cols.len()),
            ));
        }
        let rel =
            RelationId::from_str(cols[0]).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let t = Triple::new(cols[1], rel, cols[2], cols[3])
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

const MORPHOLOGY_MARKERS: [&str; 4] = [
    "plural of",
    "alternative form of",
    "alternative spelling of",
    "misspelling of",
];

/// True when a gloss only points at another form of the word.
pub fn is_morphological(definition_text: &str) -> bool {
    let lower = definition_text.to_lowercase();
    MORPHOLOGY_MARKERS.iter().any(|m| lower.contains(m))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermDefinition {
    pub term: String,
    pub sense_index: usize,
    pub definition_text: String,
    pub source_id: String,
}

impl TermDefinition {
    pub fn new(term: &str, sense_index: usize, definition_text: &str) -> Self {
        TermDefinition {
            term: term.to_string(),
            sense_index,
            definition_text: definition_text.to_string(),
            source_id: format!("{term}#{sense_index}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefinitionFormat {
    /// One JSON object per line with `term`, optional `pos`, and `gloss`.
    JsonLines,
    /// `term<TAB>pos<TAB>gloss`.
    Tsv,
}

impl DefinitionFormat {
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => DefinitionFormat::Tsv,
            _ => DefinitionFormat::JsonLines,
        }
    }
}

/// Why definition records were dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionStats {
    pub records: usize,
    pub malformed: usize,
    pub morphological: usize,
    pub outside_whitelist: usize,
    pub duplicates: usize,
    pub retained: usize,
}

impl DefinitionStats {
    pub fn counts(&self) -> RowCounts {
        RowCounts {
            parsed: self.retained,
            skipped: self.records - self.retained,
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    term: Option<String>,
    gloss: Option<String>,
}

/// Loads definition records, dropping morphological glosses, terms outside the
/// whitelist (compared lowercased) and repeated `(term, gloss)` pairs.
pub fn load_definitions<R: Read>(
    reader: R,
    format: DefinitionFormat,
    whitelist: Option<&HashSet<String>>,
) -> Result<(Vec<TermDefinition>, DefinitionStats)> {
    let mut stats = DefinitionStats::default();
    let mut out = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut next_sense: BTreeMap<String, usize> = BTreeMap::new();

    for (_, line) in numbered_lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.records += 1;
        let record = match format {
            DefinitionFormat::JsonLines => serde_json::from_str::<JsonRecord>(&line)
                .ok()
                .and_then(|r| Some((r.term?, r.gloss?))),
            DefinitionFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                (cols.len() == 3).then(|| (cols[0].to_string(), cols[2].to_string()))
            }
        };
        let Some((term, gloss)) = record
            .map(|(t, g)| (t.trim().to_string(), g.trim().to_string()))
            .filter(|(t, g)| !t.is_empty() && !g.is_empty())
        else {
            stats.malformed += 1;
            continue;
        };
        if let Some(wl) = whitelist {
            if !wl.contains(&term.to_lowercase()) {
                stats.outside_whitelist += 1;
                continue;
            }
        }
        if is_morphological(&gloss) {
            stats.morphological += 1;
            continue;
        }
        if !seen.insert((term.clone(), gloss.clone())) {
            stats.duplicates += 1;
            continue;
        }
        let sense = next_sense.entry(term.clone()).or_insert(0);
        out.push(TermDefinition::new(&term, *sense, &gloss));
        *sense += 1;
        stats.retained += 1;
    }
    Ok((out, stats))
}

/// Writes `term<TAB>sense_index<TAB>gloss`.
pub fn write_definitions<W: Write>(mut w: W, defs: &[TermDefinition]) -> Result<()> {
    for d in defs {
        writeln!(
            w,
            "{}\t{}\t{}",
            clean_field(&d.term),
            d.sense_index,
            clean_field(&d.definition_text)
        )?;
    }
    Ok(())
}

pub fn read_definitions<R: Read>(reader: R) -> Result<Vec<TermDefinition>> {
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(3, '\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                line_no,
                "expected term, sense_index and gloss",
            ));
        }
        let sense = cols[1]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad sense index `{}`", cols[1])))?;
        out.push(TermDefinition::new(cols[0], sense, cols[2]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BARTENDER: &str =
        "One who tends a bar or pub; a person preparing and serving drinks at a bar";

    fn kg(rows: &str) -> Parsed<Triple> {
        parse_kg_dump(rows.as_bytes(), &KgFilter::language("en"), "cn").unwrap()
    }

    #[test]
    fn kg_row_decodes_concepts() {
        let p = kg("/a/[x]\t/r/AtLocation\t/c/en/bartender\t/c/en/bar/n\t{}\n");
        assert_eq!(p.items.len(), 1);
        let t = &p.items[0];
        assert_eq!(
            (t.head.as_str(), t.relation, t.tail.as_str()),
            ("bartender", RelationId::AtLocation, "bar")
        );
        assert_eq!(t.source, "cn:1");
    }

    #[test]
    fn kg_language_and_relation_filters() {
        let p = kg(concat!(
            "/a/1\t/r/IsA\t/c/fr/barman\t/c/en/person\t{}\n",
            "/a/2\t/r/RelatedTo\t/c/en/bar\t/c/en/pub\t{}\n",
            "garbage\n",
            "/a/3\t/r/UsedFor\t/c/en/tea_pot\t/c/en/make_tea\t{}\n",
        ));
        assert_eq!(p.items.len(), 1);
        assert_eq!(p.items[0].head, "tea pot");
        assert_eq!(p.items[0].tail, "make tea");
        assert_eq!(
            p.counts,
            RowCounts {
                parsed: 1,
                skipped: 3
            }
        );
    }

    #[test]
    fn kg_metadata_filter() {
        let rows = concat!(
            "/a/1\t/r/IsA\t/c/en/dog\t/c/en/animal\t{\"dataset\": \"/d/conceptnet/4/en\"}\n",
            "/a/2\t/r/IsA\t/c/en/cat\t/c/en/animal\t{\"dataset\": \"/d/wiktionary/en\"}\n",
        );
        let filter = KgFilter {
            language: "en".into(),
            metadata_contains: Some("/d/conceptnet/4".into()),
        };
        let p = parse_kg_dump(rows.as_bytes(), &filter, "cn").unwrap();
        assert_eq!(p.items.len(), 1);
        assert_eq!(p.items[0].head, "dog");
    }

    #[test]
    fn empty_dump_is_not_fatal() {
        assert!(kg("").items.is_empty());
    }

    #[test]
    fn training_rows() {
        let p = load_training_triples(
            "CapableOf\tbartender\tmix drink\t1\nNotIsA\ta\tb\t1\nIsA\tonly three\n".as_bytes(),
            "train",
        )
        .unwrap();
        assert_eq!(p.items.len(), 1);
        let t = &p.items[0];
        assert_eq!(
            (t.head.as_str(), t.relation, t.tail.as_str()),
            ("bartender", RelationId::CapableOf, "mix drink")
        );
        assert!(t.source.ends_with("confidence=1"));
        assert_eq!(p.counts.skipped, 2);
        assert!(load_training_triples(&b""[..], "train")
            .unwrap()
            .items
            .is_empty());
    }

    #[test]
    fn relation_parse_error_keeps_label() {
        match "NotIsA".parse::<RelationId>() {
            Err(Error::UnknownRelation(s)) => assert_eq!(s, "NotIsA"),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            "/r/PartOf".parse::<RelationId>().unwrap(),
            RelationId::PartOf
        );
    }

    #[test]
    fn morphology_markers() {
        assert!(is_morphological("plural of dog"));
        assert!(is_morphological("Alternative spelling of colour"));
        assert!(!is_morphological(BARTENDER));
        assert!(!is_morphological(""));
    }

    #[test]
    fn definitions_filtering() {
        let input = format!(
            "{}\n{}\n{}\n{}\n{}\n",
            serde_json::json!({"term": "bartender", "pos": "noun", "gloss": BARTENDER}),
            serde_json::json!({"term": "dogs", "gloss": "plural of dog"}),
            serde_json::json!({"term": "quark", "gloss": "A subatomic particle."}),
            serde_json::json!({"term": "bartender", "gloss": BARTENDER}),
            serde_json::json!({"gloss": "no term"}),
        );
        let wl: HashSet<String> = ["bartender".to_string(), "dogs".to_string()].into();
        let (defs, stats) =
            load_definitions(input.as_bytes(), DefinitionFormat::JsonLines, Some(&wl)).unwrap();
        assert_eq!(defs, vec![TermDefinition::new("bartender", 0, BARTENDER)]);
        assert_eq!(defs[0].source_id, "bartender#0");
        assert_eq!(stats.morphological, 1);
        assert_eq!(stats.outside_whitelist, 1);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(stats.malformed, 1);
        assert_eq!(stats.counts().total(), 5);
    }

    #[test]
    fn definitions_tsv_assigns_senses_in_order() {
        let input = "bar\tnoun\tA counter.\nbar\tnoun\tA pub.\npub\tnoun\tA tavern.\n";
        let (defs, _) = load_definitions(input.as_bytes(), DefinitionFormat::Tsv, None).unwrap();
        let senses: Vec<_> = defs
            .iter()
            .map(|d| (d.term.as_str(), d.sense_index))
            .collect();
        assert_eq!(senses, vec![("bar", 0), ("bar", 1), ("pub", 0)]);

        let mut buf = Vec::new();
        write_definitions(&mut buf, &defs).unwrap();
        assert_eq!(read_definitions(buf.as_slice()).unwrap(), defs);
    }
}
