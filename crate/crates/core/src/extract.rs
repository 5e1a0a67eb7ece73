//! Candidate triples from pattern matches over tagged definition text.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{RelationId, TermDefinition, TripleKey};
use crate::patterns::{PatternTable, PosPattern};
use crate::tagging::{TaggedToken, Upos};
use crate::tsv::{clean_field, numbered_lines};
use crate::{Error, Result};

/// Half-open token range `[start, end)`.
pub type TokenSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTriple {
    pub head: String,
    pub relation: RelationId,
    pub tail: String,
    pub term: String,
    pub sense_index: usize,
    pub pattern: PosPattern,
    pub span: TokenSpan,
}

impl CandidateTriple {
    pub fn key(&self) -> TripleKey {
        TripleKey::new(self.head.clone(), self.relation, self.tail.clone())
    }

    pub fn source_id(&self) -> String {
        format!("{}#{}", self.term, self.sense_index)
    }
}

/// Every window of `tokens` whose tags equal the pattern, left to right,
/// overlaps included.
pub fn match_spans(tokens: &[TaggedToken], pattern: &PosPattern) -> Vec<TokenSpan> {
    let want = pattern.tags();
    if want.len() > tokens.len() {
        return Vec::new();
    }
    tokens
        .windows(want.len())
        .enumerate()
        .filter(|(_, w)| w.iter().zip(want).all(|(tok, tag)| tok.tag == *tag))
        .map(|(i, _)| (i, i + want.len()))
        .collect()
}

pub fn span_text(tokens: &[TaggedToken], span: TokenSpan) -> String {
    tokens[span.0..span.1]
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-relation candidates, each list in extraction order.
pub type Candidates = BTreeMap<RelationId, Vec<CandidateTriple>>;

/// Matches every selected pattern against every definition.
///
/// For each relation, definitions are visited in order, then patterns in table
/// order, then spans left to right. Self-loops (tail equal to the term,
/// ignoring case) are dropped, and the first occurrence of each
/// `(head, tail)` pair is kept, compared lowercased.
pub fn extract_candidates(
    definitions: &[TermDefinition],
    tagged: &BTreeMap<String, Vec<TaggedToken>>,
    patterns: &PatternTable,
) -> Result<Candidates> {
    let token_seqs = definitions
        .iter()
        .map(|d| {
            tagged
                .get(&d.source_id)
                .ok_or_else(|| Error::MissingTokens(d.source_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Candidates::new();
    for (relation, entries) in patterns.iter() {
        if entries.is_empty() {
            continue;
        }
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let list = out.entry(relation).or_default();
        for (def, tokens) in definitions.iter().zip(&token_seqs) {
            let head_lower = def.term.to_lowercase();
            for entry in entries {
                // Patterns never contain PUNCT, so spans never cover punctuation.
                debug_assert!(!entry.pattern.tags().contains(&Upos::Punct));
                for span in match_spans(tokens, &entry.pattern) {
                    let tail = span_text(tokens, span);
                    let tail_lower = tail.to_lowercase();
                    if tail_lower == head_lower || !seen.insert((head_lower.clone(), tail_lower)) {
                        continue;
                    }
                    list.push(CandidateTriple {
                        head: def.term.clone(),
                        relation,
                        tail,
                        term: def.term.clone(),
                        sense_index: def.sense_index,
                        pattern: entry.pattern.clone(),
                        span,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn write_candidates_jsonl<W: Write>(mut w: W, candidates: &Candidates) -> Result<()> {
    for c in candidates.values().flatten() {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_candidates_jsonl<R: Read>(reader: R) -> Result<Candidates> {
    let mut out = Candidates::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CandidateTriple =
            serde_json::from_str(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        out.entry(c.relation).or_default().push(c);
    }
    Ok(out)
}

/// Three-column `head<TAB>relation<TAB>tail` file for external scorers.
pub fn write_candidates_tsv<W: Write>(mut w: W, candidates: &Candidates) -> Result<()> {
    for c in candidates.values().flatten() {
        writeln!(
            w,
            "{}\t{}\t{}",
            clean_field(&c.head),
            c.relation,
            clean_field(&c.tail)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::Side;
    use crate::tagging::{TagLexicon, Tagger};
    use std::collections::HashMap;

    const BARTENDER: &str =
        "One who tends a bar or pub; a person preparing and serving drinks at a bar";

    fn toks(tags: &[Upos]) -> Vec<TaggedToken> {
        tags.iter()
            .enumerate()
            .map(|(i, t)| TaggedToken::new(format!("w{i}"), *t))
            .collect()
    }

    fn table(rows: &[(RelationId, &str)]) -> PatternTable {
        let mut counts: HashMap<RelationId, HashMap<PosPattern, u64>> = HashMap::new();
        for (i, (rel, p)) in rows.iter().enumerate() {
            counts
                .entry(*rel)
                .or_default()
                .insert(p.parse().unwrap(), 100 - i as u64);
        }
        PatternTable::from_counts(Side::Tail, counts)
    }

    #[test]
    fn overlapping_windows() {
        let t = toks(&[Upos::Noun, Upos::Noun, Upos::Noun]);
        assert_eq!(
            match_spans(&t, &"NOUN,NOUN".parse().unwrap()),
            vec![(0, 2), (1, 3)]
        );
        assert!(match_spans(&t[..1], &"NOUN,NOUN".parse().unwrap()).is_empty());
    }

    #[test]
    fn full_phrase_match() {
        let lex = TagLexicon::starter();
        let t = lex.tag("preparing and serving drinks");
        assert_eq!(
            match_spans(&t, &"VERB,CCONJ,VERB,NOUN".parse().unwrap()),
            vec![(0, 4)]
        );
    }

    fn bartender_candidates(patterns: &PatternTable) -> Candidates {
        let lex = TagLexicon::starter();
        let defs = vec![TermDefinition::new("bartender", 0, BARTENDER)];
        let tagged = BTreeMap::from([(defs[0].source_id.clone(), lex.tag(BARTENDER))]);
        extract_candidates(&defs, &tagged, patterns).unwrap()
    }

    #[test]
    fn bartender_triples() {
        let patterns = table(&[
            (RelationId::IsA, "NOUN"),
            (RelationId::AtLocation, "NOUN"),
            (RelationId::CapableOf, "VERB,CCONJ,VERB,NOUN"),
        ]);
        let out = bartender_candidates(&patterns);
        let tails = |r| out[&r].iter().map(|c| c.tail.as_str()).collect::<Vec<_>>();
        assert_eq!(
            tails(RelationId::AtLocation),
            vec!["bar", "pub", "person", "drinks"]
        );
        assert!(tails(RelationId::IsA).contains(&"person"));
        assert_eq!(
            tails(RelationId::CapableOf),
            vec!["preparing and serving drinks"]
        );
        assert!(!out.contains_key(&RelationId::UsedFor));
    }

    #[test]
    fn spans_reslice_to_tail() {
        let lex = TagLexicon::starter();
        let tokens = lex.tag(BARTENDER);
        let patterns = table(&[
            (RelationId::AtLocation, "NOUN"),
            (RelationId::CapableOf, "VERB,CCONJ,VERB,NOUN"),
        ]);
        for c in bartender_candidates(&patterns).values().flatten() {
            assert_eq!(span_text(&tokens, c.span), c.tail);
        }
    }

    #[test]
    fn self_loops_are_dropped() {
        let lex = TagLexicon::starter();
        let defs = vec![TermDefinition::new("bar", 0, "a counter in a Bar")];
        let tagged =
            BTreeMap::from([(defs[0].source_id.clone(), lex.tag(&defs[0].definition_text))]);
        let out = extract_candidates(&defs, &tagged, &table(&[(RelationId::AtLocation, "NOUN")]))
            .unwrap();
        let tails: Vec<_> = out[&RelationId::AtLocation]
            .iter()
            .map(|c| c.tail.as_str())
            .collect();
        assert_eq!(tails, vec!["counter"]);
    }

    #[test]
    fn missing_tokens_is_fatal() {
        let defs = vec![TermDefinition::new("bar", 0, "a counter")];
        let err = extract_candidates(
            &defs,
            &BTreeMap::new(),
            &table(&[(RelationId::IsA, "NOUN")]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingTokens(id) if id == "bar#0"));
    }

    #[test]
    fn jsonl_round_trip() {
        let patterns = table(&[
            (RelationId::AtLocation, "NOUN"),
            (RelationId::CapableOf, "VERB,CCONJ,VERB,NOUN"),
        ]);
        let out = bartender_candidates(&patterns);
        let mut buf = Vec::new();
        write_candidates_jsonl(&mut buf, &out).unwrap();
        assert_eq!(read_candidates_jsonl(buf.as_slice()).unwrap(), out);
        let first = String::from_utf8(buf)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert!(first.contains("\"pattern\":\"NOUN\""), "{first}");
    }
}
