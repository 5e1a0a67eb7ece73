//! Universal part-of-speech tags for concept phrases and definition text.
//!
//! Pre-tagged input is the fidelity path. When a definition has no pre-tagged
//! sequence, a deterministic lexicon tagger fills in: exact word lookup, then
//! suffix rules (longest suffix first), then a default tag.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tsv::numbered_lines;
use crate::{Error, Result};

/// The 17 Universal Dependencies part-of-speech labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Upos {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl Upos {
    pub const ALL: [Upos; 17] = [
        Upos::Adj,
        Upos::Adp,
        Upos::Adv,
        Upos::Aux,
        Upos::Cconj,
        Upos::Det,
        Upos::Intj,
        Upos::Noun,
        Upos::Num,
        Upos::Part,
        Upos::Pron,
        Upos::Propn,
        Upos::Punct,
        Upos::Sconj,
        Upos::Sym,
        Upos::Verb,
        Upos::X,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Upos::Adj => "ADJ",
            Upos::Adp => "ADP",
            Upos::Adv => "ADV",
            Upos::Aux => "AUX",
            Upos::Cconj => "CCONJ",
            Upos::Det => "DET",
            Upos::Intj => "INTJ",
            Upos::Noun => "NOUN",
            Upos::Num => "NUM",
            Upos::Part => "PART",
            Upos::Pron => "PRON",
            Upos::Propn => "PROPN",
            Upos::Punct => "PUNCT",
            Upos::Sconj => "SCONJ",
            Upos::Sym => "SYM",
            Upos::Verb => "VERB",
            Upos::X => "X",
        }
    }
}

impl fmt::Display for Upos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Upos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Upos::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTag(s.to_string()))
    }
}

impl TryFrom<String> for Upos {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Upos> for String {
    fn from(t: Upos) -> String {
        t.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaggedToken {
    pub text: String,
    pub tag: Upos,
}

impl TaggedToken {
    pub fn new(text: impl Into<String>, tag: Upos) -> Self {
        TaggedToken {
            text: text.into(),
            tag,
        }
    }
}

/// A token with its byte range in the source string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

impl Token<'_> {
    pub fn is_punct(&self) -> bool {
        self.text.chars().all(is_punct_char)
    }
}

fn is_punct_char(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Splits on whitespace, then peels leading and trailing punctuation off each
/// chunk into one-character tokens. Inner punctuation (hyphens, apostrophes) stays.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut chunks = Vec::new();
    let mut chunk_start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), chunk_start) {
            (true, Some(s)) => {
                chunks.push((s, i));
                chunk_start = None;
            }
            (false, None) => chunk_start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = chunk_start {
        chunks.push((s, text.len()));
    }

    for (start, end) in chunks {
        let chunk = &text[start..end];
        let core_start = chunk
            .char_indices()
            .find(|(_, c)| !is_punct_char(*c))
            .map(|(i, _)| i);
        let Some(core_start) = core_start else {
            push_chars(&mut out, text, start, end);
            continue;
        };
        let core_end = chunk
            .char_indices()
            .rev()
            .find(|(_, c)| !is_punct_char(*c))
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(chunk.len());
        push_chars(&mut out, text, start, start + core_start);
        out.push(Token {
            text: &text[start + core_start..start + core_end],
            start: start + core_start,
            end: start + core_end,
        });
        push_chars(&mut out, text, start + core_end, end);
    }
    out
}

fn push_chars<'a>(out: &mut Vec<Token<'a>>, text: &'a str, start: usize, end: usize) {
    for (i, c) in text[start..end].char_indices() {
        let s = start + i;
        let e = s + c.len_utf8();
        out.push(Token {
            text: &text[s..e],
            start: s,
            end: e,
        });
    }
}

/// Anything that can turn a string into tagged tokens.
pub trait Tagger {
    fn tag(&self, text: &str) -> Vec<TaggedToken>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagLexicon {
    word_to_tag: HashMap<String, Upos>,
    /// Sorted longest suffix first; equal lengths keep file order.
    suffix_rules: Vec<(String, Upos)>,
    default_tag: Upos,
}

const STARTER_LEXICON: &str = include_str!("../data/lexicon.tsv");
const STARTER_SUFFIXES: &str = include_str!("../data/suffixes.tsv");

impl TagLexicon {
    pub fn new(
        words: HashMap<String, Upos>,
        mut suffix_rules: Vec<(String, Upos)>,
        default_tag: Upos,
    ) -> Self {
        let words = words
            .into_iter()
            .map(|(w, t)| (w.to_lowercase(), t))
            .collect();
        suffix_rules.sort_by_key(|(s, _)| std::cmp::Reverse(s.chars().count()));
        TagLexicon {
            word_to_tag: words,
            suffix_rules,
            default_tag,
        }
    }

    /// The lexicon shipped with the crate, defaulting to NOUN.
    pub fn starter() -> Self {
        Self::from_readers(
            STARTER_LEXICON.as_bytes(),
            STARTER_SUFFIXES.as_bytes(),
            Upos::Noun,
        )
        .expect("bundled lexicon is well-formed")
    }

    /// Reads `word<TAB>tag` and `suffix<TAB>tag` files.
    pub fn from_readers<R1: Read, R2: Read>(
        lexicon: R1,
        suffixes: R2,
        default_tag: Upos,
    ) -> Result<Self> {
        let words = read_tag_entries(lexicon)?.into_iter().collect();
        let rules = read_tag_entries(suffixes)?;
        Ok(Self::new(words, rules, default_tag))
    }

    /// Adds entries on top of the current lexicon; later entries win.
    pub fn extend<I: IntoIterator<Item = (String, Upos)>>(&mut self, words: I) {
        for (w, t) in words {
            self.word_to_tag.insert(w.to_lowercase(), t);
        }
    }

    /// Replaces the suffix rules, keeping the word entries.
    pub fn set_suffix_rules(&mut self, mut rules: Vec<(String, Upos)>) {
        rules.sort_by_key(|(s, _)| std::cmp::Reverse(s.chars().count()));
        self.suffix_rules = rules;
    }

    pub fn default_tag(&self) -> Upos {
        self.default_tag
    }

    pub fn tag_word(&self, word: &str) -> Upos {
        if word.chars().all(is_punct_char) {
            return Upos::Punct;
        }
        let lower = word.to_lowercase();
        if let Some(t) = self.word_to_tag.get(&lower) {
            return *t;
        }
        self.suffix_rules
            .iter()
            .find(|(suffix, _)| lower.len() > suffix.len() && lower.ends_with(suffix.as_str()))
            .map(|(_, t)| *t)
            .unwrap_or(self.default_tag)
    }
}

impl Tagger for TagLexicon {
    fn tag(&self, text: &str) -> Vec<TaggedToken> {
        tokenize(text)
            .into_iter()
            .map(|tok| TaggedToken::new(tok.text, self.tag_word(tok.text)))
            .collect()
    }
}

/// Convenience wrapper for [`Tagger::tag`].
pub fn tag_phrase(phrase: &str, lexicon: &TagLexicon) -> Vec<TaggedToken> {
    lexicon.tag(phrase)
}

/// Reads `entry<TAB>tag` rows in file order; `#` lines and blank lines are skipped.
pub fn read_tag_entries<R: Read>(reader: R) -> Result<Vec<(String, Upos)>> {
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(line_no, "expected `entry<TAB>tag`"))?;
        let tag = tag
            .trim()
            .parse()
            .map_err(|e: Error| Error::parse(line_no, e.to_string()))?;
        out.push((word.trim().to_string(), tag));
    }
    Ok(out)
}

/// Reads CoNLL-style rows `source_id<TAB>token<TAB>upos`, sentences separated by
/// blank lines. Any malformed row is fatal and reports its line number.
pub fn load_pretagged<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<TaggedToken>>> {
    let mut out: BTreeMap<String, Vec<TaggedToken>> = BTreeMap::new();
    let mut current: Option<(String, Vec<TaggedToken>)> = None;

    let mut flush =
        |current: &mut Option<(String, Vec<TaggedToken>)>, line_no: usize| -> Result<()> {
            if let Some((id, tokens)) = current.take() {
                if out.contains_key(&id) {
                    return Err(Error::parse(
                        line_no,
                        format!("source id `{id}` appears in two sentences"),
                    ));
                }
                out.insert(id, tokens);
            }
            Ok(())
        };

    let mut last_line = 0;
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        last_line = line_no;
        if line.trim().is_empty() {
            flush(&mut current, line_no)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(Error::parse(
                line_no,
                "expected `source_id<TAB>token<TAB>upos`",
            ));
        }
        let tag: Upos = cols[2]
            .parse()
            .map_err(|e: Error| Error::parse(line_no, e.to_string()))?;
        let token = TaggedToken::new(cols[1], tag);
        match &mut current {
            Some((id, tokens)) if id == cols[0] => tokens.push(token),
            Some((id, _)) => {
                return Err(Error::parse(
                    line_no,
                    format!("source id `{}` inside sentence `{id}`", cols[0]),
                ))
            }
            None => current = Some((cols[0].to_string(), vec![token])),
        }
    }
    flush(&mut current, last_line + 1)?;
    Ok(out)
}

/// Writes sequences in the format read by [`load_pretagged`].
pub fn write_tagged<'a, W, I>(mut w: W, sequences: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a [TaggedToken])>,
{
    for (id, tokens) in sequences {
        if tokens.is_empty() {
            continue;
        }
        for t in tokens {
            writeln!(w, "{id}\t{}\t{}", t.text, t.tag)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Tags definitions, preferring pre-tagged sequences over the lexicon tagger.
pub struct DefinitionTagger<'a> {
    pub pretagged: Option<&'a BTreeMap<String, Vec<TaggedToken>>>,
    pub lexicon: &'a TagLexicon,
}

impl DefinitionTagger<'_> {
    pub fn tag_definition(&self, source_id: &str, text: &str) -> Vec<TaggedToken> {
        self.pretagged
            .and_then(|p| p.get(source_id))
            .cloned()
            .unwrap_or_else(|| self.lexicon.tag(text))
    }
}
