//! Plausibility scores for candidate triples, ranking, selection and sampling.
//!
//! Three scorers feed the same [`ScoreRecord`] stream:
//!
//! * a native bilinear model: each term is the mean of its word vectors `v`,
//!   transformed to `u = tanh(W v + b)`, and a triple scores
//!   `sigmoid(u1ᵀ M_R u2)` with one matrix `M_R` per relation;
//! * a PMI combiner over language-model log-probabilities computed elsewhere,
//!   averaging the head→tail and tail→head directions;
//! * plain ingestion of externally computed scores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RelationId, Triple, TripleKey};
use crate::embedding::WordEmbeddings;
use crate::tsv::{clean_field, numbered_lines, Parsed};
use crate::{Error, Result};

pub const BILINEAR_SCORER: &str = "bilinear";
pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_TOP_N: usize = 1000;
pub const DEFAULT_SAMPLE_SIZE: usize = 50;
/// Attempts allowed per negative before giving up.
pub const NEGATIVE_REDRAW_LIMIT: usize = 1000;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    embeddings: WordEmbeddings,
    /// r×d
    transform: Array2<f64>,
    /// r
    bias: Array1<f64>,
    relation_matrices: BTreeMap<RelationId, Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermEncoding {
    pub v: Array1<f64>,
    pub u: Array1<f64>,
    pub oov_fraction: f64,
}

impl BilinearModel {
    pub fn new(
        embeddings: WordEmbeddings,
        transform: Array2<f64>,
        bias: Array1<f64>,
        relation_matrices: BTreeMap<RelationId, Array2<f64>>,
    ) -> Result<Self> {
        let (r, d) = transform.dim();
        if d != embeddings.dim() {
            return Err(Error::Model(format!(
                "transform has {d} columns but embeddings have dimension {}",
                embeddings.dim()
            )));
        }
        if bias.len() != r {
            return Err(Error::Model(format!(
                "bias has length {}, expected {r}",
                bias.len()
            )));
        }
        for (rel, m) in &relation_matrices {
            if m.dim() != (r, r) {
                return Err(Error::Model(format!(
                    "matrix for {rel} is {:?}, expected ({r}, {r})",
                    m.dim()
                )));
            }
        }
        Ok(BilinearModel {
            embeddings,
            transform,
            bias,
            relation_matrices,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.transform.ncols()
    }

    pub fn relation_dim(&self) -> usize {
        self.transform.nrows()
    }

    pub fn embeddings(&self) -> &WordEmbeddings {
        &self.embeddings
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.relation_matrices.keys().copied()
    }

    pub fn relation_matrix(&self, relation: RelationId) -> Option<&Array2<f64>> {
        self.relation_matrices.get(&relation)
    }

    pub fn relation_matrix_mut(&mut self, relation: RelationId) -> Option<&mut Array2<f64>> {
        self.relation_matrices.get_mut(&relation)
    }

    pub fn encode_term(&self, text: &str) -> TermEncoding {
        let phrase = self.embeddings.average(text);
        let u = (self.transform.dot(&phrase.vector) + &self.bias).mapv(f64::tanh);
        TermEncoding {
            v: phrase.vector,
            u,
            oov_fraction: phrase.oov_fraction,
        }
    }

    /// `u1ᵀ M_R u2` before squashing.
    pub fn logit(&self, head: &str, relation: RelationId, tail: &str) -> Result<f64> {
        let m = self
            .relation_matrices
            .get(&relation)
            .ok_or(Error::MissingRelation(relation))?;
        let u1 = self.encode_term(head).u;
        let u2 = self.encode_term(tail).u;
        Ok(u1.dot(&m.dot(&u2)))
    }

    /// Reads the text model format documented in [`BilinearModel::write_to`].
    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        ModelReader::new(reader)?.read()
    }

    /// Text format, every number in decimal:
    ///
    /// ```text
    /// dims <d> <r>
    /// relations <Rel> <Rel> ...
    /// embeddings <count>
    /// <word> <v1> ... <vd>          (count rows)
    /// transform
    /// <w11> ... <w1d>               (r rows)
    /// bias
    /// <b1> ... <br>
    /// matrix <Rel>                  (one block per listed relation)
    /// <m11> ... <m1r>               (r rows)
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (r, d) = self.transform.dim();
        let mut s = String::new();
        writeln!(s, "dims {d} {r}").unwrap();
        let rels: Vec<&str> = self.relation_matrices.keys().map(|r| r.as_str()).collect();
        writeln!(s, "relations {}", rels.join(" ")).unwrap();
        writeln!(s, "embeddings {}", self.embeddings.len()).unwrap();
        for word in self.embeddings.words() {
            let v = self.embeddings.get(word).expect("listed word");
            writeln!(s, "{word} {}", join_numbers(v.iter())).unwrap();
        }
        writeln!(s, "transform").unwrap();
        for row in self.transform.rows() {
            writeln!(s, "{}", join_numbers(row.iter())).unwrap();
        }
        writeln!(s, "bias").unwrap();
        writeln!(s, "{}", join_numbers(self.bias.iter())).unwrap();
        for (rel, m) in &self.relation_matrices {
            writeln!(s, "matrix {rel}").unwrap();
            for row in m.rows() {
                writeln!(s, "{}", join_numbers(row.iter())).unwrap();
            }
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }
}

fn join_numbers<'a>(it: impl Iterator<Item = &'a f64>) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

struct ModelReader {
    lines: std::vec::IntoIter<(usize, String)>,
}

impl ModelReader {
    fn new<R: Read>(reader: R) -> Result<Self> {
        let mut lines = Vec::new();
        for (n, l) in numbered_lines(reader) {
            let l = l?;
            let t = l.trim();
            if !t.is_empty() && !t.starts_with('#') {
                lines.push((n, t.to_string()));
            }
        }
        Ok(ModelReader {
            lines: lines.into_iter(),
        })
    }

    fn next_line(&mut self) -> Result<(usize, String)> {
        self.lines
            .next()
            .ok_or_else(|| Error::Model("unexpected end of model file".into()))
    }

    fn keyword<'a>(line_no: usize, line: &'a str, kw: &str) -> Result<Vec<&'a str>> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(kw) {
            return Err(Error::parse(line_no, format!("expected `{kw}`")));
        }
        Ok(parts.collect())
    }

    fn numbers(line_no: usize, parts: &[&str], expect: usize) -> Result<Vec<f64>> {
        if parts.len() != expect {
            return Err(Error::parse(
                line_no,
                format!("expected {expect} numbers, found {}", parts.len()),
            ));
        }
        parts
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::parse(line_no, format!("bad number `{p}`")))
            })
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, line) = self.next_line()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            data.extend(Self::numbers(n, &parts, cols)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn usize_arg(line_no: usize, s: Option<&&str>) -> Result<usize> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(line_no, "expected a count"))
    }

    fn read(mut self) -> Result<BilinearModel> {
        let (n, line) = self.next_line()?;
        let dims = Self::keyword(n, &line, "dims")?;
        let d = Self::usize_arg(n, dims.first())?;
        let r = Self::usize_arg(n, dims.get(1))?;

        let (n, line) = self.next_line()?;
        let relations = Self::keyword(n, &line, "relations")?
            .into_iter()
            .map(|s| {
                s.parse::<RelationId>()
                    .map_err(|e| Error::parse(n, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;

        let (n, line) = self.next_line()?;
        let count = Self::usize_arg(n, Self::keyword(n, &line, "embeddings")?.first())?;
        let mut embeddings = WordEmbeddings::new(d);
        for _ in 0..count {
            let (n, line) = self.next_line()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let (word, rest) = parts
                .split_first()
                .ok_or_else(|| Error::parse(n, "empty embedding row"))?;
            embeddings.insert(word, Self::numbers(n, rest, d)?);
        }

        let (n, line) = self.next_line()?;
        Self::keyword(n, &line, "transform")?;
        let transform = self.matrix(r, d)?;

        let (n, line) = self.next_line()?;
        Self::keyword(n, &line, "bias")?;
        let (n, line) = self.next_line()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bias = Array1::from(Self::numbers(n, &parts, r)?);

        let mut matrices = BTreeMap::new();
        for expected in relations {
            let (n, line) = self.next_line()?;
            let args = Self::keyword(n, &line, "matrix")?;
            if args.first().copied() != Some(expected.as_str()) {
                return Err(Error::parse(n, format!("expected matrix for {expected}")));
            }
            matrices.insert(expected, self.matrix(r, r)?);
        }
        if let Some((n, _)) = self.lines.next() {
            return Err(Error::parse(n, "trailing content after last matrix"));
        }
        BilinearModel::new(embeddings, transform, bias, matrices)
    }
}

/// One score assigned by one scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub key: TripleKey,
    pub scorer_id: String,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(key: TripleKey, scorer_id: impl Into<String>, score: f64) -> Self {
        ScoreRecord {
            key,
            scorer_id: scorer_id.into(),
            score,
        }
    }
}

pub fn encode_term(text: &str, model: &BilinearModel) -> TermEncoding {
    model.encode_term(text)
}

pub fn bilinear_score(
    head: &str,
    relation: RelationId,
    tail: &str,
    model: &BilinearModel,
) -> Result<ScoreRecord> {
    let logit = model.logit(head, relation, tail)?;
    Ok(ScoreRecord::new(
        TripleKey::new(head, relation, tail),
        BILINEAR_SCORER,
        sigmoid(logit),
    ))
}

/// Natural-log conditional probabilities from a masked language model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmiComponents {
    pub logp_t_given_hr: f64,
    pub logp_t_given_r: f64,
    pub logp_h_given_tr: f64,
    pub logp_h_given_r: f64,
}

impl PmiComponents {
    pub fn new(
        logp_t_given_hr: f64,
        logp_t_given_r: f64,
        logp_h_given_tr: f64,
        logp_h_given_r: f64,
    ) -> Self {
        PmiComponents {
            logp_t_given_hr,
            logp_t_given_r,
            logp_h_given_tr,
            logp_h_given_r,
        }
    }

    /// Swaps the head→tail and tail→head directions.
    pub fn swapped(&self) -> Self {
        PmiComponents::new(
            self.logp_h_given_tr,
            self.logp_h_given_r,
            self.logp_t_given_hr,
            self.logp_t_given_r,
        )
    }

    fn check_finite(&self) -> Result<()> {
        let named = [
            ("logp_t_given_hr", self.logp_t_given_hr),
            ("logp_t_given_r", self.logp_t_given_r),
            ("logp_h_given_tr", self.logp_h_given_tr),
            ("logp_h_given_r", self.logp_h_given_r),
        ];
        match named.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite(name)),
            None => Ok(()),
        }
    }
}

/// Mean of the two directional PMI values.
pub fn pmi_score(c: &PmiComponents) -> Result<f64> {
    c.check_finite()?;
    let forward = c.logp_t_given_hr - c.logp_t_given_r;
    let backward = c.logp_h_given_tr - c.logp_h_given_r;
    Ok((forward + backward) / 2.0)
}

/// Why rows of a score file were rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRejects {
    pub malformed: usize,
    pub unknown_relation: usize,
    pub out_of_range: usize,
}

/// Reads `head<TAB>relation<TAB>tail<TAB>score` rows, or seven-column PMI rows
/// `head<TAB>relation<TAB>tail<TAB>logp(t|h,r)<TAB>logp(t|r)<TAB>logp(h|t,r)<TAB>logp(h|r)`
/// which go through [`pmi_score`]. Calibrated scorers must stay within [0, 1].
pub fn ingest_external_scores<R: Read>(
    reader: R,
    scorer_id: &str,
    calibrated: bool,
) -> Result<(Parsed<ScoreRecord>, IngestRejects)> {
    let mut out = Parsed::default();
    let mut rejects = IngestRejects::default();
    for (_, line) in numbered_lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_score_row(&line, scorer_id, calibrated) {
            Ok(rec) => {
                out.items.push(rec);
                out.counts.parsed += 1;
            }
            Err(kind) => {
                out.counts.skipped += 1;
                match kind {
                    RowReject::Malformed => rejects.malformed += 1,
                    RowReject::Relation => rejects.unknown_relation += 1,
                    RowReject::Range => rejects.out_of_range += 1,
                }
            }
        }
    }
    Ok((out, rejects))
}

enum RowReject {
    Malformed,
    Relation,
    Range,
}

fn parse_score_row(
    line: &str,
    scorer_id: &str,
    calibrated: bool,
) -> Result<ScoreRecord, RowReject> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 && cols.len() != 7 {
        return Err(RowReject::Malformed);
    }
    let (head, tail) = (cols[0].trim(), cols[2].trim());
    if head.is_empty() || tail.is_empty() {
        return Err(RowReject::Malformed);
    }
    let relation: RelationId = cols[1].trim().parse().map_err(|_| RowReject::Relation)?;
    let nums = cols[3..]
        .iter()
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| RowReject::Malformed)?;
    let score = if nums.len() == 4 {
        pmi_score(&PmiComponents::new(nums[0], nums[1], nums[2], nums[3]))
            .map_err(|_| RowReject::Malformed)?
    } else {
        nums[0]
    };
    if !score.is_finite() {
        return Err(RowReject::Malformed);
    }
    if calibrated && !(0.0..=1.0).contains(&score) {
        return Err(RowReject::Range);
    }
    Ok(ScoreRecord::new(
        TripleKey::new(head, relation, tail),
        scorer_id,
        score,
    ))
}

pub fn write_scores<W: Write>(mut w: W, records: &[ScoreRecord]) -> Result<()> {
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            clean_field(&r.key.head),
            r.key.relation,
            clean_field(&r.key.tail),
            r.score
        )?;
    }
    Ok(())
}

/// Reads a score file written by [`write_scores`]; any bad row is an error.
pub fn read_scores<R: Read>(reader: R, scorer_id: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = parse_score_row(&line, scorer_id, false)
            .map_err(|_| Error::parse(line_no, "bad score row"))?;
        out.push(rec);
    }
    Ok(out)
}

/// A corrupted positive and which slot was replaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeTriple {
    pub triple: Triple,
    pub source_index: usize,
    pub replaced_head: bool,
}

/// Corrupts positives by swapping the head or the tail (chosen uniformly) for an
/// entity drawn uniformly from every head and tail seen in the positives.
/// Corruptions that are themselves positives are redrawn.
pub fn generate_negative_triples(
    positives: &[Triple],
    n: usize,
    seed: u64,
) -> Result<Vec<NegativeTriple>> {
    let mut seen = HashSet::new();
    let unique: Vec<&Triple> = positives.iter().filter(|t| seen.insert(t.key())).collect();
    if unique.is_empty() {
        return Err(Error::Sampling("no positive triples".into()));
    }
    let vocab: Vec<&str> = unique
        .iter()
        .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if vocab.len() < 2 {
        return Err(Error::Sampling(format!(
            "entity vocabulary has {} entity, no corruption possible",
            vocab.len()
        )));
    }
    let positive_keys: HashSet<TripleKey> = seen;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = None;
        for _ in 0..NEGATIVE_REDRAW_LIMIT {
            let src_idx = rng.random_range(0..unique.len());
            let src = unique[src_idx];
            let replace_head = rng.random_bool(0.5);
            let entity = vocab[rng.random_range(0..vocab.len())];
            let (head, tail) = if replace_head {
                (entity, src.tail.as_str())
            } else {
                (src.head.as_str(), entity)
            };
            let key = TripleKey::new(head, src.relation, tail);
            if positive_keys.contains(&key) {
                continue;
            }
            let replaced = if replace_head { "head" } else { "tail" };
            accepted = Some(NegativeTriple {
                triple: Triple {
                    head: key.head,
                    relation: key.relation,
                    tail: key.tail,
                    source: format!("negative:{i};from={};replaced={replaced}", src.source),
                },
                source_index: src_idx,
                replaced_head: replace_head,
            });
            break;
        }
        match accepted {
            Some(neg) => out.push(neg),
            None => {
                return Err(Error::Sampling(format!(
                    "no valid corruption after {NEGATIVE_REDRAW_LIMIT} attempts for negative {i}"
                )))
            }
        }
    }
    Ok(out)
}

/// Training-set layout with confidence 0: `relation<TAB>head<TAB>tail<TAB>0`.
pub fn write_negatives<W: Write>(mut w: W, negatives: &[NegativeTriple]) -> Result<()> {
    for n in negatives {
        let t = &n.triple;
        writeln!(
            w,
            "{}\t{}\t{}\t0",
            t.relation,
            clean_field(&t.head),
            clean_field(&t.tail)
        )?;
    }
    Ok(())
}

/// Descending score; ties by head then tail ascending.
pub fn ranking_order(a: &ScoreRecord, b: &ScoreRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.key.head.cmp(&b.key.head))
        .then_with(|| a.key.tail.cmp(&b.key.tail))
}

/// Records of `relation`, best first.
pub fn rank_candidates(records: &[ScoreRecord], relation: RelationId) -> Result<Vec<ScoreRecord>> {
    if let Some(first) = records.first() {
        if let Some(other) = records.iter().find(|r| r.scorer_id != first.scorer_id) {
            return Err(Error::MixedScorers(
                first.scorer_id.clone(),
                other.scorer_id.clone(),
            ));
        }
    }
    let mut ranked: Vec<ScoreRecord> = records
        .iter()
        .filter(|r| r.key.relation == relation)
        .cloned()
        .collect();
    ranked.sort_by(ranking_order);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    /// Keep scores ≥ θ.
    Threshold(f64),
    /// Keep the best N.
    TopN(usize),
}

impl Default for SelectionCriterion {
    fn default() -> Self {
        SelectionCriterion::Threshold(DEFAULT_THRESHOLD)
    }
}

impl SelectionCriterion {
    pub fn threshold(theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Invalid(format!("threshold {theta} outside [0, 1]")));
        }
        Ok(SelectionCriterion::Threshold(theta))
    }
}

/// Qualified prefix of a ranking.
pub fn select_qualified(
    ranking: &[ScoreRecord],
    criterion: SelectionCriterion,
) -> Vec<ScoreRecord> {
    match criterion {
        SelectionCriterion::Threshold(theta) => ranking
            .iter()
            .filter(|r| r.score >= theta)
            .cloned()
            .collect(),
        SelectionCriterion::TopN(n) => ranking.iter().take(n).cloned().collect(),
    }
}

/// Uniform sample without replacement of `min(n, len)` items, returned in
/// their original order.
pub fn sample_for_evaluation<T: Clone>(qualified: &[T], n: usize, seed: u64) -> Vec<T> {
    let amount = n.min(qualified.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, qualified.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| qualified[i].clone()).collect()
}
