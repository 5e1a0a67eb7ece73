//! Score histograms, rank agreement between scorers, and the validity/novelty
//! summary built from human labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{RelationId, TripleKey};
use crate::scoring::ScoreRecord;
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Scores outside `[lo, hi]`, including NaN.
    pub out_of_range: u64,
}

impl Histogram {
    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        let hi = if i + 1 == self.counts.len() {
            self.hi
        } else {
            self.lo + w * (i + 1) as f64
        };
        (self.lo + w * i as f64, hi)
    }

    /// `bin_lo,bin_hi,count` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            writeln!(s, "{lo},{hi},{c}").unwrap();
        }
        s
    }
}

/// Equal-width histogram over `range`, or over the data's min and max when no
/// range is given. The last bin is closed on the right.
pub fn histogram(scores: &[f64], bin_count: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bin_count == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => {
            let finite = scores.iter().copied().filter(|s| s.is_finite());
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in finite {
                lo = lo.min(s);
                hi = hi.max(s);
            }
            if lo > hi {
                return Err(Error::Invalid(
                    "cannot derive a histogram range from no scores".into(),
                ));
            }
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        }
    };
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::Invalid(format!(
            "histogram range ({lo}, {hi}) is empty"
        )));
    }
    let mut counts = vec![0u64; bin_count];
    let mut out_of_range = 0;
    for &s in scores {
        if !(lo..=hi).contains(&s) {
            out_of_range += 1;
            continue;
        }
        let idx = (((s - lo) / (hi - lo)) * bin_count as f64).floor() as usize;
        counts[idx.min(bin_count - 1)] += 1;
    }
    Ok(Histogram {
        lo,
        hi,
        counts,
        out_of_range,
    })
}

/// Scores of the same triples under two scorers, matched by key.
pub fn paired_scores(a: &[ScoreRecord], b: &[ScoreRecord]) -> Vec<(f64, f64)> {
    let mut b_scores: HashMap<&TripleKey, f64> = HashMap::new();
    for r in b {
        b_scores.entry(&r.key).or_insert(r.score);
    }
    let mut seen = BTreeSet::new();
    let mut pairs: Vec<(&TripleKey, f64, f64)> = a
        .iter()
        .filter(|r| seen.insert(&r.key))
        .filter_map(|r| b_scores.get(&r.key).map(|s| (&r.key, r.score, *s)))
        .collect();
    pairs.sort_by(|x, y| x.0.cmp(y.0));
    pairs.into_iter().map(|(_, x, y)| (x, y)).collect()
}

/// Tau-b between two scorers over the triples both of them scored.
pub fn kendall_tau(a: &[ScoreRecord], b: &[ScoreRecord]) -> Result<f64> {
    tau_b(&paired_scores(a, b))
}

/// Tau-b of paired observations in O(n log n): sort by x, then count the
/// inversions in y with a merge sort.
pub fn tau_b(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientPairs(n));
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Invalid("tau requires finite scores".into()));
    }
    let mut v: Vec<(f64, f64)> = pairs.to_vec();
    v.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));

    let n0 = (n as i64) * (n as i64 - 1) / 2;
    let (ties_x, ties_xy) = tie_counts(&v);

    let mut ys: Vec<f64> = v.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let discordant = merge_count(&mut ys, &mut buf);
    let ties_y = run_ties(&ys);

    let numerator = n0 - ties_x - ties_y + ties_xy - 2 * discordant;
    tau_from_counts(numerator, n0, ties_x, ties_y)
}

/// Final tau-b expression shared by every route that produces the counts.
pub fn tau_from_counts(
    concordant_minus_discordant: i64,
    n0: i64,
    ties_x: i64,
    ties_y: i64,
) -> Result<f64> {
    let denom = ((n0 - ties_x) as f64 * (n0 - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Invalid(
            "tau undefined when one side is constant".into(),
        ));
    }
    Ok(concordant_minus_discordant as f64 / denom)
}

/// Pairs tied on x, and pairs tied on both x and y, for input sorted by (x, y).
fn tie_counts(v: &[(f64, f64)]) -> (i64, i64) {
    let (mut tx, mut txy) = (0i64, 0i64);
    let (mut run_x, mut run_xy) = (1i64, 1i64);
    for i in 1..v.len() {
        if v[i].0 == v[i - 1].0 {
            run_x += 1;
            if v[i].1 == v[i - 1].1 {
                run_xy += 1;
            } else {
                txy += run_xy * (run_xy - 1) / 2;
                run_xy = 1;
            }
        } else {
            tx += run_x * (run_x - 1) / 2;
            txy += run_xy * (run_xy - 1) / 2;
            run_x = 1;
            run_xy = 1;
        }
    }
    tx += run_x * (run_x - 1) / 2;
    txy += run_xy * (run_xy - 1) / 2;
    (tx, txy)
}

fn run_ties(sorted: &[f64]) -> i64 {
    let mut total = 0i64;
    let mut run = 1i64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// One human judgment of a sampled triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationLabel {
    #[serde(flatten)]
    pub key: TripleKey,
    pub scorer_id: String,
    #[serde(default)]
    pub annotator: Option<String>,
    pub valid: bool,
    pub novel: bool,
}

/// The sample drawn for one (relation, scorer) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRegistration {
    pub relation: RelationId,
    pub scorer_id: String,
    pub qualified_count: usize,
    pub sample: Vec<TripleKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub relation: RelationId,
    pub scorer_id: String,
    pub qualified_count: usize,
    pub sample_size: usize,
    pub annotators: usize,
    pub labeled: usize,
    pub valid: usize,
    pub valid_and_novel: usize,
    pub validity: f64,
    pub valid_novel_proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub rows: Vec<SummaryRow>,
    pub rejected_labels: usize,
}

impl EvaluationSummary {
    pub fn row(&self, relation: RelationId, scorer_id: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.relation == relation && r.scorer_id == scorer_id)
    }

    /// `relation,scorer,qualified,validity,valid_and_novel`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("relation,scorer,qualified,validity,valid_and_novel\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.relation, r.scorer_id, r.qualified_count, r.validity, r.valid_novel_proportion
            )
            .unwrap();
        }
        s
    }
}

/// Validity and valid-and-novel proportions per (relation, scorer) cell.
///
/// Proportions are label counts over the sample size. With several annotators
/// the denominator is the sample size times the number of annotators, which
/// weights each annotator by the labels they gave. A later label for the same
/// (triple, annotator) replaces an earlier one; labels for triples outside the
/// registered sample are rejected.
pub fn summarize_annotations(
    labels: &[AnnotationLabel],
    samples: &[SampleRegistration],
) -> EvaluationSummary {
    type Cell = (RelationId, String);
    let mut cells: BTreeMap<Cell, (&SampleRegistration, BTreeSet<&TripleKey>)> = BTreeMap::new();
    for reg in samples {
        let keys = reg.sample.iter().collect();
        cells.insert((reg.relation, reg.scorer_id.clone()), (reg, keys));
    }

    let mut latest: BTreeMap<(Cell, &TripleKey, Option<&str>), &AnnotationLabel> = BTreeMap::new();
    let mut rejected = 0;
    for l in labels {
        let cell = (l.key.relation, l.scorer_id.clone());
        match cells.get(&cell) {
            Some((_, keys)) if keys.contains(&l.key) => {
                latest.insert((cell, &l.key, l.annotator.as_deref()), l);
            }
            _ => rejected += 1,
        }
    }

    let mut rows = Vec::new();
    for (cell, (reg, _)) in &cells {
        let mine: Vec<(&Option<&str>, &&AnnotationLabel)> = latest
            .iter()
            .filter(|((c, _, _), _)| c == cell)
            .map(|((_, _, a), l)| (a, l))
            .collect();
        let annotators = mine
            .iter()
            .map(|(a, _)| **a)
            .collect::<BTreeSet<_>>()
            .len()
            .max(1);
        let valid = mine.iter().filter(|(_, l)| l.valid).count();
        let valid_and_novel = mine.iter().filter(|(_, l)| l.valid && l.novel).count();
        let denom = (reg.sample.len() * annotators) as f64;
        let ratio = |c: usize| if denom == 0.0 { 0.0 } else { c as f64 / denom };
        rows.push(SummaryRow {
            relation: cell.0,
            scorer_id: cell.1.clone(),
            qualified_count: reg.qualified_count,
            sample_size: reg.sample.len(),
            annotators,
            labeled: mine.len(),
            valid,
            valid_and_novel,
            validity: ratio(valid),
            valid_novel_proportion: ratio(valid_and_novel),
        });
    }
    EvaluationSummary {
        rows,
        rejected_labels: rejected,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidCountEstimate {
    pub qualified_count: usize,
    pub validity: f64,
    pub estimate: f64,
}

/// Expected number of valid triples among the qualified ones.
pub fn estimate_valid_count(qualified_count: usize, validity: f64) -> Result<ValidCountEstimate> {
    if !(0.0..=1.0).contains(&validity) {
        return Err(Error::Invalid(format!(
            "validity {validity} outside [0, 1]"
        )));
    }
    Ok(ValidCountEstimate {
        qualified_count,
        validity,
        estimate: qualified_count as f64 * validity,
    })
}
