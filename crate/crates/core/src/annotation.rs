//! Annotation sessions over sampled triples and the durable label log.
//!
//! State lives in two append-only JSON-lines files inside the store directory:
//! `sessions.jsonl` (one record per created session) and `labels.jsonl` (one
//! [`LabelRecord`] per submission). Opening a store replays both; for labels
//! the last record per (session, triple, annotator) wins.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::{AnnotationLabel, SampleRegistration};
use crate::corpus::{RelationId, TripleKey};
use crate::tsv::numbered_lines;

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("sample is empty")]
    EmptySample,
    #[error("sample lists {0} more than once")]
    DuplicateTriple(TripleKey),
    #[error("triple {0} is not part of session `{1}`")]
    ForeignTriple(TripleKey, String),
    #[error("sample item {0} does not match relation {1} / scorer `{2}`")]
    CellMismatch(TripleKey, RelationId, String),
    #[error("annotator id must be non-empty")]
    EmptyAnnotator,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

type Result<T> = std::result::Result<T, AnnotationError>;

/// A sampled triple as written by the sampling stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleItem {
    #[serde(flatten)]
    pub key: TripleKey,
    pub scorer_id: String,
    pub score: f64,
    #[serde(default)]
    pub definition: Option<String>,
    /// Character offsets `[start, end)` of the extracted span in `definition`.
    #[serde(default)]
    pub highlight: Option<(usize, usize)>,
    /// Automated novelty verdict, shown to annotators as advice only.
    #[serde(default)]
    pub automated_novel: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionItem {
    #[serde(flatten)]
    pub sample: SampleItem,
    /// No definition or span was available for this triple.
    pub context_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub session_id: String,
    pub relation: RelationId,
    pub scorer_id: String,
    pub qualified_count: usize,
    pub items: Vec<SessionItem>,
    pub created_at: u64,
}

impl AnnotationSession {
    fn position(&self, key: &TripleKey) -> Option<usize> {
        self.items.iter().position(|i| &i.sample.key == key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub session_id: String,
    pub triple_key: TripleKey,
    pub annotator_id: String,
    pub valid: bool,
    pub novel: bool,
    pub labeled_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Proportions {
    pub labeled: usize,
    pub valid: usize,
    pub valid_and_novel: usize,
    pub validity: f64,
    pub valid_novel_proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub labeled: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item {
        index: usize,
        item: SessionItem,
        relation: RelationId,
        progress: Progress,
    },
    Done {
        progress: Progress,
        summary: Proportions,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAck {
    pub session_id: String,
    pub annotator: Proportions,
    pub pooled: Proportions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub relation: RelationId,
    pub scorer_id: String,
    pub sample_size: usize,
    pub qualified_count: usize,
    pub per_annotator: BTreeMap<String, Proportions>,
    pub pooled: Proportions,
    pub labels: Vec<LabelRecord>,
    /// Ready to pass to [`crate::analysis::summarize_annotations`].
    pub registration: SampleRegistration,
    pub analysis_labels: Vec<AnnotationLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionListing {
    pub session_id: String,
    pub relation: RelationId,
    pub scorer_id: String,
    pub size: usize,
}

/// Definition text and span offsets for triples, used to enrich sessions.
#[derive(Debug, Clone, Default)]
pub struct DefinitionContext {
    entries: HashMap<TripleKey, (String, Option<(usize, usize)>)>,
}

impl DefinitionContext {
    pub fn insert(
        &mut self,
        key: TripleKey,
        definition: String,
        highlight: Option<(usize, usize)>,
    ) {
        self.entries.entry(key).or_insert((definition, highlight));
    }

    pub fn get(&self, key: &TripleKey) -> Option<&(String, Option<(usize, usize)>)> {
        self.entries.get(key)
    }
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Reads sample items, one JSON object per line.
pub fn read_sample_items<R: Read>(reader: R) -> crate::Result<Vec<SampleItem>> {
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| crate::Error::parse(line_no, e.to_string()))?,
        );
    }
    Ok(out)
}

pub struct AnnotationStore {
    dir: PathBuf,
    sessions: BTreeMap<String, AnnotationSession>,
    labels: BTreeMap<(String, TripleKey, String), LabelRecord>,
    session_log: File,
    label_log: File,
}

impl AnnotationStore {
    /// Opens (creating if needed) the store in `dir` and replays its logs.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let sessions_path = dir.join(SESSIONS_FILE);
        let labels_path = dir.join(LABELS_FILE);

        let mut sessions = BTreeMap::new();
        for s in replay::<AnnotationSession>(&sessions_path)? {
            sessions.insert(s.session_id.clone(), s);
        }
        let mut labels = BTreeMap::new();
        for l in replay::<LabelRecord>(&labels_path)? {
            labels.insert(
                (
                    l.session_id.clone(),
                    l.triple_key.clone(),
                    l.annotator_id.clone(),
                ),
                l,
            );
        }
        Ok(AnnotationStore {
            session_log: open_append(&sessions_path)?,
            label_log: open_append(&labels_path)?,
            dir,
            sessions,
            labels,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn sessions(&self) -> Vec<SessionListing> {
        self.sessions
            .values()
            .map(|s| SessionListing {
                session_id: s.session_id.clone(),
                relation: s.relation,
                scorer_id: s.scorer_id.clone(),
                size: s.items.len(),
            })
            .collect()
    }

    pub fn session(&self, id: &str) -> Result<&AnnotationSession> {
        self.sessions
            .get(id)
            .ok_or_else(|| AnnotationError::NotFound(id.to_string()))
    }

    /// Creates and persists a session over `sample`, filling missing context from `context`.
    pub fn create_session(
        &mut self,
        sample: Vec<SampleItem>,
        relation: RelationId,
        scorer_id: &str,
        qualified_count: usize,
        context: Option<&DefinitionContext>,
    ) -> Result<String> {
        if sample.is_empty() {
            return Err(AnnotationError::EmptySample);
        }
        let mut seen = BTreeSet::new();
        for item in &sample {
            if !seen.insert(&item.key) {
                return Err(AnnotationError::DuplicateTriple(item.key.clone()));
            }
            if item.key.relation != relation || item.scorer_id != scorer_id {
                return Err(AnnotationError::CellMismatch(
                    item.key.clone(),
                    relation,
                    scorer_id.to_string(),
                ));
            }
        }
        let items = sample
            .into_iter()
            .map(|mut s| {
                if s.definition.is_none() {
                    if let Some((def, span)) = context.and_then(|c| c.get(&s.key)) {
                        s.definition = Some(def.clone());
                        s.highlight = *span;
                    }
                }
                let context_missing = s.definition.is_none() || s.highlight.is_none();
                SessionItem {
                    sample: s,
                    context_missing,
                }
            })
            .collect();
        let session_id = format!("s{:04}", self.sessions.len() + 1);
        let session = AnnotationSession {
            session_id: session_id.clone(),
            relation,
            scorer_id: scorer_id.to_string(),
            qualified_count,
            items,
            created_at: now_secs(),
        };
        append_record(
            &mut self.session_log,
            &self.dir.join(SESSIONS_FILE),
            &session,
        )?;
        self.sessions.insert(session_id.clone(), session);
        Ok(session_id)
    }

    fn labels_of<'a>(&'a self, session_id: &'a str) -> impl Iterator<Item = &'a LabelRecord> + 'a {
        self.labels
            .iter()
            .filter(move |((s, _, _), _)| s == session_id)
            .map(|(_, l)| l)
    }

    pub fn next_unlabeled(&self, session_id: &str, annotator_id: &str) -> Result<NextItem> {
        let session = self.session(session_id)?;
        let done: BTreeSet<&TripleKey> = self
            .labels_of(session_id)
            .filter(|l| l.annotator_id == annotator_id)
            .map(|l| &l.triple_key)
            .collect();
        let progress = Progress {
            labeled: done.len(),
            total: session.items.len(),
        };
        match session
            .items
            .iter()
            .enumerate()
            .find(|(_, i)| !done.contains(&i.sample.key))
        {
            Some((index, item)) => Ok(NextItem::Item {
                index,
                item: item.clone(),
                relation: session.relation,
                progress,
            }),
            None => Ok(NextItem::Done {
                progress,
                summary: self.proportions(session, Some(annotator_id)),
            }),
        }
    }

    /// Appends a label and syncs it to disk before acknowledging.
    pub fn submit_label(
        &mut self,
        session_id: &str,
        triple_key: TripleKey,
        annotator_id: &str,
        valid: bool,
        novel: bool,
    ) -> Result<LabelAck> {
        if annotator_id.trim().is_empty() {
            return Err(AnnotationError::EmptyAnnotator);
        }
        let session = self.session(session_id)?;
        if session.position(&triple_key).is_none() {
            return Err(AnnotationError::ForeignTriple(
                triple_key,
                session_id.to_string(),
            ));
        }
        let record = LabelRecord {
            session_id: session_id.to_string(),
            triple_key,
            annotator_id: annotator_id.to_string(),
            valid,
            novel,
            labeled_at: now_secs(),
        };
        append_record(&mut self.label_log, &self.dir.join(LABELS_FILE), &record)?;
        self.labels.insert(
            (
                record.session_id.clone(),
                record.triple_key.clone(),
                record.annotator_id.clone(),
            ),
            record,
        );
        let session = self.session(session_id)?;
        Ok(LabelAck {
            session_id: session_id.to_string(),
            annotator: self.proportions(session, Some(annotator_id)),
            pooled: self.proportions(session, None),
        })
    }

    /// Proportions over the sample size for one annotator, or pooled across
    /// annotators weighted by how many labels each gave.
    fn proportions(&self, session: &AnnotationSession, annotator: Option<&str>) -> Proportions {
        let n = session.items.len();
        let mut per: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
        for l in self.labels_of(&session.session_id) {
            if annotator.is_some_and(|a| a != l.annotator_id) {
                continue;
            }
            let e = per.entry(l.annotator_id.as_str()).or_default();
            e.0 += 1;
            e.1 += l.valid as usize;
            e.2 += (l.valid && l.novel) as usize;
        }
        let labeled: usize = per.values().map(|e| e.0).sum();
        let valid: usize = per.values().map(|e| e.1).sum();
        let valid_and_novel: usize = per.values().map(|e| e.2).sum();
        // Σ labeled_a · (count_a / n) / Σ labeled_a, kept in integers until the end.
        let weighted = |pick: fn(&(usize, usize, usize)) -> usize| -> f64 {
            if labeled == 0 || n == 0 {
                return 0.0;
            }
            let num: usize = per.values().map(|e| e.0 * pick(e)).sum();
            num as f64 / (n * labeled) as f64
        };
        Proportions {
            labeled,
            valid,
            valid_and_novel,
            validity: weighted(|e| e.1),
            valid_novel_proportion: weighted(|e| e.2),
        }
    }

    pub fn session_summary(&self, session_id: &str) -> Result<SessionSummary> {
        let session = self.session(session_id)?;
        let labels: Vec<LabelRecord> = {
            let mut v: Vec<LabelRecord> = self.labels_of(session_id).cloned().collect();
            v.sort_by_key(|l| (session.position(&l.triple_key), l.annotator_id.clone()));
            v
        };
        let annotators: BTreeSet<&str> = labels.iter().map(|l| l.annotator_id.as_str()).collect();
        let per_annotator = annotators
            .iter()
            .map(|a| (a.to_string(), self.proportions(session, Some(a))))
            .collect();
        let analysis_labels = labels
            .iter()
            .map(|l| AnnotationLabel {
                key: l.triple_key.clone(),
                scorer_id: session.scorer_id.clone(),
                annotator: Some(l.annotator_id.clone()),
                valid: l.valid,
                novel: l.novel,
            })
            .collect();
        Ok(SessionSummary {
            session_id: session_id.to_string(),
            relation: session.relation,
            scorer_id: session.scorer_id.clone(),
            sample_size: session.items.len(),
            qualified_count: session.qualified_count,
            per_annotator,
            pooled: self.proportions(session, None),
            registration: SampleRegistration {
                relation: session.relation,
                scorer_id: session.scorer_id.clone(),
                qualified_count: session.qualified_count,
                sample: session.items.iter().map(|i| i.sample.key.clone()).collect(),
            },
            analysis_labels,
            labels,
        })
    }
}

/// Registrations and labels from the logs in `dir`, without opening them for writing.
pub fn snapshot(dir: &Path) -> Result<(Vec<SampleRegistration>, Vec<AnnotationLabel>)> {
    let sessions: Vec<AnnotationSession> = replay(&dir.join(SESSIONS_FILE))?;
    let mut latest: BTreeMap<(String, TripleKey, String), LabelRecord> = BTreeMap::new();
    for l in replay::<LabelRecord>(&dir.join(LABELS_FILE))? {
        latest.insert(
            (
                l.session_id.clone(),
                l.triple_key.clone(),
                l.annotator_id.clone(),
            ),
            l,
        );
    }
    let mut regs = Vec::new();
    let mut labels = Vec::new();
    for s in &sessions {
        regs.push(SampleRegistration {
            relation: s.relation,
            scorer_id: s.scorer_id.clone(),
            qualified_count: s.qualified_count,
            sample: s.items.iter().map(|i| i.sample.key.clone()).collect(),
        });
        labels.extend(
            latest
                .values()
                .filter(|l| l.session_id == s.session_id)
                .map(|l| AnnotationLabel {
                    key: l.triple_key.clone(),
                    scorer_id: s.scorer_id.clone(),
                    annotator: Some(l.annotator_id.clone()),
                    valid: l.valid,
                    novel: l.novel,
                }),
        );
    }
    Ok((regs, labels))
}

fn io_err(path: &Path, source: std::io::Error) -> AnnotationError {
    AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open_append(path: &Path) -> Result<File> {
    let mut f = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    // A crash mid-write can leave a partial last line; start the next record on a fresh line.
    let len = f.metadata().map_err(|e| io_err(path, e))?.len();
    if len > 0 {
        let mut last = [0u8; 1];
        f.seek(SeekFrom::Start(len - 1))
            .map_err(|e| io_err(path, e))?;
        f.read_exact(&mut last).map_err(|e| io_err(path, e))?;
        if last[0] != b'\n' {
            f.write_all(b"\n").map_err(|e| io_err(path, e))?;
        }
    }
    Ok(f)
}

fn append_record<T: Serialize>(file: &mut File, path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record).expect("records serialise");
    line.push(b'\n');
    file.write_all(&line).map_err(|e| io_err(path, e))?;
    file.sync_data().map_err(|e| io_err(path, e))
}

/// Parses a log, tolerating lines cut short by a crash (they never parse and
/// were never acknowledged).
fn replay<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut out = Vec::new();
    let lines: Vec<&str> = text.split('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(rec) => out.push(rec),
            Err(e) => {
                let unterminated =
                    i + 1 == lines.len() || lines[i + 1..].iter().all(|l| l.trim().is_empty());
                let cut_short = e.is_eof() || (unterminated && !text.ends_with('\n'));
                if cut_short {
                    log::warn!(
                        "{}: ignoring truncated record at line {}",
                        path.display(),
                        i + 1
                    );
                    continue;
                }
                return Err(AnnotationError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}
