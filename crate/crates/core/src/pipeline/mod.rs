//! Stage orchestration over a run directory.
//!
//! Each stage owns one subdirectory of the run directory and records a
//! `stamp.json` holding a fingerprint of everything it read (configuration,
//! input file digests, upstream outputs) plus digests of what it wrote. A stage
//! whose fingerprint and outputs are unchanged is skipped. `manifest.json` at
//! the top level summarises the run. The directory is held with `run.lock` for
//! the duration of a run.

mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    ConfigError, Inputs, MiningConfig, NegativesConfig, NoveltyConfig, PipelineConfig,
    SamplingConfig, ScorerConfig, ScorerKind, SelectionConfig, SelectionMode, ENV_PREFIX,
};
pub use report::{emit_report, REPORT_FILE};
pub use stages::{
    definition_context, read_registrations, sample_file_name, QualifiedRow, ScorerInfo,
};

use crate::corpus::RelationId;
use crate::tsv::{file_digest, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "run.lock";
pub const STAMP_FILE: &str = "stamp.json";
/// Directory, inside the run directory, that holds the annotation logs.
pub const ANNOTATIONS_DIR: &str = "annotations";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Tag,
    MinePatterns,
    Extract,
    Score,
    Negatives,
    Novelty,
    Select,
    Sample,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Tag,
        Stage::MinePatterns,
        Stage::Extract,
        Stage::Score,
        Stage::Negatives,
        Stage::Novelty,
        Stage::Select,
        Stage::Sample,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Tag => "tag",
            Stage::MinePatterns => "mine-patterns",
            Stage::Extract => "extract",
            Stage::Score => "score",
            Stage::Negatives => "negatives",
            Stage::Novelty => "novelty",
            Stage::Select => "select",
            Stage::Sample => "sample",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Ingest => &[],
            Tag => &[Ingest],
            MinePatterns => &[Ingest],
            Extract => &[Ingest, Tag, MinePatterns],
            Score => &[Extract],
            Negatives => &[Ingest],
            Novelty => &[Ingest, Extract],
            Select => &[Score],
            Sample => &[Ingest, Tag, Extract, Novelty, Select],
            Analyze => &[Score, Select, Sample],
            Report => &[
                Ingest,
                MinePatterns,
                Extract,
                Score,
                Novelty,
                Select,
                Analyze,
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("run directory {0} is locked by another process ({1})")]
    Locked(PathBuf, String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 1 for configuration problems, 2 for everything that happens once stages run.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stages to run; upstream stages that are stale run too. `None` runs all.
    pub stages: Option<Vec<Stage>>,
    /// Rerun the requested stages even when up to date.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub stages: Vec<(Stage, StageStatus)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    fingerprint: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub relations: Vec<RelationId>,
    pub inputs: BTreeMap<String, InputDigest>,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Candidates per relation, present once extraction has run.
    pub candidate_counts: Option<BTreeMap<RelationId, usize>>,
}

impl Manifest {
    pub fn read(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path,
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .unwrap_or_default()
                        .trim()
                        .to_string();
                    if !holder_alive(&holder) {
                        log::warn!("removing stale lock held by pid {holder}");
                        let _ = fs::remove_file(&path);
                        continue;
                    }
                    return Err(PipelineError::Locked(
                        run_dir.to_path_buf(),
                        format!("pid {holder}"),
                    ));
                }
                Err(source) => return Err(PipelineError::Io { path, source }),
            }
        }
        Err(PipelineError::Locked(
            run_dir.to_path_buf(),
            "lock could not be taken".into(),
        ))
    }
}

fn holder_alive(pid: &str) -> bool {
    let Ok(pid) = pid.parse::<u32>() else {
        return false;
    };
    let proc = Path::new("/proc");
    if !proc.is_dir() {
        return true;
    }
    proc.join(pid.to_string()).exists()
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub(crate) type StageResult<T> = Result<T, String>;

/// Runs the requested stages (and any stale upstream stages) in order.
pub fn run_pipeline(
    config: &PipelineConfig,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(|source| PipelineError::Io {
        path: run_dir.to_path_buf(),
        source,
    })?;
    let _lock = RunLock::acquire(run_dir)?;

    let inputs = digest_inputs(config)?;
    let requested: Vec<Stage> = opts.stages.clone().unwrap_or_else(|| Stage::ALL.to_vec());
    let mut wanted = std::collections::BTreeSet::new();
    let mut stack = requested.clone();
    while let Some(s) = stack.pop() {
        if wanted.insert(s) {
            stack.extend_from_slice(s.upstream());
        }
    }

    let ctx = stages::Ctx { config, run_dir };
    let mut summary = RunSummary { stages: Vec::new() };
    for stage in Stage::ALL.into_iter().filter(|s| wanted.contains(s)) {
        let fingerprint = stage_fingerprint(stage, stage_scope(stage, config, &inputs), run_dir)
            .map_err(|message| PipelineError::Stage { stage, message })?;
        let forced = opts.force && requested.contains(&stage);
        if !forced && is_fresh(run_dir, stage, &fingerprint) {
            log::info!("{stage}: up to date");
            summary.stages.push((stage, StageStatus::Skipped));
            continue;
        }
        log::info!("{stage}: running");
        let dir = run_dir.join(stage.name());
        reset_dir(&dir).map_err(|message| PipelineError::Stage { stage, message })?;
        stages::run(stage, &ctx).map_err(|message| PipelineError::Stage { stage, message })?;
        let outputs =
            digest_dir(&dir).map_err(|message| PipelineError::Stage { stage, message })?;
        let stamp = Stamp {
            stage,
            fingerprint,
            outputs,
        };
        stages::write_json(&dir.join(STAMP_FILE), &stamp)
            .map_err(|message| PipelineError::Stage { stage, message })?;
        summary.stages.push((stage, StageStatus::Ran));
    }

    write_manifest(config, run_dir, inputs)?;
    Ok(summary)
}

fn digest_inputs(config: &PipelineConfig) -> Result<BTreeMap<String, InputDigest>, PipelineError> {
    let mut out = BTreeMap::new();
    for (name, path) in config.input_files() {
        let sha256 = file_digest(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.insert(name, InputDigest { file, sha256 });
    }
    Ok(out)
}

/// The configuration values and input files a stage reads, as canonical JSON.
/// Settings a stage does not read never force it to rerun.
fn stage_scope(
    stage: Stage,
    config: &PipelineConfig,
    inputs: &BTreeMap<String, InputDigest>,
) -> String {
    let i = &config.inputs;
    let (values, files): (serde_json::Value, &[&str]) = match stage {
        Stage::Ingest => (
            json!([
                i.kg_language,
                i.kg_metadata_contains,
                i.restrict_to_kg_terms
            ]),
            &["definitions", "kg_dump", "training"],
        ),
        Stage::Tag => (json!(null), &["pretagged", "lexicon", "suffixes"]),
        Stage::MinePatterns => (
            json!([config.mining, config.relations()]),
            &["patterns", "lexicon", "suffixes"],
        ),
        Stage::Extract => (json!(config.mining.side), &[]),
        Stage::Score => (json!(config.scorers), &[]),
        Stage::Negatives => (json!([config.seed, config.negatives]), &[]),
        Stage::Novelty => (
            json!([config.novelty, config.scorers]),
            &["stopwords", "lemmas"],
        ),
        Stage::Select => (json!([config.scorers, config.selection]), &[]),
        Stage::Sample => (
            json!([
                config.seed,
                config.sampling,
                config.novelty.relation_agnostic
            ]),
            &[],
        ),
        Stage::Analyze | Stage::Report => (json!(null), &[]),
    };
    let prefixed: &[&str] = match stage {
        Stage::Score | Stage::Novelty => &["scorer.", "reference."],
        _ => &[],
    };
    let digests: BTreeMap<&str, &str> = inputs
        .iter()
        .filter(|(name, _)| {
            files.contains(&name.as_str()) || prefixed.iter().any(|p| name.starts_with(p))
        })
        .map(|(name, d)| (name.as_str(), d.sha256.as_str()))
        .collect();
    json!([values, digests]).to_string()
}

fn stage_fingerprint(stage: Stage, scope: String, run_dir: &Path) -> StageResult<String> {
    let mut parts = vec![stage.name().to_string(), scope];
    for up in stage.upstream() {
        let stamp = read_stamp(run_dir, *up)
            .ok_or_else(|| format!("upstream stage `{up}` has not completed"))?;
        for (file, digest) in &stamp.outputs {
            parts.push(format!("{up}/{file}={digest}"));
        }
    }
    if stage == Stage::Analyze {
        let ann = run_dir.join(ANNOTATIONS_DIR);
        for file in [
            crate::annotation::SESSIONS_FILE,
            crate::annotation::LABELS_FILE,
        ] {
            let p = ann.join(file);
            if p.is_file() {
                let d = file_digest(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                parts.push(format!("{ANNOTATIONS_DIR}/{file}={d}"));
            }
        }
    }
    Ok(sha256_hex(parts.join("\n").as_bytes()))
}

fn read_stamp(run_dir: &Path, stage: Stage) -> Option<Stamp> {
    let text = fs::read_to_string(run_dir.join(stage.name()).join(STAMP_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn is_fresh(run_dir: &Path, stage: Stage, fingerprint: &str) -> bool {
    let Some(stamp) = read_stamp(run_dir, stage) else {
        return false;
    };
    if stamp.fingerprint != fingerprint {
        return false;
    }
    match digest_dir(&run_dir.join(stage.name())) {
        Ok(current) => current == stamp.outputs,
        Err(_) => false,
    }
}

fn reset_dir(dir: &Path) -> StageResult<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| format!("cannot clear {}: {e}", dir.display()))?;
    }
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
}

/// Digests of every regular file in `dir` except the stamp, keyed by name.
fn digest_dir(dir: &Path) -> StageResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    for entry in entries {
        let entry = entry.map_err(|e| format!("{}: {e}", dir.display()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == STAMP_FILE || !entry.path().is_file() {
            continue;
        }
        let d =
            file_digest(&entry.path()).map_err(|e| format!("{}: {e}", entry.path().display()))?;
        out.insert(name, d);
    }
    Ok(out)
}

fn write_manifest(
    config: &PipelineConfig,
    run_dir: &Path,
    inputs: BTreeMap<String, InputDigest>,
) -> Result<(), PipelineError> {
    let stages = Stage::ALL
        .into_iter()
        .filter_map(|s| {
            read_stamp(run_dir, s).map(|st| {
                (
                    s,
                    StageRecord {
                        fingerprint: st.fingerprint,
                        outputs: st.outputs,
                    },
                )
            })
        })
        .collect();
    let candidate_counts = stages::read_candidate_counts(run_dir).ok();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        relations: config.relations(),
        inputs,
        stages,
        candidate_counts,
    };
    let path = run_dir.join(MANIFEST_FILE);
    stages::write_json(&path, &manifest).map_err(|message| PipelineError::Io {
        path,
        source: std::io::Error::other(message),
    })
}
