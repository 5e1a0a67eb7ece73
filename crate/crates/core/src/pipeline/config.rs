//! Run configuration: one TOML file, overridable through `DEFMINE_` variables.
//!
//! ```toml
//! seed = 7
//! relations = ["AtLocation", "CapableOf"]   # optional subset
//!
//! [inputs]
//! definitions = "definitions.jsonl"          # required; .tsv/.txt read as TSV
//! kg_dump = "conceptnet.tsv"                 # reference graph, mined for patterns
//! training = "train.tsv"                     # positives for negatives and novelty
//!
//! [mining]
//! k = 15
//!
//! [[scorers]]
//! id = "bilinear"
//! kind = "bilinear"
//! path = "model.txt"
//! ```
//!
//! Environment overrides use `DEFMINE_<SECTION>__<KEY>`, e.g.
//! `DEFMINE_SELECTION__THETA=0.8` or `DEFMINE_SEED=3`. Values are read as TOML
//! literals, falling back to plain strings; `DEFMINE_RELATIONS` also accepts a
//! comma-separated list. Relative paths resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::RelationId;
use crate::patterns::{Side, DEFAULT_MAX_PATTERN_LEN, DEFAULT_TOP_K};
use crate::scoring::{SelectionCriterion, DEFAULT_SAMPLE_SIZE, DEFAULT_THRESHOLD, DEFAULT_TOP_N};
use crate::tsv::sha256_hex;

pub const ENV_PREFIX: &str = "DEFMINE_";

const LIST_KEYS: &[&str] = &["relations", "novelty.references"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Syntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<Vec<RelationId>>,
    pub inputs: Inputs,
    #[serde(default)]
    pub mining: MiningConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub negatives: NegativesConfig,
    #[serde(default)]
    pub novelty: NoveltyConfig,
    #[serde(default)]
    pub scorers: Vec<ScorerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub definitions: PathBuf,
    #[serde(default)]
    pub kg_dump: Option<PathBuf>,
    #[serde(default = "default_language")]
    pub kg_language: String,
    /// Keep only dump rows whose metadata column contains this substring.
    #[serde(default)]
    pub kg_metadata_contains: Option<String>,
    #[serde(default)]
    pub training: Option<PathBuf>,
    #[serde(default)]
    pub pretagged: Option<PathBuf>,
    /// Extra `word<TAB>tag` entries on top of the bundled lexicon.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Replaces the bundled suffix rules.
    #[serde(default)]
    pub suffixes: Option<PathBuf>,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
    #[serde(default)]
    pub lemmas: Option<PathBuf>,
    /// Keep only definitions of terms that occur in the reference graph.
    #[serde(default = "yes")]
    pub restrict_to_kg_terms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub side: Side,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Use this pattern table instead of mining one.
    #[serde(default)]
    pub patterns: Option<PathBuf>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: DEFAULT_TOP_K,
            side: Side::Tail,
            max_len: DEFAULT_MAX_PATTERN_LEN,
            patterns: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            theta: DEFAULT_THRESHOLD,
            top_n: DEFAULT_TOP_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_sample_n")]
    pub n: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n: DEFAULT_SAMPLE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativesConfig {
    /// Number of negatives to draw from the training triples; 0 disables the stage.
    #[serde(default)]
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoveltyConfig {
    /// Unset compares both ways; `true` or `false` picks one.
    #[serde(default)]
    pub relation_agnostic: Option<bool>,
    /// Further reference triple files (`relation<TAB>head<TAB>tail<TAB>extra`).
    #[serde(default)]
    pub references: Vec<PathBuf>,
    /// Report the embedding-distance diagnostic using the first bilinear scorer.
    #[serde(default)]
    pub embedding_proxy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Bilinear,
    Pmi,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Threshold,
    TopN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub id: String,
    pub kind: ScorerKind,
    /// Model file for `bilinear`, score file for `pmi` and `external`.
    pub path: PathBuf,
    /// Only meaningful for `external`; defaults to true there.
    #[serde(default)]
    pub calibrated: Option<bool>,
    /// Defaults to a threshold for calibrated scorers and top-N otherwise.
    #[serde(default)]
    pub selection: Option<SelectionMode>,
}

impl ScorerConfig {
    pub fn is_calibrated(&self) -> bool {
        match self.kind {
            ScorerKind::Bilinear => true,
            ScorerKind::Pmi => false,
            ScorerKind::External => self.calibrated.unwrap_or(true),
        }
    }
}

fn default_language() -> String {
    "en".into()
}
fn yes() -> bool {
    true
}
fn default_k() -> usize {
    DEFAULT_TOP_K
}
fn default_max_len() -> usize {
    DEFAULT_MAX_PATTERN_LEN
}
fn default_theta() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_top_n() -> usize {
    DEFAULT_TOP_N
}
fn default_sample_n() -> usize {
    DEFAULT_SAMPLE_SIZE
}

impl PipelineConfig {
    /// Reads `path`, applies overrides from the process environment and
    /// resolves relative paths. Does not validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env<I>(path: &Path, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, env)
    }

    pub fn from_toml_str<I>(text: &str, base: &Path, env: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut table, &key[ENV_PREFIX.len()..], &raw)?;
        }
        let mut config: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        fix(&mut i.definitions);
        for p in [
            &mut i.kg_dump,
            &mut i.training,
            &mut i.pretagged,
            &mut i.lexicon,
            &mut i.suffixes,
            &mut i.stopwords,
            &mut i.lemmas,
            &mut self.mining.patterns,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.novelty.references.iter_mut().for_each(fix);
        self.scorers.iter_mut().for_each(|s| fix(&mut s.path));
    }

    /// Every referenced file with a stable name, in a fixed order.
    pub fn input_files(&self) -> Vec<(String, &Path)> {
        let i = &self.inputs;
        let mut out = vec![("definitions".to_string(), i.definitions.as_path())];
        let optional = [
            ("kg_dump", &i.kg_dump),
            ("training", &i.training),
            ("pretagged", &i.pretagged),
            ("lexicon", &i.lexicon),
            ("suffixes", &i.suffixes),
            ("stopwords", &i.stopwords),
            ("lemmas", &i.lemmas),
            ("patterns", &self.mining.patterns),
        ];
        for (name, p) in optional {
            if let Some(p) = p {
                out.push((name.to_string(), p.as_path()));
            }
        }
        for (n, p) in self.novelty.references.iter().enumerate() {
            out.push((format!("reference.{n}"), p.as_path()));
        }
        for s in &self.scorers {
            out.push((format!("scorer.{}", s.id), s.path.as_path()));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let theta = self.selection.theta;
        if !theta.is_finite() || !(0.0..=1.0).contains(&theta) {
            return bad(format!("selection.theta = {theta} is outside [0, 1]"));
        }
        if self.mining.max_len == 0 {
            return bad("mining.max_len must be at least 1".into());
        }
        if self.negatives.n > 0 && self.inputs.training.is_none() {
            return bad("negatives.n > 0 needs inputs.training".into());
        }
        if self.novelty.embedding_proxy
            && !self.scorers.iter().any(|s| s.kind == ScorerKind::Bilinear)
        {
            return bad("novelty.embedding_proxy needs a bilinear scorer".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.scorers {
            let safe = !s.id.is_empty()
                && s.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
            if !safe {
                return bad(format!(
                    "scorer id `{}` must be non-empty and use only [A-Za-z0-9._-]",
                    s.id
                ));
            }
            if !ids.insert(s.id.as_str()) {
                return bad(format!("scorer id `{}` appears twice", s.id));
            }
            if s.kind == ScorerKind::Pmi && s.calibrated == Some(true) {
                return bad(format!("scorer `{}`: PMI scores are not calibrated", s.id));
            }
            if s.kind == ScorerKind::Bilinear && s.calibrated == Some(false) {
                return bad(format!(
                    "scorer `{}`: bilinear scores are always calibrated",
                    s.id
                ));
            }
        }
        let missing: Vec<String> = self
            .input_files()
            .into_iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(name, p)| format!("{name} ({})", p.display()))
            .collect();
        if !missing.is_empty() {
            return bad(format!("missing input files: {}", missing.join(", ")));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    /// The configured relation subset, or all relations.
    pub fn relations(&self) -> Vec<RelationId> {
        match &self.relations {
            Some(r) => {
                let mut r = r.clone();
                r.sort();
                r.dedup();
                r
            }
            None => RelationId::ALL.to_vec(),
        }
    }

    pub fn criterion(&self, scorer: &ScorerConfig) -> SelectionCriterion {
        let mode = scorer.selection.unwrap_or(if scorer.is_calibrated() {
            SelectionMode::Threshold
        } else {
            SelectionMode::TopN
        });
        match mode {
            SelectionMode::Threshold => SelectionCriterion::Threshold(self.selection.theta),
            SelectionMode::TopN => SelectionCriterion::TopN(self.selection.top_n),
        }
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(ConfigError::Invalid(format!(
            "malformed override {ENV_PREFIX}{key}"
        )));
    }
    let dotted = path.join(".");
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) if LIST_KEYS.contains(&dotted.as_str()) => toml::Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| toml::Value::String(s.to_string()))
                .collect(),
        ),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            ConfigError::Invalid(format!("{ENV_PREFIX}{key}: `{p}` is not a section"))
        })?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
