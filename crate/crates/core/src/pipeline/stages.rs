//! Individual stages. Each reads upstream outputs only through their files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, ScorerConfig, ScorerKind};
use super::{Stage, StageResult, ANNOTATIONS_DIR};
use crate::analysis::{
    estimate_valid_count, histogram, kendall_tau, summarize_annotations, EvaluationSummary,
    SampleRegistration, DEFAULT_BINS,
};
use crate::annotation::{self, SampleItem};
use crate::corpus::{
    load_definitions, load_training_triples, parse_kg_dump, read_definitions, read_triples,
    write_definitions, write_triples, DefinitionFormat, DefinitionStats, KgFilter, RelationId,
    TermDefinition, Triple, TripleKey,
};
use crate::extract::{
    extract_candidates, read_candidates_jsonl, write_candidates_jsonl, write_candidates_tsv,
    Candidates,
};
use crate::novelty::{
    build_reference_index, embedding_novelty_distance, is_novel, rate_of, NormalizationPipeline,
    ReferenceIndex,
};
use crate::patterns::{mine_patterns, read_table, select_top_k, write_table, PatternTable};
use crate::scoring::{
    bilinear_score, generate_negative_triples, ingest_external_scores, rank_candidates,
    ranking_order, read_scores, sample_for_evaluation, select_qualified, write_negatives,
    write_scores, BilinearModel, IngestRejects, ScoreRecord, SelectionCriterion,
};
use crate::tagging::{
    load_pretagged, read_tag_entries, write_tagged, DefinitionTagger, TagLexicon, TaggedToken,
};
use crate::tsv::{stable_hash64, RowCounts};

pub(super) const DEFINITIONS: &str = "definitions.tsv";
pub(super) const KG: &str = "kg.tsv";
pub(super) const TRAINING: &str = "training.tsv";
pub(super) const STATS: &str = "stats.json";
pub(super) const TAGGED: &str = "tagged.conll";
pub(super) const PATTERNS_ALL: &str = "patterns_all.tsv";
pub(super) const PATTERNS: &str = "patterns.tsv";
pub(super) const CANDIDATES_JSONL: &str = "candidates.jsonl";
pub(super) const CANDIDATES_TSV: &str = "candidates.tsv";
pub(super) const COUNTS_JSON: &str = "counts.json";
pub(super) const COUNTS_CSV: &str = "counts.csv";
pub(super) const SCORERS: &str = "scorers.json";
pub(super) const NEGATIVES: &str = "negatives.tsv";
pub(super) const VERDICTS: &str = "verdicts.jsonl";
pub(super) const RATES_CSV: &str = "rates.csv";
pub(super) const NOVELTY_SUMMARY: &str = "summary.json";
pub(super) const EMBEDDING_CSV: &str = "embedding_distance.csv";
pub(super) const QUALIFIED_JSON: &str = "qualified.json";
pub(super) const QUALIFIED_CSV: &str = "qualified.csv";
pub(super) const REGISTRATIONS: &str = "registrations.json";
pub(super) const TAU_CSV: &str = "tau.csv";
pub(super) const SUMMARY_CSV: &str = "summary.csv";
pub(super) const ESTIMATES_CSV: &str = "estimates.csv";
pub(super) const ANALYSIS_JSON: &str = "analysis.json";

pub(crate) struct Ctx<'a> {
    pub config: &'a PipelineConfig,
    pub run_dir: &'a Path,
}

impl Ctx<'_> {
    pub fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.run_dir.join(stage.name()).join(file)
    }
}

pub(super) fn run(stage: Stage, ctx: &Ctx) -> StageResult<()> {
    match stage {
        Stage::Ingest => ingest(ctx),
        Stage::Tag => tag(ctx),
        Stage::MinePatterns => mine(ctx),
        Stage::Extract => extract(ctx),
        Stage::Score => score(ctx),
        Stage::Negatives => negatives(ctx),
        Stage::Novelty => novelty(ctx),
        Stage::Select => select(ctx),
        Stage::Sample => sample(ctx),
        Stage::Analyze => analyze(ctx),
        Stage::Report => super::report::write_report(ctx),
    }
}

// ---------------------------------------------------------------------------
// file helpers

fn reader(path: &Path) -> StageResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| format!("cannot open {}: {e}", path.display()))
}

pub(super) fn read_with<T>(
    path: &Path,
    f: impl FnOnce(BufReader<File>) -> crate::Result<T>,
) -> StageResult<T> {
    f(reader(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

/// Writes through a temporary file and renames it into place.
pub(super) fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> crate::Result<()>,
) -> StageResult<()> {
    let tmp = path.with_extension("partial");
    let ctx = |e: &dyn std::fmt::Display| format!("cannot write {}: {e}", path.display());
    let file = File::create(&tmp).map_err(|e| ctx(&e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| ctx(&e))?;
    w.flush().map_err(|e| ctx(&e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| ctx(&e))
}

pub(super) fn write_string(path: &Path, text: &str) -> StageResult<()> {
    write_with(path, |w| Ok(w.write_all(text.as_bytes())?))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> StageResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    write_string(path, &text)
}

pub(super) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> StageResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn stream_seed(seed: u64, label: &str) -> u64 {
    stable_hash64(&format!("{seed}:{label}"))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct IngestStats {
    pub definitions: DefinitionStats,
    pub whitelist_terms: Option<usize>,
    pub kg: Option<RowCounts>,
    pub training: Option<RowCounts>,
}

fn ingest(ctx: &Ctx) -> StageResult<()> {
    let inputs = &ctx.config.inputs;
    let kg = match &inputs.kg_dump {
        Some(path) => {
            let filter = KgFilter {
                language: inputs.kg_language.clone(),
                metadata_contains: inputs.kg_metadata_contains.clone(),
            };
            Some(read_with(path, |r| {
                parse_kg_dump(r, &filter, &file_label(path))
            })?)
        }
        None => None,
    };
    let training = match &inputs.training {
        Some(path) => Some(read_with(path, |r| {
            load_training_triples(r, &file_label(path))
        })?),
        None => None,
    };

    let whitelist: Option<HashSet<String>> = match (&kg, inputs.restrict_to_kg_terms) {
        (Some(kg), true) => Some(
            kg.items
                .iter()
                .flat_map(|t| [t.head_normalized(), t.tail_normalized()])
                .collect(),
        ),
        _ => None,
    };
    let format = DefinitionFormat::from_path(&inputs.definitions);
    let (defs, def_stats) = read_with(&inputs.definitions, |r| {
        load_definitions(r, format, whitelist.as_ref())
    })?;

    write_with(&ctx.path(Stage::Ingest, DEFINITIONS), |w| {
        write_definitions(w, &defs)
    })?;
    if let Some(kg) = &kg {
        write_with(&ctx.path(Stage::Ingest, KG), |w| {
            write_triples(w, &kg.items)
        })?;
    }
    if let Some(tr) = &training {
        write_with(&ctx.path(Stage::Ingest, TRAINING), |w| {
            write_triples(w, &tr.items)
        })?;
    }
    write_json(
        &ctx.path(Stage::Ingest, STATS),
        &IngestStats {
            definitions: def_stats,
            whitelist_terms: whitelist.as_ref().map(HashSet::len),
            kg: kg.map(|k| k.counts),
            training: training.map(|t| t.counts),
        },
    )
}

fn read_ingested_definitions(ctx: &Ctx) -> StageResult<Vec<TermDefinition>> {
    read_with(&ctx.path(Stage::Ingest, DEFINITIONS), read_definitions)
}

fn read_ingested_triples(ctx: &Ctx, file: &str) -> StageResult<Option<Vec<Triple>>> {
    let path = ctx.path(Stage::Ingest, file);
    if !path.exists() {
        return Ok(None);
    }
    read_with(&path, read_triples).map(Some)
}

// ---------------------------------------------------------------------------
// tag

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TagStats {
    definitions: usize,
    pretagged: usize,
    lexicon: usize,
}

fn build_lexicon(config: &PipelineConfig) -> StageResult<TagLexicon> {
    let mut lex = TagLexicon::starter();
    if let Some(p) = &config.inputs.lexicon {
        lex.extend(read_with(p, read_tag_entries)?);
    }
    if let Some(p) = &config.inputs.suffixes {
        lex.set_suffix_rules(read_with(p, read_tag_entries)?);
    }
    Ok(lex)
}

fn tag(ctx: &Ctx) -> StageResult<()> {
    let defs = read_ingested_definitions(ctx)?;
    let lexicon = build_lexicon(ctx.config)?;
    let pretagged = match &ctx.config.inputs.pretagged {
        Some(p) => Some(read_with(p, load_pretagged)?),
        None => None,
    };
    let tagger = DefinitionTagger {
        pretagged: pretagged.as_ref(),
        lexicon: &lexicon,
    };
    let tagged: Vec<(String, Vec<TaggedToken>)> = defs
        .iter()
        .map(|d| {
            (
                d.source_id.clone(),
                tagger.tag_definition(&d.source_id, &d.definition_text),
            )
        })
        .collect();
    let from_pretagged = pretagged
        .as_ref()
        .map(|p| defs.iter().filter(|d| p.contains_key(&d.source_id)).count())
        .unwrap_or(0);
    write_with(&ctx.path(Stage::Tag, TAGGED), |w| {
        write_tagged(w, tagged.iter().map(|(id, t)| (id.as_str(), t.as_slice())))
    })?;
    write_json(
        &ctx.path(Stage::Tag, STATS),
        &TagStats {
            definitions: defs.len(),
            pretagged: from_pretagged,
            lexicon: defs.len() - from_pretagged,
        },
    )
}

fn read_tagged(ctx: &Ctx) -> StageResult<BTreeMap<String, Vec<TaggedToken>>> {
    read_with(&ctx.path(Stage::Tag, TAGGED), load_pretagged)
}

// ---------------------------------------------------------------------------
// mine-patterns

fn mine(ctx: &Ctx) -> StageResult<()> {
    let m = &ctx.config.mining;
    let mut table = match &m.patterns {
        Some(p) => read_with(p, |r| read_table(r, m.side))?,
        None => {
            let source = match read_ingested_triples(ctx, KG)? {
                Some(t) => t,
                None => read_ingested_triples(ctx, TRAINING)?.ok_or(
                    "nothing to mine patterns from: set inputs.kg_dump, inputs.training or mining.patterns",
                )?,
            };
            let lexicon = build_lexicon(ctx.config)?;
            mine_patterns(&source, &lexicon, m.side, m.max_len)
        }
    };
    table.restrict(&ctx.config.relations());
    let selected = select_top_k(&table, m.k);
    write_with(&ctx.path(Stage::MinePatterns, PATTERNS_ALL), |w| {
        write_table(w, &table)
    })?;
    write_with(&ctx.path(Stage::MinePatterns, PATTERNS), |w| {
        write_table(w, &selected)
    })
}

pub(super) fn read_selected_patterns(ctx: &Ctx) -> StageResult<PatternTable> {
    read_with(&ctx.path(Stage::MinePatterns, PATTERNS), |r| {
        read_table(r, ctx.config.mining.side)
    })
}

// ---------------------------------------------------------------------------
// extract

fn extract(ctx: &Ctx) -> StageResult<()> {
    let defs = read_ingested_definitions(ctx)?;
    let tagged = read_tagged(ctx)?;
    let patterns = read_selected_patterns(ctx)?;
    let candidates = extract_candidates(&defs, &tagged, &patterns).map_err(|e| e.to_string())?;

    let counts: BTreeMap<RelationId, usize> = ctx
        .config
        .relations()
        .into_iter()
        .map(|r| (r, candidates.get(&r).map_or(0, Vec::len)))
        .collect();
    write_with(&ctx.path(Stage::Extract, CANDIDATES_JSONL), |w| {
        write_candidates_jsonl(w, &candidates)
    })?;
    write_with(&ctx.path(Stage::Extract, CANDIDATES_TSV), |w| {
        write_candidates_tsv(w, &candidates)
    })?;
    write_json(&ctx.path(Stage::Extract, COUNTS_JSON), &counts)?;
    let mut csv = String::from("relation,candidates\n");
    for (r, n) in &counts {
        csv.push_str(&format!("{r},{n}\n"));
    }
    write_string(&ctx.path(Stage::Extract, COUNTS_CSV), &csv)
}

pub(super) fn read_candidates(ctx: &Ctx) -> StageResult<Candidates> {
    read_with(
        &ctx.path(Stage::Extract, CANDIDATES_JSONL),
        read_candidates_jsonl,
    )
}

pub(crate) fn read_candidate_counts(run_dir: &Path) -> StageResult<BTreeMap<RelationId, usize>> {
    read_json(&run_dir.join(Stage::Extract.name()).join(COUNTS_JSON))
}

// ---------------------------------------------------------------------------
// score

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub id: String,
    pub kind: ScorerKind,
    pub calibrated: bool,
    pub scored: usize,
    /// Candidates the scorer gave no score to.
    pub unscored: usize,
    /// Score rows that named no known candidate.
    pub unmatched: usize,
    pub duplicates: usize,
    pub rejects: IngestRejects,
    /// Candidates with a head or tail of only unknown words, per relation.
    pub all_oov: BTreeMap<RelationId, usize>,
}

fn score_file(id: &str) -> String {
    format!("{id}.tsv")
}

fn score(ctx: &Ctx) -> StageResult<()> {
    let candidates = read_candidates(ctx)?;
    let mut infos = Vec::new();
    for scorer in &ctx.config.scorers {
        let (records, info) = run_scorer(scorer, &candidates)?;
        write_with(&ctx.path(Stage::Score, &score_file(&scorer.id)), |w| {
            write_scores(w, &records)
        })?;
        infos.push(info);
    }
    write_json(&ctx.path(Stage::Score, SCORERS), &infos)
}

fn run_scorer(
    scorer: &ScorerConfig,
    candidates: &Candidates,
) -> StageResult<(Vec<ScoreRecord>, ScorerInfo)> {
    let mut info = ScorerInfo {
        id: scorer.id.clone(),
        kind: scorer.kind,
        calibrated: scorer.is_calibrated(),
        scored: 0,
        unscored: 0,
        unmatched: 0,
        duplicates: 0,
        rejects: IngestRejects::default(),
        all_oov: BTreeMap::new(),
    };
    let mut records = Vec::new();
    match scorer.kind {
        ScorerKind::Bilinear => {
            let model = read_with(&scorer.path, BilinearModel::read_from)?;
            for c in candidates.values().flatten() {
                let mut rec = bilinear_score(&c.head, c.relation, &c.tail, &model)
                    .map_err(|e| format!("scorer `{}`: {e}", scorer.id))?;
                rec.scorer_id = scorer.id.clone();
                if model.encode_term(&c.head).oov_fraction >= 1.0
                    || model.encode_term(&c.tail).oov_fraction >= 1.0
                {
                    *info.all_oov.entry(c.relation).or_default() += 1;
                }
                records.push(rec);
            }
        }
        ScorerKind::Pmi | ScorerKind::External => {
            let (parsed, rejects) = read_with(&scorer.path, |r| {
                ingest_external_scores(r, &scorer.id, scorer.is_calibrated())
            })?;
            info.rejects = rejects;
            let wanted: HashSet<TripleKey> =
                candidates.values().flatten().map(|c| c.key()).collect();
            let mut seen = HashSet::new();
            for rec in parsed.items {
                if !wanted.contains(&rec.key) {
                    info.unmatched += 1;
                } else if !seen.insert(rec.key.clone()) {
                    info.duplicates += 1;
                } else {
                    records.push(rec);
                }
            }
            info.unscored = wanted.len() - records.len();
        }
    }
    records.sort_by(|a, b| {
        a.key
            .relation
            .cmp(&b.key.relation)
            .then_with(|| ranking_order(a, b))
    });
    info.scored = records.len();
    Ok((records, info))
}

pub(super) fn read_scorer_infos(ctx: &Ctx) -> StageResult<Vec<ScorerInfo>> {
    read_json(&ctx.path(Stage::Score, SCORERS))
}

pub(super) fn read_scorer_scores(ctx: &Ctx, id: &str) -> StageResult<Vec<ScoreRecord>> {
    read_with(&ctx.path(Stage::Score, &score_file(id)), |r| {
        read_scores(r, id)
    })
}

// ---------------------------------------------------------------------------
// negatives

fn negatives(ctx: &Ctx) -> StageResult<()> {
    let n = ctx.config.negatives.n;
    if n == 0 {
        return Ok(());
    }
    let positives =
        read_ingested_triples(ctx, TRAINING)?.ok_or("negatives need training triples")?;
    let negs = generate_negative_triples(&positives, n, stream_seed(ctx.config.seed, "negatives"))
        .map_err(|e| e.to_string())?;
    write_with(&ctx.path(Stage::Negatives, NEGATIVES), |w| {
        write_negatives(w, &negs)
    })
}

// ---------------------------------------------------------------------------
// novelty

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct VerdictRow {
    #[serde(flatten)]
    pub key: TripleKey,
    pub reference: String,
    pub relation_agnostic: bool,
    pub novel: bool,
    pub matched_reference: Option<TripleKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct RateRow {
    pub reference: String,
    pub relation_agnostic: bool,
    /// `None` for the row over all relations.
    pub relation: Option<RelationId>,
    pub novel: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct EmbeddingRow {
    pub relation: RelationId,
    pub candidates: usize,
    pub mean_distance: f64,
    pub zero_vector_flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct NoveltySummary {
    /// Reference whose relation-matched verdict is shown to annotators.
    pub primary: Option<String>,
    pub references: BTreeMap<String, usize>,
    pub rates: Vec<RateRow>,
    pub embedding: Vec<EmbeddingRow>,
}

fn normalization(config: &PipelineConfig) -> StageResult<NormalizationPipeline> {
    let i = &config.inputs;
    if i.stopwords.is_none() && i.lemmas.is_none() {
        return Ok(NormalizationPipeline::default());
    }
    let stop = match &i.stopwords {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?
        }
        None => include_str!("../../data/stopwords.txt").to_string(),
    };
    let lemmas = match &i.lemmas {
        Some(p) => {
            Some(fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?)
        }
        None => None,
    };
    NormalizationPipeline::from_readers(stop.as_bytes(), lemmas.as_ref().map(|l| l.as_bytes()))
        .map_err(|e| e.to_string())
}

fn reference_sets(ctx: &Ctx) -> StageResult<Vec<(String, Vec<Triple>)>> {
    let mut out = Vec::new();
    if let Some(t) = read_ingested_triples(ctx, TRAINING)? {
        out.push(("training".to_string(), t));
    }
    if let Some(t) = read_ingested_triples(ctx, KG)? {
        out.push(("kg".to_string(), t));
    }
    for p in &ctx.config.novelty.references {
        let parsed = read_with(p, |r| load_training_triples(r, &file_label(p)))?;
        out.push((format!("file:{}", file_label(p)), parsed.items));
    }
    Ok(out)
}

fn novelty(ctx: &Ctx) -> StageResult<()> {
    let candidates = read_candidates(ctx)?;
    let pipeline = normalization(ctx.config)?;
    let refs = reference_sets(ctx)?;
    let modes: Vec<bool> = match ctx.config.novelty.relation_agnostic {
        Some(b) => vec![b],
        None => vec![false, true],
    };

    let mut rows = Vec::new();
    let mut rates = Vec::new();
    for (name, triples) in &refs {
        let index: ReferenceIndex = build_reference_index(triples, &pipeline);
        for &agnostic in &modes {
            let (mut all_novel, mut all_total) = (0, 0);
            for (relation, list) in &candidates {
                let mut novel = 0;
                for c in list {
                    let key = c.key();
                    let v = is_novel(&key, &index, &pipeline, agnostic);
                    novel += v.novel as usize;
                    rows.push(VerdictRow {
                        key,
                        reference: name.clone(),
                        relation_agnostic: agnostic,
                        novel: v.novel,
                        matched_reference: v.matched_reference,
                    });
                }
                let r = rate_of(novel, list.len());
                rates.push(RateRow {
                    reference: name.clone(),
                    relation_agnostic: agnostic,
                    relation: Some(*relation),
                    novel: r.novel,
                    total: r.total,
                    rate: r.rate,
                });
                all_novel += novel;
                all_total += list.len();
            }
            let r = rate_of(all_novel, all_total);
            rates.push(RateRow {
                reference: name.clone(),
                relation_agnostic: agnostic,
                relation: None,
                novel: r.novel,
                total: r.total,
                rate: r.rate,
            });
        }
    }

    let embedding = if ctx.config.novelty.embedding_proxy {
        embedding_rows(
            ctx,
            &candidates,
            refs.first().map(|(_, t)| t.as_slice()).unwrap_or(&[]),
        )?
    } else {
        Vec::new()
    };

    write_with(&ctx.path(Stage::Novelty, VERDICTS), |w| {
        for r in &rows {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let mut csv = String::from("reference,mode,relation,novel,total,rate\n");
    for r in &rates {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.reference,
            mode_name(r.relation_agnostic),
            r.relation.map_or("ALL".to_string(), |x| x.to_string()),
            r.novel,
            r.total,
            r.rate
        ));
    }
    write_string(&ctx.path(Stage::Novelty, RATES_CSV), &csv)?;
    if !embedding.is_empty() {
        let mut csv = String::from("relation,candidates,mean_distance,zero_vector_flagged\n");
        for e in &embedding {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                e.relation, e.candidates, e.mean_distance, e.zero_vector_flagged
            ));
        }
        write_string(&ctx.path(Stage::Novelty, EMBEDDING_CSV), &csv)?;
    }
    write_json(
        &ctx.path(Stage::Novelty, NOVELTY_SUMMARY),
        &NoveltySummary {
            primary: refs.first().map(|(n, _)| n.clone()),
            references: refs.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
            rates,
            embedding,
        },
    )
}

pub(super) fn mode_name(agnostic: bool) -> &'static str {
    if agnostic {
        "relation-agnostic"
    } else {
        "relation-matched"
    }
}

/// Mean distance from each candidate to its nearest same-relation reference.
fn embedding_rows(
    ctx: &Ctx,
    candidates: &Candidates,
    references: &[Triple],
) -> StageResult<Vec<EmbeddingRow>> {
    let scorer = ctx
        .config
        .scorers
        .iter()
        .find(|s| s.kind == ScorerKind::Bilinear)
        .ok_or("embedding proxy needs a bilinear scorer")?;
    let model = read_with(&scorer.path, BilinearModel::read_from)?;
    let mut by_rel: BTreeMap<RelationId, Vec<TripleKey>> = BTreeMap::new();
    for t in references {
        by_rel.entry(t.relation).or_default().push(t.key());
    }
    let mut out = Vec::new();
    for (relation, list) in candidates {
        let Some(refs) = by_rel.get(relation) else {
            continue;
        };
        let mut sum = 0.0;
        let mut flagged = 0;
        for c in list {
            let d = embedding_novelty_distance(&c.key(), refs, model.embeddings())
                .map_err(|e| e.to_string())?;
            sum += d.distance;
            flagged += d.zero_vector_used as usize;
        }
        if !list.is_empty() {
            out.push(EmbeddingRow {
                relation: *relation,
                candidates: list.len(),
                mean_distance: sum / list.len() as f64,
                zero_vector_flagged: flagged,
            });
        }
    }
    Ok(out)
}

fn read_advisory(ctx: &Ctx) -> StageResult<HashMap<TripleKey, bool>> {
    let summary: NoveltySummary = read_json(&ctx.path(Stage::Novelty, NOVELTY_SUMMARY))?;
    let Some(primary) = summary.primary else {
        return Ok(HashMap::new());
    };
    let preferred_mode = ctx.config.novelty.relation_agnostic.unwrap_or(false);
    let text = fs::read_to_string(ctx.path(Stage::Novelty, VERDICTS)).map_err(|e| e.to_string())?;
    let mut out = HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let row: VerdictRow = serde_json::from_str(line).map_err(|e| format!("{VERDICTS}: {e}"))?;
        if row.reference == primary && row.relation_agnostic == preferred_mode {
            out.insert(row.key, row.novel);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// select

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualifiedRow {
    pub scorer_id: String,
    pub relation: RelationId,
    pub criterion: String,
    pub scored: usize,
    pub qualified: usize,
}

fn criterion_label(c: SelectionCriterion) -> String {
    match c {
        SelectionCriterion::Threshold(t) => format!("score >= {t}"),
        SelectionCriterion::TopN(n) => format!("top {n}"),
    }
}

fn select(ctx: &Ctx) -> StageResult<()> {
    let mut rows = Vec::new();
    for info in read_scorer_infos(ctx)? {
        let scorer = ctx
            .config
            .scorers
            .iter()
            .find(|s| s.id == info.id)
            .ok_or_else(|| format!("scorer `{}` is no longer configured", info.id))?;
        let criterion = ctx.config.criterion(scorer);
        let records = read_scorer_scores(ctx, &info.id)?;
        let mut by_rel: BTreeMap<RelationId, Vec<ScoreRecord>> = BTreeMap::new();
        for r in records {
            by_rel.entry(r.key.relation).or_default().push(r);
        }
        let mut qualified = Vec::new();
        for (relation, recs) in &by_rel {
            let ranked = rank_candidates(recs, *relation).map_err(|e| e.to_string())?;
            let q = select_qualified(&ranked, criterion);
            rows.push(QualifiedRow {
                scorer_id: info.id.clone(),
                relation: *relation,
                criterion: criterion_label(criterion),
                scored: ranked.len(),
                qualified: q.len(),
            });
            qualified.extend(q);
        }
        write_with(&ctx.path(Stage::Select, &score_file(&info.id)), |w| {
            write_scores(w, &qualified)
        })?;
    }
    let mut csv = String::from("scorer,relation,criterion,scored,qualified\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scorer_id, r.relation, r.criterion, r.scored, r.qualified
        ));
    }
    write_string(&ctx.path(Stage::Select, QUALIFIED_CSV), &csv)?;
    write_json(&ctx.path(Stage::Select, QUALIFIED_JSON), &rows)
}

pub(super) fn read_qualified_rows(ctx: &Ctx) -> StageResult<Vec<QualifiedRow>> {
    read_json(&ctx.path(Stage::Select, QUALIFIED_JSON))
}

// ---------------------------------------------------------------------------
// sample

/// File holding the sample of one (scorer, relation) cell.
pub fn sample_file_name(scorer_id: &str, relation: RelationId) -> String {
    format!("{scorer_id}__{relation}.jsonl")
}

/// Character offsets of a token span inside `text`, found by scanning for the
/// token texts in order. `None` when the tokens cannot be located.
pub(crate) fn locate_span(
    text: &str,
    tokens: &[TaggedToken],
    span: (usize, usize),
) -> Option<(usize, usize)> {
    if span.0 >= span.1 || span.1 > tokens.len() {
        return None;
    }
    let mut cursor = 0;
    let mut start = 0;
    let mut end = 0;
    for (i, t) in tokens[..span.1].iter().enumerate() {
        let at = cursor + text[cursor..].find(t.text.as_str())?;
        if i == span.0 {
            start = at;
        }
        cursor = at + t.text.len();
        end = cursor;
    }
    let chars = |b: usize| text[..b].chars().count();
    Some((chars(start), chars(end)))
}

fn sample(ctx: &Ctx) -> StageResult<()> {
    let defs: HashMap<String, String> = read_ingested_definitions(ctx)?
        .into_iter()
        .map(|d| (d.source_id, d.definition_text))
        .collect();
    let tagged = read_tagged(ctx)?;
    let provenance: HashMap<TripleKey, (String, (usize, usize))> = read_candidates(ctx)?
        .into_values()
        .flatten()
        .map(|c| (c.key(), (c.source_id(), c.span)))
        .collect();
    let advisory = read_advisory(ctx)?;
    let qualified_rows = read_qualified_rows(ctx)?;

    let mut registrations = Vec::new();
    for info in read_scorer_infos(ctx)? {
        let qualified = read_with(&ctx.path(Stage::Select, &score_file(&info.id)), |r| {
            read_scores(r, &info.id)
        })?;
        let mut by_rel: BTreeMap<RelationId, Vec<ScoreRecord>> = BTreeMap::new();
        for r in qualified {
            by_rel.entry(r.key.relation).or_default().push(r);
        }
        for (relation, recs) in by_rel {
            let seed = stream_seed(ctx.config.seed, &format!("sample:{}:{relation}", info.id));
            let picked = sample_for_evaluation(&recs, ctx.config.sampling.n, seed);
            let items: Vec<SampleItem> = picked
                .iter()
                .map(|r| {
                    let (definition, highlight) = match provenance.get(&r.key) {
                        Some((source, span)) => {
                            let text = defs.get(source);
                            let hl = match (text, tagged.get(source)) {
                                (Some(t), Some(toks)) => locate_span(t, toks, *span),
                                _ => None,
                            };
                            (text.cloned(), hl)
                        }
                        None => (None, None),
                    };
                    SampleItem {
                        key: r.key.clone(),
                        scorer_id: info.id.clone(),
                        score: r.score,
                        definition,
                        highlight,
                        automated_novel: advisory.get(&r.key).copied(),
                    }
                })
                .collect();
            write_with(
                &ctx.path(Stage::Sample, &sample_file_name(&info.id, relation)),
                |w| {
                    for it in &items {
                        serde_json::to_writer(&mut *w, it)?;
                        w.write_all(b"\n")?;
                    }
                    Ok(())
                },
            )?;
            let qualified_count = qualified_rows
                .iter()
                .find(|q| q.scorer_id == info.id && q.relation == relation)
                .map_or(recs.len(), |q| q.qualified);
            registrations.push(SampleRegistration {
                relation,
                scorer_id: info.id.clone(),
                qualified_count,
                sample: items.into_iter().map(|i| i.key).collect(),
            });
        }
    }
    write_json(&ctx.path(Stage::Sample, REGISTRATIONS), &registrations)
}

/// Registrations written by the sample stage of `run_dir`, if any.
pub fn read_registrations(run_dir: &Path) -> StageResult<Vec<SampleRegistration>> {
    read_json(&run_dir.join(Stage::Sample.name()).join(REGISTRATIONS))
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct HistogramOut {
    pub scorer_id: String,
    pub calibrated: bool,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub out_of_range: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct TauRow {
    pub a: String,
    pub b: String,
    pub paired: usize,
    pub tau: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct EstimateRow {
    pub relation: RelationId,
    pub scorer_id: String,
    pub qualified: usize,
    pub validity: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct AnalysisOut {
    pub scorers: Vec<String>,
    pub histograms: Vec<HistogramOut>,
    pub tau: Vec<TauRow>,
    pub sessions: usize,
    pub summary: EvaluationSummary,
    pub estimates: Vec<EstimateRow>,
}

pub(super) fn histogram_file(id: &str) -> String {
    format!("histogram_{id}.csv")
}

fn analyze(ctx: &Ctx) -> StageResult<()> {
    let infos = read_scorer_infos(ctx)?;
    let mut scores = BTreeMap::new();
    for info in &infos {
        scores.insert(info.id.clone(), read_scorer_scores(ctx, &info.id)?);
    }

    let mut histograms = Vec::new();
    for info in &infos {
        let values: Vec<f64> = scores[&info.id].iter().map(|r| r.score).collect();
        if values.is_empty() {
            continue;
        }
        let range = info.calibrated.then_some((0.0, 1.0));
        let h = histogram(&values, DEFAULT_BINS, range)
            .map_err(|e| format!("histogram for `{}`: {e}", info.id))?;
        write_string(
            &ctx.path(Stage::Analyze, &histogram_file(&info.id)),
            &h.to_csv(),
        )?;
        histograms.push(HistogramOut {
            scorer_id: info.id.clone(),
            calibrated: info.calibrated,
            lo: h.lo,
            hi: h.hi,
            counts: h.counts.clone(),
            out_of_range: h.out_of_range,
        });
    }

    let mut tau = Vec::new();
    for (i, a) in infos.iter().enumerate() {
        for b in &infos[i + 1..] {
            let (sa, sb) = (&scores[&a.id], &scores[&b.id]);
            let paired = crate::analysis::paired_scores(sa, sb).len();
            let (value, note) = match kendall_tau(sa, sb) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            tau.push(TauRow {
                a: a.id.clone(),
                b: b.id.clone(),
                paired,
                tau: value,
                note,
            });
        }
    }
    let mut csv = String::from("scorer_a,scorer_b,paired,tau\n");
    for t in &tau {
        let v = t.tau.map_or("NA".to_string(), |x| x.to_string());
        csv.push_str(&format!("{},{},{},{}\n", t.a, t.b, t.paired, v));
    }
    write_string(&ctx.path(Stage::Analyze, TAU_CSV), &csv)?;

    let ann_dir = ctx.run_dir.join(ANNOTATIONS_DIR);
    let (regs, labels) = if ann_dir.is_dir() {
        annotation::snapshot(&ann_dir).map_err(|e| e.to_string())?
    } else {
        (Vec::new(), Vec::new())
    };
    let summary = summarize_annotations(&labels, &regs);
    write_string(&ctx.path(Stage::Analyze, SUMMARY_CSV), &summary.to_csv())?;

    let mut estimates = Vec::new();
    let mut csv = String::from("relation,scorer,qualified,validity,estimate\n");
    for row in &summary.rows {
        let e =
            estimate_valid_count(row.qualified_count, row.validity).map_err(|e| e.to_string())?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.relation, row.scorer_id, e.qualified_count, e.validity, e.estimate
        ));
        estimates.push(EstimateRow {
            relation: row.relation,
            scorer_id: row.scorer_id.clone(),
            qualified: e.qualified_count,
            validity: e.validity,
            estimate: e.estimate,
        });
    }
    write_string(&ctx.path(Stage::Analyze, ESTIMATES_CSV), &csv)?;

    write_json(
        &ctx.path(Stage::Analyze, ANALYSIS_JSON),
        &AnalysisOut {
            scorers: infos.iter().map(|i| i.id.clone()).collect(),
            histograms,
            tau,
            sessions: regs.len(),
            summary,
            estimates,
        },
    )
}

/// Definition text and span highlight for every candidate in a run, for
/// enriching annotation sessions created outside the sample stage.
pub fn definition_context(run_dir: &Path) -> Result<annotation::DefinitionContext, String> {
    let config_free = |stage: Stage, file: &str| run_dir.join(stage.name()).join(file);
    let defs: HashMap<String, String> =
        read_with(&config_free(Stage::Ingest, DEFINITIONS), read_definitions)?
            .into_iter()
            .map(|d| (d.source_id, d.definition_text))
            .collect();
    let tagged = read_with(&config_free(Stage::Tag, TAGGED), load_pretagged)?;
    let candidates = read_with(
        &config_free(Stage::Extract, CANDIDATES_JSONL),
        read_candidates_jsonl,
    )?;
    let mut ctx = annotation::DefinitionContext::default();
    for c in candidates.values().flatten() {
        let source = c.source_id();
        if let Some(text) = defs.get(&source) {
            let hl = tagged
                .get(&source)
                .and_then(|t| locate_span(text, t, c.span));
            ctx.insert(c.key(), text.clone(), hl);
        }
    }
    Ok(ctx)
}
