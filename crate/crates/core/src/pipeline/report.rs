//! Markdown report plus a bundle of the CSV tables it is built from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::stages::{
    self, AnalysisOut, Ctx, IngestStats, NoveltySummary, QualifiedRow, ScorerInfo,
};
use super::{PipelineError, Stage, StageResult};
use crate::corpus::RelationId;
use crate::patterns::{read_table, Side};

pub const REPORT_FILE: &str = "report.md";

/// Files the report needs, as `stage/file`.
const REQUIRED: &[(Stage, &str)] = &[
    (Stage::Ingest, stages::STATS),
    (Stage::MinePatterns, stages::PATTERNS),
    (Stage::Extract, stages::COUNTS_JSON),
    (Stage::Score, stages::SCORERS),
    (Stage::Novelty, stages::NOVELTY_SUMMARY),
    (Stage::Select, stages::QUALIFIED_JSON),
    (Stage::Analyze, stages::ANALYSIS_JSON),
];

/// CSV tables copied next to the report, as (stage, source file, bundle name).
const BUNDLE: &[(Stage, &str, &str)] = &[
    (Stage::Extract, stages::COUNTS_CSV, "candidate_counts.csv"),
    (Stage::Novelty, stages::RATES_CSV, "novelty_rates.csv"),
    (
        Stage::Novelty,
        stages::EMBEDDING_CSV,
        "embedding_distance.csv",
    ),
    (Stage::Select, stages::QUALIFIED_CSV, "qualified.csv"),
    (Stage::Analyze, stages::TAU_CSV, "tau.csv"),
    (Stage::Analyze, stages::SUMMARY_CSV, "summary.csv"),
    (Stage::Analyze, stages::ESTIMATES_CSV, "estimates.csv"),
];

/// Renders the report for a run directory whose analyze stage has completed.
pub fn emit_report(run_dir: &Path) -> Result<String, PipelineError> {
    let missing: Vec<String> = REQUIRED
        .iter()
        .filter(|(s, f)| !run_dir.join(s.name()).join(f).is_file())
        .map(|(s, f)| format!("{s}/{f}"))
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::Stage {
            stage: Stage::Report,
            message: format!("missing stage outputs: {}", missing.join(", ")),
        });
    }
    render(run_dir).map_err(|message| PipelineError::Stage {
        stage: Stage::Report,
        message,
    })
}

pub(super) fn write_report(ctx: &Ctx) -> StageResult<()> {
    let markdown = emit_report(ctx.run_dir).map_err(|e| match e {
        PipelineError::Stage { message, .. } => message,
        other => other.to_string(),
    })?;
    let out = ctx.run_dir.join(Stage::Report.name());
    stages::write_string(&out.join(REPORT_FILE), &markdown)?;
    for (stage, file, name) in BUNDLE {
        let src = ctx.path(*stage, file);
        if src.is_file() {
            let text = fs::read_to_string(&src)
                .map_err(|e| format!("cannot read {}: {e}", src.display()))?;
            stages::write_string(&out.join(name), &text)?;
        }
    }
    let analysis: AnalysisOut =
        stages::read_json(&ctx.path(Stage::Analyze, stages::ANALYSIS_JSON))?;
    for h in &analysis.histograms {
        let name = stages::histogram_file(&h.scorer_id);
        let src = ctx.path(Stage::Analyze, &name);
        let text =
            fs::read_to_string(&src).map_err(|e| format!("cannot read {}: {e}", src.display()))?;
        stages::write_string(&out.join(name), &text)?;
    }
    Ok(())
}

fn render(run_dir: &Path) -> StageResult<String> {
    let at = |s: Stage, f: &str| run_dir.join(s.name()).join(f);
    let ingest: IngestStats = stages::read_json(&at(Stage::Ingest, stages::STATS))?;
    let patterns = stages::read_with(&at(Stage::MinePatterns, stages::PATTERNS), |r| {
        read_table(r, Side::default())
    })?;
    let counts: BTreeMap<RelationId, usize> =
        stages::read_json(&at(Stage::Extract, stages::COUNTS_JSON))?;
    let scorers: Vec<ScorerInfo> = stages::read_json(&at(Stage::Score, stages::SCORERS))?;
    let novelty: NoveltySummary = stages::read_json(&at(Stage::Novelty, stages::NOVELTY_SUMMARY))?;
    let qualified: Vec<QualifiedRow> =
        stages::read_json(&at(Stage::Select, stages::QUALIFIED_JSON))?;
    let analysis: AnalysisOut = stages::read_json(&at(Stage::Analyze, stages::ANALYSIS_JSON))?;

    let mut md = String::new();
    md.push_str("# Candidate triple mining report\n\n");

    md.push_str("## Corpus\n\n| Item | Count |\n|---|---:|\n");
    let d = &ingest.definitions;
    for (label, n) in [
        ("Definition records", d.records),
        ("Malformed records", d.malformed),
        ("Outside the reference term list", d.outside_whitelist),
        ("Morphological definitions dropped", d.morphological),
        ("Duplicate records", d.duplicates),
        ("Definitions kept", d.retained),
    ] {
        let _ = writeln!(md, "| {label} | {n} |");
    }
    if let Some(kg) = ingest.kg {
        let _ = writeln!(
            md,
            "| Reference graph triples (skipped rows) | {} ({}) |",
            kg.parsed, kg.skipped
        );
    }
    if let Some(tr) = ingest.training {
        let _ = writeln!(
            md,
            "| Training triples (skipped rows) | {} ({}) |",
            tr.parsed, tr.skipped
        );
    }

    md.push_str("\n## Statistics of candidate triples\n\n| Relation | Patterns | Candidates |\n|---|---:|---:|\n");
    for (r, n) in &counts {
        let _ = writeln!(md, "| {r} | {} | {n} |", patterns.patterns(*r).len());
    }
    let _ = writeln!(md, "| Total | | {} |", counts.values().sum::<usize>());

    md.push_str("\n## Score distributions\n\n");
    if scorers.is_empty() {
        md.push_str("No scorers configured.\n");
    }
    for s in &scorers {
        let kind = if s.calibrated {
            "calibrated"
        } else {
            "uncalibrated"
        };
        let _ = writeln!(md, "### {} ({kind})\n", s.id);
        let _ = writeln!(
            md,
            "Scored {}, unscored {}, unmatched score rows {}, duplicate rows {}, rejected rows {}.",
            s.scored,
            s.unscored,
            s.unmatched,
            s.duplicates,
            s.rejects.malformed + s.rejects.unknown_relation + s.rejects.out_of_range
        );
        let oov: usize = s.all_oov.values().sum();
        if oov > 0 {
            let _ = writeln!(
                md,
                "Candidates with a head or tail of only unknown words: {oov}."
            );
        }
        md.push('\n');
        match analysis.histograms.iter().find(|h| h.scorer_id == s.id) {
            Some(h) => {
                md.push_str("| Bin | Count |\n|---|---:|\n");
                let bins = h.counts.len();
                let width = (h.hi - h.lo) / bins as f64;
                for (i, c) in h.counts.iter().enumerate() {
                    let lo = h.lo + width * i as f64;
                    let hi = if i + 1 == bins {
                        h.hi
                    } else {
                        h.lo + width * (i + 1) as f64
                    };
                    let close = if i + 1 == bins { "]" } else { ")" };
                    let _ = writeln!(md, "| [{lo:.3}, {hi:.3}{close} | {c} |");
                }
                if h.out_of_range > 0 {
                    let _ = writeln!(md, "\nOut of range: {}.", h.out_of_range);
                }
            }
            None => md.push_str("No scores.\n"),
        }
        md.push('\n');
    }

    md.push_str("## Kendall's tau between scorers\n\n");
    if analysis.scorers.len() < 2 {
        md.push_str("not applicable (<2 scorers)\n");
    } else {
        let ids = &analysis.scorers;
        let _ = writeln!(md, "| | {} |", ids.join(" | "));
        let _ = writeln!(md, "|---|{}", "---:|".repeat(ids.len()));
        for a in ids {
            let cells: Vec<String> = ids
                .iter()
                .map(|b| {
                    if a == b {
                        return "1".to_string();
                    }
                    analysis
                        .tau
                        .iter()
                        .find(|t| (&t.a == a && &t.b == b) || (&t.a == b && &t.b == a))
                        .map(|t| match t.tau {
                            Some(v) => format!("{v:.4} (n={})", t.paired),
                            None => format!("n/a (n={})", t.paired),
                        })
                        .unwrap_or_default()
                })
                .collect();
            let _ = writeln!(md, "| {a} | {} |", cells.join(" | "));
        }
    }

    md.push_str("\n## Novelty\n\n");
    if novelty.references.is_empty() {
        md.push_str("No reference triples configured.\n");
    } else {
        md.push_str("| Reference | Comparison | Relation | Novel | Total | Rate |\n|---|---|---|---:|---:|---:|\n");
        for r in &novelty.rates {
            let rel = r.relation.map_or("all".to_string(), |x| x.to_string());
            let _ = writeln!(
                md,
                "| {} | {} | {rel} | {} | {} | {:.4} |",
                r.reference,
                stages::mode_name(r.relation_agnostic),
                r.novel,
                r.total,
                r.rate
            );
        }
    }
    if !novelty.embedding.is_empty() {
        md.push_str("\n### Embedding distance to the nearest reference (diagnostic)\n\n");
        md.push_str("| Relation | Candidates | Mean distance | Zero-vector fallbacks |\n|---|---:|---:|---:|\n");
        for e in &novelty.embedding {
            let _ = writeln!(
                md,
                "| {} | {} | {:.4} | {} |",
                e.relation, e.candidates, e.mean_distance, e.zero_vector_flagged
            );
        }
    }

    md.push_str("\n## Qualified triples\n\n");
    if qualified.is_empty() {
        md.push_str("No scored candidates.\n");
    } else {
        md.push_str(
            "| Relation | Scorer | Criterion | Scored | Qual. |\n|---|---|---|---:|---:|\n",
        );
        for q in &qualified {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                q.relation, q.scorer_id, q.criterion, q.scored, q.qualified
            );
        }
    }

    md.push_str("\n## Manual evaluation\n\n");
    if analysis.summary.rows.is_empty() {
        md.push_str("No annotation sessions recorded.\n");
    } else {
        md.push_str("| Relation | Scorer | Qual. | Sample | Annotators | Labeled | V. | V.N. |\n");
        md.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
        for r in &analysis.summary.rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.relation,
                r.scorer_id,
                r.qualified_count,
                r.sample_size,
                r.annotators,
                r.labeled,
                r.validity,
                r.valid_novel_proportion
            );
        }
        if analysis.summary.rejected_labels > 0 {
            let _ = writeln!(
                md,
                "\nLabels outside a registered sample: {}.",
                analysis.summary.rejected_labels
            );
        }
    }

    md.push_str("\n## Estimated valid triples\n\n");
    if analysis.estimates.is_empty() {
        md.push_str("No estimates without manual evaluation.\n");
    } else {
        md.push_str("| Relation | Scorer | Qual. | V. | Qual. × V. |\n|---|---|---:|---:|---:|\n");
        for e in &analysis.estimates {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                e.relation, e.scorer_id, e.qualified, e.validity, e.estimate
            );
        }
    }
    Ok(md)
}
