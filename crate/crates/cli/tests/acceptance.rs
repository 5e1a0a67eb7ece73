//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use defmine::analysis::{
    estimate_valid_count, histogram, summarize_annotations, tau_b, AnnotationLabel,
    SampleRegistration,
};
use defmine::corpus::{load_definitions, DefinitionFormat, RelationId, Triple, TripleKey};
use defmine::embedding::WordEmbeddings;
use defmine::extract::read_candidates_jsonl;
use defmine::novelty::{build_reference_index, is_novel, novelty_rate, NormalizationPipeline};
use defmine::pipeline::{run_pipeline, PipelineConfig, RunOptions, Stage};
use defmine::scoring::{
    bilinear_score, generate_negative_triples, pmi_score, rank_candidates, sample_for_evaluation,
    select_qualified, write_negatives, BilinearModel, PmiComponents, ScoreRecord,
    SelectionCriterion,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/bartender")
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn write(path: &Path, content: &str) -> Outcome {
    fs::write(path, content).map_err(|e| format!("{}: {e}", path.display()))
}

fn bartender_end_to_end() -> Outcome {
    let dir = tempdir()?;
    let root = dir.path();
    write(
        &root.join("definitions.jsonl"),
        r#"{"term": "bartender", "pos": "noun", "gloss": "One who tends a bar or pub; a person preparing and serving drinks at a bar"}"#,
    )?;
    write(
        &root.join("lexicon.tsv"),
        "one\tPRON\nwho\tPRON\ntends\tVERB\na\tDET\nbar\tNOUN\nor\tCCONJ\npub\tNOUN\nperson\tNOUN\n\
         preparing\tVERB\nand\tCCONJ\nserving\tVERB\ndrinks\tNOUN\nat\tADP\n",
    )?;
    write(
        &root.join("patterns.tsv"),
        "IsA\tNOUN\t1\nAtLocation\tNOUN\t1\nCapableOf\tVERB,CCONJ,VERB,NOUN\t1\n",
    )?;
    write(
        &root.join("defmine.toml"),
        "[inputs]\ndefinitions = \"definitions.jsonl\"\nlexicon = \"lexicon.tsv\"\nrestrict_to_kg_terms = false\n\n\
         [mining]\npatterns = \"patterns.tsv\"\n",
    )?;
    let config = PipelineConfig::load(&root.join("defmine.toml")).map_err(|e| e.to_string())?;
    let run_dir = root.join("run");
    let opts = RunOptions {
        stages: Some(vec![
            Stage::Ingest,
            Stage::Tag,
            Stage::MinePatterns,
            Stage::Extract,
        ]),
        force: false,
    };
    let start = Instant::now();
    run_pipeline(&config, &run_dir, &opts).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let file =
        fs::File::open(run_dir.join("extract/candidates.jsonl")).map_err(|e| e.to_string())?;
    let candidates = read_candidates_jsonl(file).map_err(|e| e.to_string())?;
    let keys: HashSet<TripleKey> = candidates.values().flatten().map(|c| c.key()).collect();
    for (rel, tail) in [
        (RelationId::IsA, "person"),
        (RelationId::AtLocation, "bar"),
        (RelationId::AtLocation, "pub"),
        (RelationId::CapableOf, "preparing and serving drinks"),
    ] {
        let key = TripleKey::new("bartender", rel, tail);
        ensure!(keys.contains(&key), "missing {key} among {keys:?}");
    }
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(())
}

fn morphology_filter() -> Outcome {
    let glosses = [
        ("cats", "plural of cat"),
        ("colour", "Alternative form of color"),
        ("gray", "alternative spelling of grey"),
        ("recieve", "Misspelling of receive"),
        ("knife", "A sharp tool used for cutting food"),
        ("kitchen", "A room where food is prepared and cooked"),
    ];
    let input: String = glosses
        .iter()
        .map(|(t, g)| format!("{}\n", json!({"term": t, "gloss": g})))
        .collect();
    let (defs, stats) = load_definitions(input.as_bytes(), DefinitionFormat::JsonLines, None)
        .map_err(|e| e.to_string())?;
    let kept: Vec<&str> = defs.iter().map(|d| d.definition_text.as_str()).collect();
    ensure!(kept == [glosses[4].1, glosses[5].1], "kept {kept:?}");
    ensure!(
        stats.morphological == 4,
        "morphological count {}",
        stats.morphological
    );
    Ok(())
}

fn oracle_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

const VOCAB: [&str; 6] = ["bar", "drink", "person", "glass", "serve", "room"];

fn random_model(rng: &mut ChaCha8Rng) -> (BilinearModel, BilinearModel) {
    let d = rng.random_range(1..5);
    let r = rng.random_range(1..5);
    let mut e = WordEmbeddings::new(d);
    for w in VOCAB {
        e.insert(w, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let w = random_matrix(rng, r, d);
    let b = Array1::from_shape_fn(r, |_| rng.random_range(-1.0..1.0));
    let m = random_matrix(rng, r, r);
    let pos = BilinearModel::new(
        e.clone(),
        w.clone(),
        b.clone(),
        BTreeMap::from([(RelationId::UsedFor, m.clone())]),
    );
    let neg = BilinearModel::new(e, w, b, BTreeMap::from([(RelationId::UsedFor, -m)]));
    (pos.unwrap(), neg.unwrap())
}

fn bilinear_scorer() -> Outcome {
    let mut e = WordEmbeddings::new(1);
    e.insert("bar", vec![1.0]);
    let unit = |m: f64| {
        BilinearModel::new(
            e.clone(),
            Array2::from_elem((1, 1), 1.0),
            Array1::zeros(1),
            BTreeMap::from([(RelationId::AtLocation, Array2::from_elem((1, 1), m))]),
        )
        .map_err(|e| e.to_string())
    };
    let zero = bilinear_score("bar", RelationId::AtLocation, "bar", &unit(0.0)?)
        .map_err(|e| e.to_string())?;
    ensure!(zero.score == 0.5, "zero matrix gave {}", zero.score);

    let hand = bilinear_score("bar", RelationId::AtLocation, "bar", &unit(1.0)?)
        .map_err(|e| e.to_string())?;
    let expected = oracle_sigmoid(1f64.tanh().powi(2));
    ensure!(
        (hand.score - expected).abs() < 1e-5,
        "hand case {} vs {expected}",
        hand.score
    );
    ensure!(
        (hand.score - 0.64107).abs() < 1e-5,
        "hand case {} vs 0.64107",
        hand.score
    );

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..10_000 {
        let (pos, neg) = random_model(&mut rng);
        let h = VOCAB[rng.random_range(0..VOCAB.len())];
        let t = VOCAB[rng.random_range(0..VOCAB.len())];
        let s = bilinear_score(h, RelationId::UsedFor, t, &pos)
            .map_err(|e| e.to_string())?
            .score;
        let s_neg = bilinear_score(h, RelationId::UsedFor, t, &neg)
            .map_err(|e| e.to_string())?
            .score;
        ensure!(s > 0.0 && s < 1.0, "model {i}: score {s} outside (0, 1)");
        ensure!(
            (s + s_neg - 1.0).abs() <= 1e-12,
            "model {i}: {s} and {s_neg} are not complementary"
        );
    }
    Ok(())
}

fn pmi_combiner() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let [a, b, c, d]: [f64; 4] = std::array::from_fn(|_| rng.random_range(-20.0..0.0));
        let comps = PmiComponents::new(a, b, c, d);
        let score = pmi_score(&comps).map_err(|e| e.to_string())?;
        let expected = ((a - b) + (c - d)) / 2.0;
        ensure!((score - expected).abs() <= 1e-12, "{score} vs {expected}");
        let swapped = pmi_score(&comps.swapped()).map_err(|e| e.to_string())?;
        ensure!(swapped == score, "swap changed {score} to {swapped}");
    }
    Ok(())
}

/// Tau-b by enumerating every pair.
fn tau_oracle(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as i64;
    let n0 = n * (n - 1) / 2;
    let (mut s, mut tx, mut ty) = (0i64, 0i64, 0i64);
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let dx = pairs[i].0 - pairs[j].0;
            let dy = pairs[i].1 - pairs[j].1;
            tx += (dx == 0.0) as i64;
            ty += (dy == 0.0) as i64;
            if dx != 0.0 && dy != 0.0 {
                s += if (dx > 0.0) == (dy > 0.0) { 1 } else { -1 };
            }
        }
    }
    s as f64 / ((n0 - tx) as f64 * (n0 - ty) as f64).sqrt()
}

fn kendall_tau() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..8) as f64;
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x = (rng.random_range(0.0..levels)).floor();
                let y = (rng.random_range(0.0..levels)).floor();
                (x, y)
            })
            .collect();
        let distinct =
            |f: fn(&(f64, f64)) -> u64| pairs.iter().map(f).collect::<HashSet<_>>().len();
        if distinct(|p| p.0.to_bits()) < 2 || distinct(|p| p.1.to_bits()) < 2 {
            continue;
        }
        let fast = tau_b(&pairs).map_err(|e| e.to_string())?;
        let slow = tau_oracle(&pairs);
        ensure!((fast - slow).abs() <= 1e-12, "n={n}: {fast} vs {slow}");
        checked += 1;
    }
    let monotone: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (i * i) as f64)).collect();
    let reversed: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, -(i as f64))).collect();
    let up = tau_b(&monotone).map_err(|e| e.to_string())?;
    let down = tau_b(&reversed).map_err(|e| e.to_string())?;
    ensure!(
        up == 1.0 && down == -1.0,
        "monotone gave {up}, reversed gave {down}"
    );
    Ok(())
}

fn negative_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let relations = [RelationId::IsA, RelationId::UsedFor, RelationId::AtLocation];
    let positives: Vec<Triple> = (0..800)
        .map(|i| {
            let h = format!("entity{}", rng.random_range(0..150));
            let t = format!("entity{}", rng.random_range(0..150));
            let r = relations[rng.random_range(0..relations.len())];
            Triple::new(&h, r, &t, format!("pos{i}")).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let keys: HashSet<TripleKey> = positives.iter().map(Triple::key).collect();
    let by_source: BTreeMap<&str, &Triple> =
        positives.iter().map(|t| (t.source.as_str(), t)).collect();

    let negs = generate_negative_triples(&positives, 10_000, 99).map_err(|e| e.to_string())?;
    ensure!(negs.len() == 10_000, "generated {}", negs.len());
    for neg in &negs {
        let t = &neg.triple;
        ensure!(!keys.contains(&t.key()), "{} is a positive", t.key());
        let from = t
            .source
            .split("from=")
            .nth(1)
            .and_then(|s| s.split(';').next())
            .ok_or_else(|| format!("no source in {}", t.source))?;
        let src = by_source
            .get(from)
            .ok_or_else(|| format!("unknown source {from}"))?;
        let changed = (src.head != t.head) as u8
            + (src.tail != t.tail) as u8
            + (src.relation != t.relation) as u8;
        ensure!(
            changed == 1,
            "{} differs from {} in {changed} slots",
            t.key(),
            src.key()
        );
    }
    let bytes = |negs: &[_]| {
        let mut buf = Vec::new();
        write_negatives(&mut buf, negs)
            .map(|_| buf)
            .map_err(|e| e.to_string())
    };
    let again = generate_negative_triples(&positives, 10_000, 99).map_err(|e| e.to_string())?;
    ensure!(bytes(&negs)? == bytes(&again)?, "rerun differs");
    Ok(())
}

fn novelty() -> Outcome {
    let p = NormalizationPipeline::default();
    let refs: Vec<Triple> = [
        ("bartender", RelationId::AtLocation, "a crowded bar"),
        ("knife", RelationId::UsedFor, "cutting bread"),
        ("glass of cold water", RelationId::IsA, "refreshing drink"),
        ("kitchen", RelationId::UsedFor, "cooking dinner for guests"),
    ]
    .iter()
    .enumerate()
    .map(|(i, (h, r, t))| Triple::new(h, *r, t, format!("ref{i}")).map_err(|e| e.to_string()))
    .collect::<Result<_, _>>()?;
    let index = build_reference_index(&refs, &p);
    for agnostic in [false, true] {
        for t in &refs {
            ensure!(
                !is_novel(&t.key(), &index, &p, agnostic).novel,
                "reference {} is novel",
                t.key()
            );
            let mut head: Vec<&str> = t.head.split(' ').collect();
            let mut tail: Vec<&str> = t.tail.split(' ').collect();
            head.reverse();
            tail.rotate_left(1);
            let shuffled = TripleKey::new(head.join(" "), t.relation, tail.join(" "));
            ensure!(
                !is_novel(&shuffled, &index, &p, agnostic).novel,
                "permutation {shuffled} is novel"
            );
        }
    }

    let mut candidates: Vec<TripleKey> = (0..93)
        .map(|i| {
            TripleKey::new(
                format!("gadget{i}"),
                RelationId::UsedFor,
                format!("task{i}"),
            )
        })
        .collect();
    candidates.extend(refs.iter().map(Triple::key));
    candidates.extend([
        TripleKey::new("Bartender", RelationId::AtLocation, "bar crowded"),
        TripleKey::new("knife", RelationId::UsedFor, "bread cutting"),
        TripleKey::new("cold water glass", RelationId::IsA, "drink refreshing"),
    ]);
    ensure!(candidates.len() == 100, "{} candidates", candidates.len());
    let rate = novelty_rate(&candidates, &index, &p, false);
    ensure!(rate.rate == 0.93 && rate.novel == 93, "rate {rate:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words = [
        "bar", "bars", "drink", "drinks", "person", "room", "the", "of", "cooking", "cooked",
    ];
    let rels = [RelationId::IsA, RelationId::AtLocation];
    let phrase = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(1..4);
        (0..len)
            .map(|_| words[rng.random_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    for trial in 0..200 {
        let key = |rng: &mut ChaCha8Rng| {
            let h = phrase(rng);
            let t = phrase(rng);
            TripleKey::new(h, rels[rng.random_range(0..2)], t)
        };
        let all: Vec<Triple> = (0..30)
            .map(|i| {
                let k = key(&mut rng);
                Triple::new(&k.head, k.relation, &k.tail, format!("r{i}"))
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<_, _>>()?;
        let cands: Vec<TripleKey> = (0..20).map(|_| key(&mut rng)).collect();
        let cut = rng.random_range(0..=all.len());
        let small = build_reference_index(&all[..cut], &p);
        let big = build_reference_index(&all, &p);
        for agnostic in [false, true] {
            let before = novelty_rate(&cands, &small, &p, agnostic);
            let after = novelty_rate(&cands, &big, &p, agnostic);
            ensure!(
                after.novel <= before.novel,
                "trial {trial}: {before:?} grew to {after:?}"
            );
            for c in &cands {
                ensure!(
                    is_novel(c, &small, &p, agnostic).novel
                        || !is_novel(c, &big, &p, agnostic).novel,
                    "trial {trial}: {c} became novel"
                );
            }
        }
    }
    Ok(())
}

fn selection_and_sampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..200 {
        let n = rng.random_range(0..3000);
        let records: Vec<ScoreRecord> = (0..n)
            .map(|i| {
                let score = match rng.random_range(0..4) {
                    0 => 0.9,
                    1 => (rng.random_range(0..20) as f64) / 20.0,
                    _ => rng.random_range(0.0..1.0),
                };
                ScoreRecord::new(
                    TripleKey::new(format!("h{i}"), RelationId::IsA, format!("t{i}")),
                    "s",
                    score,
                )
            })
            .collect();
        let ranking = rank_candidates(&records, RelationId::IsA).map_err(|e| e.to_string())?;
        let picked = select_qualified(
            &ranking,
            SelectionCriterion::threshold(0.9).map_err(|e| e.to_string())?,
        );
        let mut got: Vec<&TripleKey> = picked.iter().map(|r| &r.key).collect();
        let mut want: Vec<&TripleKey> = records
            .iter()
            .filter(|r| r.score >= 0.9)
            .map(|r| &r.key)
            .collect();
        got.sort();
        want.sort();
        ensure!(
            got == want,
            "trial {trial}: threshold selection differs from brute force"
        );
        let top = select_qualified(&ranking, SelectionCriterion::TopN(1000));
        ensure!(
            top.len() == n.min(1000),
            "trial {trial}: top-1000 of {n} gave {}",
            top.len()
        );
        ensure!(
            top[..] == ranking[..top.len()],
            "trial {trial}: top-N is not the ranking prefix"
        );
    }

    let items: Vec<usize> = (0..500).collect();
    for n in [0, 1, 100, 499, 500, 501, 5000] {
        for seed in 0..20 {
            let s = sample_for_evaluation(&items, n, seed);
            ensure!(
                s.len() == n.min(items.len()),
                "sample of {n} has {}",
                s.len()
            );
            let distinct: HashSet<usize> = s.iter().copied().collect();
            ensure!(distinct.len() == s.len(), "sample of {n} repeats an item");
            ensure!(
                s == sample_for_evaluation(&items, n, seed),
                "seed {seed} is not deterministic"
            );
        }
    }
    let a = sample_for_evaluation(&items, 100, 1);
    let b = sample_for_evaluation(&items, 100, 2);
    ensure!(a != b, "different seeds drew the same sample");
    Ok(())
}

fn histogram_bins() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.random_range(0..1000);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let h = histogram(&scores, 10, Some((0.0, 1.0))).map_err(|e| e.to_string())?;
        ensure!(h.counts.len() == 10, "{} bins", h.counts.len());
        ensure!(
            h.counts.iter().sum::<u64>() == n as u64,
            "counts sum to {} of {n}",
            h.in_range()
        );
    }
    let uniform: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
    let h = histogram(&uniform, 10, Some((0.0, 1.0))).map_err(|e| e.to_string())?;
    ensure!(
        h.counts == vec![1; 10],
        "uniform fixture gave {:?}",
        h.counts
    );
    let h = histogram(&[1.0], 10, Some((0.0, 1.0))).map_err(|e| e.to_string())?;
    ensure!(h.counts[9] == 1, "1.0 landed in {:?}", h.counts);
    Ok(())
}

fn arithmetic() -> Outcome {
    let est = estimate_valid_count(50_000, 0.34).map_err(|e| e.to_string())?;
    ensure!(est.estimate == 17_000.0, "estimate {}", est.estimate);

    let sample: Vec<TripleKey> = (0..50)
        .map(|i| {
            TripleKey::new(
                format!("thing{i}"),
                RelationId::UsedFor,
                format!("purpose{i}"),
            )
        })
        .collect();
    let labels: Vec<AnnotationLabel> = sample
        .iter()
        .enumerate()
        .map(|(i, key)| AnnotationLabel {
            key: key.clone(),
            scorer_id: "kgbert".into(),
            annotator: Some("a".into()),
            valid: i < 18,
            novel: i < 17,
        })
        .collect();
    let reg = SampleRegistration {
        relation: RelationId::UsedFor,
        scorer_id: "kgbert".into(),
        qualified_count: 50_000,
        sample,
    };
    let summary = summarize_annotations(&labels, &[reg]);
    let row = summary
        .row(RelationId::UsedFor, "kgbert")
        .ok_or("no summary row")?;
    ensure!(row.validity == 0.36, "V. = {}", row.validity);
    ensure!(
        row.valid_novel_proportion == 0.34,
        "V.N. = {}",
        row.valid_novel_proportion
    );
    Ok(())
}

fn defmine() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_defmine"));
    cmd.env_remove("RUST_LOG").stdin(Stdio::null());
    cmd
}

fn list_files(root: &Path) -> Result<Vec<PathBuf>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(
                    path.strip_prefix(root)
                        .map_err(|e| e.to_string())?
                        .to_path_buf(),
                );
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempdir()?;
    let config = fixture_dir().join("defmine_multi.toml");
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for run in &runs {
        let out = defmine()
            .args([
                "--config".as_ref(),
                config.as_os_str(),
                "--run-dir".as_ref(),
                run.as_os_str(),
                "run".as_ref(),
            ])
            .stderr(Stdio::null())
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "run exited with {}", out.status);
    }
    let (fa, fb) = (list_files(&runs[0])?, list_files(&runs[1])?);
    ensure!(fa == fb, "file lists differ: {fa:?} vs {fb:?}");
    ensure!(fa.len() > 20, "only {} files written", fa.len());
    for f in &fa {
        let a = fs::read(runs[0].join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(runs[1].join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{} differs", f.display());
    }
    Ok(())
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(run_dir: &Path) -> Result<Self, String> {
        let mut child = defmine()
            .args([
                "--run-dir".as_ref(),
                run_dir.as_os_str(),
                "serve".as_ref(),
                "--port".as_ref(),
                "0".as_ref(),
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let stdout = child.stdout.take().ok_or("no stdout")?;
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let addr = line
            .trim()
            .strip_prefix("listening on http://")
            .ok_or_else(|| format!("unexpected banner {line:?}"))?
            .to_string();
        Ok(Server { child, addr })
    }

    fn request(
        &self,
        method: &str,
        path: &str,
        body: Option<&Value>,
    ) -> Result<(u16, Value), String> {
        let mut stream = TcpStream::connect(&self.addr).map_err(|e| e.to_string())?;
        stream
            .set_read_timeout(Some(Duration::from_secs(10)))
            .map_err(|e| e.to_string())?;
        let body = body.map(Value::to_string).unwrap_or_default();
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\
             Connection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .map_err(|e| e.to_string())?;
        let mut raw = String::new();
        stream.read_to_string(&mut raw).map_err(|e| e.to_string())?;
        let (head, payload) = raw.split_once("\r\n\r\n").ok_or("truncated response")?;
        let status = head
            .split(' ')
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad status line in {head:?}"))?;
        let json = serde_json::from_str(payload).map_err(|e| format!("{e}: {payload:?}"))?;
        Ok((status, json))
    }

    /// SIGKILL, no chance to flush or shut down.
    fn kill(mut self) -> Result<(), String> {
        self.child.kill().map_err(|e| e.to_string())?;
        self.child.wait().map_err(|e| e.to_string())?;
        Ok(())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn label(server: &Server, id: &str, i: usize) -> Result<Value, String> {
    let body = json!({
        "triple_key": {"head": format!("thing{i}"), "relation": "UsedFor", "tail": format!("purpose{i}")},
        "annotator_id": "ann",
        "valid": i < 18,
        "novel": i < 17,
    });
    let (status, ack) = server.request("POST", &format!("/sessions/{id}/labels"), Some(&body))?;
    ensure!(status == 200, "label {i}: {status} {ack}");
    Ok(ack)
}

fn annotation_service() -> Outcome {
    let dir = tempdir()?;
    let server = Server::start(dir.path())?;
    let (status, ui) = server.request("GET", "/", None)?;
    ensure!(
        status == 404 && ui["code"] == "ui_not_built",
        "root gave {status} {ui}"
    );

    let items: Vec<Value> = (0..50)
        .map(|i| {
            json!({"head": format!("thing{i}"), "relation": "UsedFor", "tail": format!("purpose{i}"),
                   "scorer_id": "kgbert", "score": 0.95})
        })
        .collect();
    let create = json!({"relation": "UsedFor", "scorer_id": "kgbert", "items": items, "qualified_count": 50000});
    let (status, created) = server.request("POST", "/sessions", Some(&create))?;
    ensure!(status == 201, "create gave {status} {created}");
    let id = created["session_id"]
        .as_str()
        .ok_or("no session id")?
        .to_string();

    for i in 0..23 {
        label(&server, &id, i)?;
    }
    let (_, before) = server.request("GET", &format!("/sessions/{id}/summary"), None)?;
    server.kill()?;

    let server = Server::start(dir.path())?;
    let (status, after) = server.request("GET", &format!("/sessions/{id}/summary"), None)?;
    ensure!(status == 200, "summary after restart gave {status} {after}");
    ensure!(
        after == before,
        "state changed across the kill:\n{before}\n{after}"
    );
    ensure!(
        after["labels"].as_array().map(Vec::len) == Some(23),
        "{} labels survived",
        after["labels"]
    );
    let (_, next) = server.request("GET", &format!("/sessions/{id}/next?annotator=ann"), None)?;
    ensure!(next["index"] == 23, "resumed at {}", next["index"]);

    let mut ack = Value::Null;
    for i in 23..50 {
        ack = label(&server, &id, i)?;
    }
    ensure!(ack["pooled"]["validity"] == 0.36, "ack {ack}");
    let (_, summary) = server.request("GET", &format!("/sessions/{id}/summary"), None)?;
    ensure!(
        summary["pooled"]["validity"] == 0.36,
        "V. {}",
        summary["pooled"]["validity"]
    );
    ensure!(
        summary["pooled"]["valid_novel_proportion"] == 0.34,
        "V.N. {}",
        summary["pooled"]["valid_novel_proportion"]
    );
    ensure!(
        summary["labels"].as_array().map(Vec::len) == Some(50),
        "label count {}",
        summary["labels"]
    );
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("bartender end-to-end", bartender_end_to_end),
        ("morphology filter", morphology_filter),
        ("bilinear scorer", bilinear_scorer),
        ("PMI combiner", pmi_combiner),
        ("Kendall tau", kendall_tau),
        ("negative sampling", negative_sampling),
        ("novelty", novelty),
        ("selection and sampling", selection_and_sampling),
        ("histogram", histogram_bins),
        ("validity arithmetic", arithmetic),
        ("determinism", determinism),
        ("annotation service", annotation_service),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome =
            catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(()) => println!("criterion {:>2} PASS {name}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
