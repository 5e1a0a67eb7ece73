use std::collections::BTreeMap;

use defmine::corpus::{RelationId, TermDefinition, Triple};
use defmine::extract::{extract_candidates, match_spans, span_text};
use defmine::patterns::{mine_patterns, select_top_k, Side};
use defmine::tagging::{TagLexicon, Tagger, Upos};
use proptest::prelude::*;

// Mixes words the starter lexicon knows with unknown ones so that several
// distinct tag sequences show up.
const WORDS: &[&str] = &[
    "a",
    "the",
    "bar",
    "pub",
    "drinks",
    "serving",
    "preparing",
    "and",
    "or",
    "person",
    "who",
    "tends",
    "at",
    "of",
    "quickly",
    "sharp",
    "cut",
    "food",
    "room",
    "x",
    ",",
];

fn phrase() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(WORDS), 1..5).prop_map(|w| w.join(" "))
}

fn relation() -> impl Strategy<Value = RelationId> {
    proptest::sample::select(vec![
        RelationId::AtLocation,
        RelationId::IsA,
        RelationId::UsedFor,
    ])
}

fn triples() -> impl Strategy<Value = Vec<Triple>> {
    proptest::collection::vec((phrase(), relation(), phrase()), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .filter_map(|(i, (h, r, t))| Triple::new(&h, r, &t, format!("t:{i}")).ok())
            .collect()
    })
}

fn definitions() -> impl Strategy<Value = Vec<TermDefinition>> {
    proptest::collection::vec(
        (
            proptest::sample::select(vec!["bartender", "knife", "pub"]),
            phrase(),
            phrase(),
        ),
        1..12,
    )
    .prop_map(|v| {
        let mut sense: BTreeMap<&str, usize> = BTreeMap::new();
        v.into_iter()
            .map(|(term, a, b)| {
                let s = sense.entry(term).or_insert(0);
                *s += 1;
                TermDefinition::new(term, *s - 1, &format!("{a} {b}"))
            })
            .collect()
    })
}

fn side() -> impl Strategy<Value = Side> {
    prop_oneof![Just(Side::Head), Just(Side::Tail)]
}

proptest! {
    #[test]
    fn pattern_frequencies_count_minable_triples(ts in triples(), side in side(), max_len in 1usize..6) {
        let lex = TagLexicon::starter();
        let table = mine_patterns(&ts, &lex, side, max_len);
        for r in RelationId::ALL {
            let expected = ts
                .iter()
                .filter(|t| t.relation == r)
                .filter(|t| {
                    let slot = if side == Side::Head { &t.head } else { &t.tail };
                    let n = lex.tag(slot).iter().filter(|tok| tok.tag != Upos::Punct).count();
                    n >= 1 && n <= max_len
                })
                .count() as u64;
            prop_assert_eq!(table.total_frequency(r), expected);
        }
    }

    #[test]
    fn mining_ignores_input_order(
        (ts, shuffled) in triples().prop_flat_map(|t| (Just(t.clone()), Just(t).prop_shuffle()))
    ) {
        let lex = TagLexicon::starter();
        prop_assert_eq!(mine_patterns(&ts, &lex, Side::Tail, 8), mine_patterns(&shuffled, &lex, Side::Tail, 8));
    }

    #[test]
    fn top_k_is_idempotent_and_bounded(ts in triples(), k in 0usize..5) {
        let table = mine_patterns(&ts, &TagLexicon::starter(), Side::Tail, 8);
        let once = select_top_k(&table, k);
        prop_assert_eq!(&select_top_k(&once, k), &once);
        for (r, list) in once.iter() {
            prop_assert!(list.len() <= k);
            prop_assert_eq!(list, &table.patterns(r)[..list.len()]);
        }
    }

    #[test]
    fn candidate_spans_reslice_to_their_tails(ts in triples(), defs in definitions(), k in 1usize..6) {
        let lex = TagLexicon::starter();
        let patterns = select_top_k(&mine_patterns(&ts, &lex, Side::Tail, 8), k);
        let tagged: BTreeMap<String, _> = defs
            .iter()
            .map(|d| (d.source_id.clone(), lex.tag(&d.definition_text)))
            .collect();
        let cands = extract_candidates(&defs, &tagged, &patterns).unwrap();
        prop_assert_eq!(&cands, &extract_candidates(&defs, &tagged, &patterns).unwrap());
        for (rel, list) in &cands {
            let mut upper = 0;
            for d in &defs {
                for e in patterns.patterns(*rel) {
                    upper += match_spans(&tagged[&d.source_id], &e.pattern).len();
                }
            }
            prop_assert!(list.len() <= upper);
            for c in list {
                let tokens = &tagged[&c.source_id()];
                prop_assert!(c.span.0 < c.span.1 && c.span.1 <= tokens.len());
                prop_assert_eq!(span_text(tokens, c.span), c.tail.clone());
                prop_assert_ne!(c.tail.to_lowercase(), c.head.to_lowercase());
            }
        }
    }
}
