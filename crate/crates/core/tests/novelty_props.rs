use defmine::corpus::{RelationId, Triple, TripleKey};
use defmine::embedding::WordEmbeddings;
use defmine::novelty::{
    build_reference_index, embedding_novelty_distance, is_novel, normalize_concept, novelty_rate,
    stem, NormalizationPipeline,
};
use proptest::prelude::*;

const WORDS: &[&str] = &[
    "bar", "bars", "the", "drinks", "drinking", "a", "person", "people", "serving", "of", "room",
    "rooms", "knife", "knives", "cooked", "cooking", "this", "is", "running", "ran",
];

fn phrase() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(WORDS), 1..4).prop_map(|w| w.join(" "))
}

fn relation() -> impl Strategy<Value = RelationId> {
    proptest::sample::select(vec![RelationId::IsA, RelationId::AtLocation])
}

fn triples(max: usize) -> impl Strategy<Value = Vec<Triple>> {
    proptest::collection::vec((phrase(), relation(), phrase()), 0..max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (h, r, t))| Triple::new(&h, r, &t, format!("r:{i}")).unwrap())
            .collect()
    })
}

fn keys() -> impl Strategy<Value = Vec<TripleKey>> {
    proptest::collection::vec((phrase(), relation(), phrase()), 0..20).prop_map(|v| {
        v.into_iter()
            .map(|(h, r, t)| TripleKey::new(h, r, t))
            .collect()
    })
}

proptest! {
    #[test]
    fn references_are_never_novel_against_themselves(refs in triples(20), agnostic in any::<bool>()) {
        let p = NormalizationPipeline::default();
        let index = build_reference_index(&refs, &p);
        for t in &refs {
            let v = is_novel(&t.key(), &index, &p, agnostic);
            prop_assert!(!v.novel);
            prop_assert!(v.matched_reference.is_some());
        }
    }

    #[test]
    fn more_references_never_make_a_candidate_novel(
        a in triples(15),
        b in triples(15),
        cands in keys(),
        agnostic in any::<bool>(),
    ) {
        let p = NormalizationPipeline::default();
        let small = build_reference_index(&a, &p);
        let all: Vec<Triple> = a.iter().chain(&b).cloned().collect();
        let big = build_reference_index(&all, &p);
        for c in &cands {
            let before = is_novel(c, &small, &p, agnostic);
            let after = is_novel(c, &big, &p, agnostic);
            prop_assert!(before.novel || !after.novel);
            prop_assert_eq!(after.novel, after.matched_reference.is_none());
        }
        let r_small = novelty_rate(&cands, &small, &p, agnostic);
        let r_big = novelty_rate(&cands, &big, &p, agnostic);
        prop_assert!(r_big.novel <= r_small.novel);
        prop_assert!(r_big.rate <= r_small.rate);
    }

    #[test]
    fn relation_agnostic_matching_is_looser(refs in triples(15), cands in keys()) {
        let p = NormalizationPipeline::default();
        let index = build_reference_index(&refs, &p);
        for c in &cands {
            if !is_novel(c, &index, &p, false).novel {
                prop_assert!(!is_novel(c, &index, &p, true).novel);
            }
        }
    }

    #[test]
    fn normalizing_a_bag_reproduces_it(text in phrase()) {
        let p = NormalizationPipeline::default();
        let bag = normalize_concept(&text, &p);
        // A stem that happens to spell a stopword would be dropped on the second pass.
        prop_assume!(bag.stems().iter().all(|s| !p.is_stopword(s)));
        prop_assert_eq!(normalize_concept(&bag.to_text(), &p), bag);
    }

    #[test]
    fn stemming_reaches_a_fixpoint(word in "[a-z]{1,12}") {
        let s = stem(&word);
        prop_assert_eq!(stem(&s), s);
    }

    #[test]
    fn embedding_distance_is_non_negative_and_zero_on_a_reference(
        refs in keys().prop_filter("non-empty", |k| !k.is_empty()),
        cand in (phrase(), relation(), phrase()),
        vecs in proptest::collection::vec(-1.0f64..1.0, WORDS.len() * 2),
        pick in any::<proptest::sample::Index>(),
    ) {
        let mut e = WordEmbeddings::new(2);
        for (i, w) in WORDS.iter().enumerate() {
            e.insert(w, vecs[2 * i..2 * i + 2].to_vec());
        }
        let c = TripleKey::new(cand.0, cand.1, cand.2);
        let d = embedding_novelty_distance(&c, &refs, &e).unwrap();
        prop_assert!(d.distance >= 0.0);
        let same = refs[pick.index(refs.len())].clone();
        let d = embedding_novelty_distance(&same, &refs, &e).unwrap();
        prop_assert_eq!(d.distance, 0.0);
    }
}
