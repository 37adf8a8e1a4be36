use std::io::Cursor;

use mvp_core::data::*;
use mvp_core::Error;
use proptest::prelude::*;

fn small_spec() -> CorpusSpec {
    CorpusSpec {
        records: 200,
        ..CorpusSpec::default()
    }
}

fn serialize(records: &[RankingRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_records_to(&mut buf, records).unwrap();
    buf
}

#[test]
fn passage_equal_to_query_ranks_first_with_one_aspect() {
    let spec = CorpusSpec {
        aspects: 1,
        rule: RelevanceRule::SumOverlap,
        ..CorpusSpec::default()
    };
    let records = generate_corpus(&CorpusSpec {
        records: 20,
        ..spec.clone()
    })
    .unwrap();
    for r in records {
        let mut cands = r.passages();
        cands.push(r.query.clone());
        let rel: Vec<usize> = cands.iter().map(|c| spec.relevance(&r.query, c)).collect();
        let ranks = ranks_from_relevance(&rel);
        let best = rel.iter().copied().max().unwrap();
        assert_eq!(rel[cands.len() - 1], best);
        // Ties with an earlier full-overlap passage are broken by index.
        assert!(rel[..cands.len() - 1].contains(&best) || ranks[cands.len() - 1] == 1);
    }
}

#[test]
fn monotone_rule_orders_by_overlap() {
    assert_eq!(ranks_from_relevance(&[3, 1]), vec![1, 2]);
    assert_eq!(ranks_from_relevance(&[1, 3]), vec![2, 1]);
    assert_eq!(ranks_from_relevance(&[2, 2, 5]), vec![2, 3, 1]);
    assert_eq!(RelevanceRule::SumOverlap.apply(&[2, 1]), 3);
    assert_eq!(RelevanceRule::MinOverlap.apply(&[2, 1]), 1);
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let spec = CorpusSpec {
        seed: 7,
        ..small_spec()
    };
    let a = serialize(&generate_corpus(&spec).unwrap());
    let b = serialize(&generate_corpus(&spec).unwrap());
    assert_eq!(a, b);
    let c = serialize(&generate_corpus(&CorpusSpec { seed: 8, ..spec }).unwrap());
    assert_ne!(a, c);
}

#[test]
fn stored_ranks_match_recomputed_relevance() {
    let spec = small_spec();
    for r in generate_corpus(&spec).unwrap() {
        let rel: Vec<usize> = r
            .candidates
            .iter()
            .map(|c| spec.relevance(&r.query, &c.tokens))
            .collect();
        assert_eq!(ranks_from_relevance(&rel), r.ranks);
        assert_eq!(
            r.relevance.clone().unwrap(),
            rel.iter().map(|&v| v as f64).collect::<Vec<_>>()
        );
        r.validate(Some(spec.vocab_size)).unwrap();
    }
}

#[test]
fn min_overlap_differs_from_sum_overlap() {
    let spec = small_spec();
    let sum = CorpusSpec {
        rule: RelevanceRule::SumOverlap,
        ..spec.clone()
    };
    let records = generate_corpus(&spec).unwrap();
    let differing = records
        .iter()
        .filter(|r| {
            let s: Vec<usize> = r
                .candidates
                .iter()
                .map(|c| sum.relevance(&r.query, &c.tokens))
                .collect();
            ranks_from_relevance(&s) != r.ranks
        })
        .count();
    assert!(differing * 10 >= records.len(), "{differing} of {}", records.len());
}

#[test]
fn invalid_specs_rejected() {
    let tiny_vocab = CorpusSpec {
        vocab_size: 20,
        ..CorpusSpec::default()
    };
    assert!(matches!(generate_corpus(&tiny_vocab), Err(Error::Spec(_))));
    let no_aspects = CorpusSpec {
        aspects: 0,
        ..CorpusSpec::default()
    };
    assert!(matches!(generate_corpus(&no_aspects), Err(Error::Spec(_))));
    assert!(CorpusSpec::parse("records=10\nbogus=1\n").is_err());
    let parsed = CorpusSpec::parse("# corpus\nrecords = 10\nrule=sum-overlap\n").unwrap();
    assert_eq!(parsed.records, 10);
    assert_eq!(parsed.rule, RelevanceRule::SumOverlap);
}

#[test]
fn empty_input_reads_as_empty() {
    assert!(read_records_from(Cursor::new("")).unwrap().is_empty());
    assert!(read_records_from(Cursor::new(format!("{RECORDS_HEADER}\n")))
        .unwrap()
        .is_empty());
}

#[test]
fn thousand_record_round_trip() {
    let records = generate_corpus(&CorpusSpec {
        records: 1000,
        ..CorpusSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
}

#[test]
fn rank_zero_rejected_with_line_number() {
    let text = format!(
        "{RECORDS_HEADER}\n{}\n{}\n",
        r#"{"query_id":"a","query":[4],"candidates":[{"pid":"x","tokens":[5]},{"pid":"y","tokens":[6]}],"ranks":[1,2]}"#,
        r#"{"query_id":"b","query":[4],"candidates":[{"pid":"x","tokens":[5]},{"pid":"y","tokens":[6]}],"ranks":[0,1]}"#
    );
    match read_records_from(Cursor::new(text)) {
        Err(Error::Parse { line: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_and_duplicate_lines_rejected() {
    let good = r#"{"query_id":"a","query":[4],"candidates":[{"pid":"x","tokens":[5]},{"pid":"y","tokens":[6]}],"ranks":[2,1]}"#;
    let dup = format!("{RECORDS_HEADER}\n{good}\n{good}\n");
    assert!(matches!(read_records_from(Cursor::new(dup)), Err(Error::Integrity(_))));
    let broken = format!("{RECORDS_HEADER}\n{good}\n{{\"query_id\":\n");
    assert!(matches!(
        read_records_from(Cursor::new(broken)),
        Err(Error::Parse { line: 3, .. })
    ));
    let headerless = format!("{good}\n");
    assert!(matches!(
        read_records_from(Cursor::new(headerless)),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn split_sizes_and_determinism() {
    let records = generate_corpus(&CorpusSpec {
        records: 1000,
        ..CorpusSpec::default()
    })
    .unwrap();
    let s = split(&records, (0.8, 0.1, 0.1), 3).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (800, 100, 100));
    assert_eq!(s, split(&records, (0.8, 0.1, 0.1), 3).unwrap());
    let mut ids: Vec<&str> = s
        .train
        .iter()
        .chain(&s.validation)
        .chain(&s.test)
        .map(|r| r.query_id.as_str())
        .collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 1000);
    let all = split(&records, (1.0, 0.0, 0.0), 3).unwrap();
    assert_eq!(all.train.len(), 1000);
    assert!(matches!(split(&records, (0.5, 0.1, 0.1), 3), Err(Error::Spec(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranks_are_permutations(rel in proptest::collection::vec(0usize..5, 2..20)) {
        let ranks = ranks_from_relevance(&rel);
        let mut sorted = ranks.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (1..=rel.len()).collect::<Vec<_>>());
        for i in 0..rel.len() {
            for j in 0..rel.len() {
                if rel[i] > rel[j] || (rel[i] == rel[j] && i < j) {
                    prop_assert!(ranks[i] < ranks[j]);
                }
            }
        }
    }

    #[test]
    fn record_round_trip(seed in any::<u64>(), n in 2usize..12) {
        let spec = CorpusSpec { seed, n, records: 3, rule: RelevanceRule::SumOverlap, ..CorpusSpec::default() };
        let records = generate_corpus(&spec).unwrap();
        let back = read_records_from(Cursor::new(serialize(&records))).unwrap();
        prop_assert_eq!(back, records);
    }
}
