mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use itercqr::data::{build_instances, generate_toy_corpus, qrels_lines};
use itercqr::evaluation::{evaluate_run, evaluate_slices, Slice};
use itercqr::retrieval::{dense_search, read_run, write_run, RunEntry};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn run_file_matches_golden_bytes() {
    let entries = vec![
        RunEntry {
            query_id: "s001_1".into(),
            results: vec![("s001_p1".into(), 0.9123449), ("s000_p2".into(), 0.5), ("s001_p3".into(), -0.125)],
            tag: "dense".into(),
        },
        RunEntry {
            query_id: "s001_2".into(),
            results: vec![("s001_p2".into(), 2.125)],
            tag: "bm25".into(),
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.trec");
    write_run(&entries, &out).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("golden.trec")).unwrap());
    let back = read_run(&out).unwrap();
    for (a, b) in back.iter().zip(&entries) {
        assert_eq!(a.query_id, b.query_id);
        for ((pa, sa), (pb, sb)) in a.results.iter().zip(&b.results) {
            assert_eq!(pa, pb);
            assert!((sa - sb).abs() <= 5e-7);
        }
    }
}

#[test]
fn four_query_report_matches_hand_table() {
    let reports = evaluate_run(&fixture("eval.trec"), &fixture("eval.qrels"), &[], &[Slice::Overall]).unwrap();
    let r = &reports[0];
    assert_eq!(r.num_queries, 4);
    // q9 has no judgments; q5 is judged but absent from the run.
    assert_eq!(r.excluded_queries, 1);
    let inv_log3 = 1.0 / 3f64.log2();
    let q3_ndcg = 1.0 / (1.0 + inv_log3);
    let table = [
        ("q1", 1.0, 1.0, 1.0, 1.0),
        ("q2", 0.5, inv_log3, 1.0, 1.0),
        ("q3", 1.0, q3_ndcg, 1.0, 1.0),
        ("q4", 1.0 / 12.0, 0.0, 0.0, 1.0),
    ];
    for (q, mrr, ndcg, r10, r100) in table {
        let m = r.per_query[q];
        assert!((m.mrr - mrr).abs() < 1e-12, "{q}");
        assert!((m.ndcg_3 - ndcg).abs() < 1e-12, "{q}");
        assert_eq!((m.recall_10, m.recall_100), (r10, r100), "{q}");
    }
    assert!((r.mrr - 0.645833).abs() < 1e-4);
    assert!((r.ndcg_3 - 0.561020).abs() < 1e-4);
    assert_eq!((r.recall_10, r.recall_100), (0.75, 1.0));
    let json: serde_json::Value = serde_json::to_value(r).unwrap();
    for key in ["slice", "num_queries", "mrr", "ndcg@3", "recall@10", "recall@100"] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn slices_partition_the_evaluated_queries() {
    let toy = common::Toy::new(8, 12, 4, 0.5);
    let corpus = generate_toy_corpus(8, 12, 4, 12).unwrap();
    let instances = build_instances(&corpus.sessions);
    let run: Vec<RunEntry> = instances
        .iter()
        .map(|i| dense_search(&i.instance_id, &i.current_query, &toy.store, &toy.encoder, 100, "raw").unwrap())
        .collect();
    let qrels = toy.qrels(&instances);
    let reports = evaluate_slices(&run, &qrels, &instances, &Slice::ALL).unwrap();
    let by = |s: Slice| reports.iter().find(|r| r.slice == s.as_str()).unwrap();
    let overall = by(Slice::Overall);
    for (a, b) in [(Slice::LabelShifted, Slice::LabelConcentrated), (Slice::PidShifted, Slice::PidConcentrated)] {
        let (a, b) = (by(a), by(b));
        assert_eq!(a.num_queries + b.num_queries, overall.num_queries);
        let weighted = (a.mrr * a.num_queries as f64 + b.mrr * b.num_queries as f64) / overall.num_queries as f64;
        assert!((weighted - overall.mrr).abs() < 1e-12);
        let ids: BTreeSet<&String> = a.per_query.keys().chain(b.per_query.keys()).collect();
        assert_eq!(ids.len(), overall.num_queries);
    }
    // Turn-1 instances have no preceding gold passages, so they count as
    // shifted under the passage criterion.
    let pid_shifted = by(Slice::PidShifted);
    for inst in instances.iter().filter(|i| i.turn_index == 1) {
        assert!(pid_shifted.per_query.contains_key(&inst.instance_id));
    }

    let dir = tempfile::tempdir().unwrap();
    let qrels_path = dir.path().join("qrels");
    fs::write(&qrels_path, qrels_lines(&instances).join("\n")).unwrap();
    let run_path = dir.path().join("run");
    write_run(&run, &run_path).unwrap();
    let pid_only = evaluate_run(&run_path, &qrels_path, &instances, &[Slice::Overall, Slice::PidShifted, Slice::PidConcentrated]).unwrap();
    assert_eq!(pid_only.len(), 3);
}
