//! Binary-relevance retrieval metrics and topic-shift slicing.
//!
//! Only queries present in both the run and the qrels are evaluated, as in
//! trec_eval. Run ranks are taken as written.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ReformulationInstance;
use crate::error::{Error, Result};
use crate::retrieval::{read_run, RunEntry};

/// query id -> relevant passage ids.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

/// Reads `qid iter pid rel` lines; rows with `rel <= 0` are dropped.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, _, pid, rel] = fields[..] else {
            return Err(Error::parse(path, i + 1, format!("expected 4 fields, found {}", fields.len())));
        };
        let rel: i64 = rel
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad relevance {rel}")))?;
        if rel > 0 {
            qrels.entry(qid.to_string()).or_default().insert(pid.to_string());
        }
    }
    Ok(qrels)
}

pub fn reciprocal_rank(ranking: &[(String, f64)], relevant: &BTreeSet<String>) -> f64 {
    ranking
        .iter()
        .position(|(pid, _)| relevant.contains(pid))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn ndcg_at_3(ranking: &[(String, f64)], relevant: &BTreeSet<String>) -> f64 {
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(3)
        .enumerate()
        .filter(|(_, (pid, _))| relevant.contains(pid))
        .map(|(i, _)| gain(i))
        .sum();
    let idcg: f64 = (0..relevant.len().min(3)).map(gain).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn recall_at_k(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|(pid, _)| relevant.contains(pid)).count();
    hits as f64 / relevant.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub mrr: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_3: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@100")]
    pub recall_100: f64,
}

impl QueryMetrics {
    pub fn compute(ranking: &[(String, f64)], relevant: &BTreeSet<String>) -> Self {
        QueryMetrics {
            mrr: reciprocal_rank(ranking, relevant),
            ndcg_3: ndcg_at_3(ranking, relevant),
            recall_10: recall_at_k(ranking, relevant, 10),
            recall_100: recall_at_k(ranking, relevant, 100),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    Overall,
    LabelShifted,
    LabelConcentrated,
    PidShifted,
    PidConcentrated,
}

impl Slice {
    pub const ALL: [Slice; 5] = [
        Slice::Overall,
        Slice::LabelShifted,
        Slice::LabelConcentrated,
        Slice::PidShifted,
        Slice::PidConcentrated,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Slice::Overall => "overall",
            Slice::LabelShifted => "label_shifted",
            Slice::LabelConcentrated => "label_concentrated",
            Slice::PidShifted => "pid_shifted",
            Slice::PidConcentrated => "pid_concentrated",
        }
    }

    /// Whether an instance belongs to the slice; unknown shift status
    /// keeps it out of both halves of that criterion.
    pub fn contains(&self, inst: &ReformulationInstance) -> bool {
        match self {
            Slice::Overall => true,
            Slice::LabelShifted => inst.topic_shift_by_label == Some(true),
            Slice::LabelConcentrated => inst.topic_shift_by_label == Some(false),
            Slice::PidShifted => inst.topic_shift_by_pid == Some(true),
            Slice::PidConcentrated => inst.topic_shift_by_pid == Some(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub slice: String,
    pub num_queries: usize,
    pub mrr: f64,
    #[serde(rename = "ndcg@3")]
    pub ndcg_3: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@100")]
    pub recall_100: f64,
    /// Run queries that had no qrels entry.
    pub excluded_queries: usize,
    pub per_query: BTreeMap<String, QueryMetrics>,
}

impl MetricReport {
    pub fn from_queries(slice: &str, per_query: BTreeMap<String, QueryMetrics>, excluded_queries: usize) -> Self {
        let n = per_query.len();
        let mean = |f: fn(&QueryMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_query.values().map(f).sum::<f64>() / n as f64
            }
        };
        MetricReport {
            slice: slice.to_string(),
            num_queries: n,
            mrr: mean(|m| m.mrr),
            ndcg_3: mean(|m| m.ndcg_3),
            recall_10: mean(|m| m.recall_10),
            recall_100: mean(|m| m.recall_100),
            excluded_queries,
            per_query,
        }
    }
}

/// Per-query metrics for every run query that has qrels, plus how many had
/// none. Fails when the two id sets do not intersect at all.
pub fn evaluate_entries(run: &[RunEntry], qrels: &Qrels) -> Result<(BTreeMap<String, QueryMetrics>, usize)> {
    let mut per_query = BTreeMap::new();
    let mut excluded = 0;
    for entry in run {
        match qrels.get(&entry.query_id) {
            Some(rel) if !rel.is_empty() => {
                per_query.insert(entry.query_id.clone(), QueryMetrics::compute(&entry.results, rel));
            }
            _ => excluded += 1,
        }
    }
    if per_query.is_empty() {
        return Err(Error::Validation(format!(
            "none of the {} run queries appear in the qrels; check the query id scheme",
            run.len()
        )));
    }
    Ok((per_query, excluded))
}

/// One report per requested slice. Slices other than `Overall` need the
/// instances so shift flags can be looked up by query id.
pub fn evaluate_slices(
    run: &[RunEntry],
    qrels: &Qrels,
    instances: &[ReformulationInstance],
    slices: &[Slice],
) -> Result<Vec<MetricReport>> {
    let (per_query, excluded) = evaluate_entries(run, qrels)?;
    let by_id: HashMap<&str, &ReformulationInstance> =
        instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
    slices
        .iter()
        .map(|slice| {
            let subset = match slice {
                Slice::Overall => per_query.clone(),
                _ => per_query
                    .iter()
                    .filter(|(qid, _)| by_id.get(qid.as_str()).is_some_and(|inst| slice.contains(inst)))
                    .map(|(q, m)| (q.clone(), *m))
                    .collect(),
            };
            Ok(MetricReport::from_queries(slice.as_str(), subset, excluded))
        })
        .collect()
}

pub fn evaluate_run(
    run_path: &Path,
    qrels_path: &Path,
    instances: &[ReformulationInstance],
    slices: &[Slice],
) -> Result<Vec<MetricReport>> {
    let run = read_run(run_path)?;
    let qrels = read_qrels(qrels_path)?;
    evaluate_slices(&run, &qrels, instances, slices)
}
