//! Dense and BM25 retrieval over the passage collection, plus TREC run files.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Passage;
use crate::embedding::{EmbeddingStore, TextEncoder};
use crate::error::{Error, Result};
use crate::text::terms;

const BM25_FORMAT_VERSION: u32 = 1;

/// Ranked results for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub results: Vec<(String, f64)>,
    pub tag: String,
}

fn rank_scores(ids: &[String], scores: Vec<(usize, f64)>, k: usize) -> Vec<(String, f64)> {
    let mut scored = scores;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0])));
    scored.truncate(k);
    scored.into_iter().map(|(row, s)| (ids[row].clone(), s)).collect()
}

/// Exact top-k by cosine; ties go to the smaller passage id.
pub fn dense_search(
    query_id: &str,
    query_text: &str,
    store: &EmbeddingStore,
    encoder: &dyn TextEncoder,
    k: usize,
    tag: &str,
) -> Result<RunEntry> {
    if store.is_empty() || k == 0 {
        return Err(Error::Validation("dense search needs a non-empty store and k >= 1".into()));
    }
    let scores = store.cosine_all(&encoder.encode(query_text))?;
    Ok(RunEntry {
        query_id: query_id.to_string(),
        results: rank_scores(store.ids(), scores.into_iter().enumerate().collect(), k),
        tag: tag.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Non-negative IDF: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
pub fn bm25_idf(n: usize, df: usize) -> f64 {
    (1.0 + (n as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
}

/// Contribution of one matching term to a document score.
pub fn bm25_term_score(idf: f64, tf: u32, dl: u32, avgdl: f64, params: Bm25Params) -> f64 {
    let tf = tf as f64;
    let norm = if avgdl > 0.0 { dl as f64 / avgdl } else { 1.0 };
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub params: Bm25Params,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<u32>,
    pub avgdl: f64,
    /// term -> (doc row, term frequency), sorted by row.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
}

#[derive(Serialize, Deserialize)]
struct Bm25File {
    version: u32,
    #[serde(flatten)]
    index: Bm25Index,
}

impl Bm25Index {
    pub fn build(passages: &[Passage], params: Bm25Params) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(passages.len());
        for (row, p) in passages.iter().enumerate() {
            if !seen.insert(p.passage_id.as_str()) {
                return Err(Error::Validation(format!("duplicate passage_id {}", p.passage_id)));
            }
            let toks = terms(&p.text);
            doc_lengths.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((row as u32, c));
            }
        }
        let avgdl = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Bm25Index {
            params,
            doc_ids: passages.iter().map(|p| p.passage_id.clone()).collect(),
            doc_lengths,
            avgdl,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Documents with a positive score, best first, at most `k`.
    pub fn search(&self, query_id: &str, query_text: &str, k: usize, tag: &str) -> RunEntry {
        let n = self.len();
        let mut acc = vec![0.0f64; n];
        let mut touched = vec![false; n];
        let unique: BTreeSet<String> = terms(query_text).into_iter().collect();
        for term in &unique {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = bm25_idf(n, list.len());
            for &(row, tf) in list {
                let row = row as usize;
                acc[row] += bm25_term_score(idf, tf, self.doc_lengths[row], self.avgdl, self.params);
                touched[row] = true;
            }
        }
        let scores = (0..n).filter(|&r| touched[r] && acc[r] > 0.0).map(|r| (r, acc[r])).collect();
        RunEntry {
            query_id: query_id.to_string(),
            results: rank_scores(&self.doc_ids, scores, k),
            tag: tag.to_string(),
        }
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(
            &mut w,
            &Bm25File {
                version: BM25_FORMAT_VERSION,
                index: self.clone(),
            },
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed: Bm25File = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if parsed.version != BM25_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported BM25 index version {}", parsed.version)));
        }
        Ok(parsed.index)
    }
}

/// Writes `qid Q0 pid rank score tag` lines, scores at six decimals.
pub fn write_run(entries: &[RunEntry], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        for (rank, (pid, score)) in e.results.iter().enumerate() {
            writeln!(w, "{} Q0 {} {} {:.6} {}", e.query_id, pid, rank + 1, score, e.tag).map_err(|er| Error::io(path, er))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<Vec<RunEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<RunEntry> = Vec::new();
    let mut finished: HashSet<String> = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::parse(path, i + 1, msg);
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, q0, pid, rank, score, tag] = fields[..] else {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        };
        if q0 != "Q0" {
            return Err(bad(format!("second field must be Q0, found {q0}")));
        }
        let rank: usize = rank.parse().map_err(|_| bad(format!("bad rank {rank}")))?;
        let score: f64 = score.parse().map_err(|_| bad(format!("bad score {score}")))?;
        if entries.last().is_none_or(|e| e.query_id != qid) {
            if let Some(prev) = entries.last() {
                finished.insert(prev.query_id.clone());
            }
            if finished.contains(qid) {
                return Err(bad(format!("query {qid} is not contiguous")));
            }
            entries.push(RunEntry {
                query_id: qid.to_string(),
                results: Vec::new(),
                tag: tag.to_string(),
            });
        }
        let entry = entries.last_mut().expect("entry pushed above");
        if rank != entry.results.len() + 1 {
            return Err(bad(format!("rank {rank} for {qid}, expected {}", entry.results.len() + 1)));
        }
        if let Some((_, prev)) = entry.results.last() {
            if score > *prev {
                return Err(bad(format!("score increases at rank {rank} for {qid}")));
            }
        }
        if entry.results.iter().any(|(p, _)| p == pid) {
            return Err(bad(format!("duplicate passage {pid} for {qid}")));
        }
        entry.results.push((pid.to_string(), score));
    }
    Ok(entries)
}
