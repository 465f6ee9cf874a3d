//! Conversational corpus schema, history construction and dataset versions.

mod dataset;
mod toy;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::SEP;

pub use dataset::{Candidate, CandidateSet, DatasetRow, DatasetVersion, Provenance, Targets};
pub use toy::{generate_toy_corpus, imperfect_rewrites, split_sessions, ToyCorpus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "turn")]
    pub turn_index: usize,
    pub query: String,
    #[serde(default)]
    pub answer: String,
    #[serde(rename = "gold_pids", default)]
    pub gold_passage_ids: Vec<String>,
    #[serde(default)]
    pub topic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
}

impl Session {
    fn validate(&self) -> std::result::Result<(), String> {
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != i + 1 {
                return Err(format!(
                    "session {}: turn {} found where {} was expected",
                    self.session_id,
                    turn.turn_index,
                    i + 1
                ));
            }
            if turn.query.trim().is_empty() {
                return Err(format!("session {}: turn {} has an empty query", self.session_id, i + 1));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    #[serde(rename = "pid")]
    pub passage_id: String,
    pub text: String,
}

/// One training unit: a turn together with its serialized history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReformulationInstance {
    pub instance_id: String,
    pub session_id: String,
    pub turn_index: usize,
    pub current_query: String,
    pub history_text: String,
    pub gold_passage_ids: Vec<String>,
    pub bootstrap_rewrite: Option<String>,
    pub topic_shift_by_label: Option<bool>,
    pub topic_shift_by_pid: Option<bool>,
}

impl ReformulationInstance {
    /// Model input: the current query followed by the history, if any.
    pub fn model_input(&self) -> String {
        if self.history_text.is_empty() {
            self.current_query.clone()
        } else {
            format!("{} {} {}", self.current_query, SEP, self.history_text)
        }
    }
}

pub fn instance_id(session_id: &str, turn_index: usize) -> String {
    format!("{session_id}_{turn_index}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub passages: Vec<Passage>,
}

impl Corpus {
    pub fn passage_map(&self) -> HashMap<&str, &Passage> {
        self.passages.iter().map(|p| (p.passage_id.as_str(), p)).collect()
    }
}

/// Read a JSONL file, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_sessions(path: &Path) -> Result<Vec<Session>> {
    let sessions: Vec<Session> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for s in &sessions {
        if !seen.insert(s.session_id.as_str()) {
            return Err(Error::Validation(format!("duplicate session_id {}", s.session_id)));
        }
        s.validate().map_err(Error::Validation)?;
    }
    Ok(sessions)
}

pub fn load_passages(path: &Path) -> Result<Vec<Passage>> {
    let passages: Vec<Passage> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for p in &passages {
        if !seen.insert(p.passage_id.as_str()) {
            return Err(Error::Validation(format!("duplicate passage_id {}", p.passage_id)));
        }
        if p.text.trim().is_empty() {
            return Err(Error::Validation(format!("passage {} has empty text", p.passage_id)));
        }
    }
    Ok(passages)
}

pub fn load_corpus(sessions_path: &Path, passages_path: &Path) -> Result<Corpus> {
    Ok(Corpus {
        sessions: load_sessions(sessions_path)?,
        passages: load_passages(passages_path)?,
    })
}

/// Serialized history for turn `k` (1-based): previous turns, most recent
/// first, each as `question: <q> answer: <a>`, joined by `<sep>`.
pub fn build_history(session: &Session, k: usize) -> Result<String> {
    if k == 0 || k > session.turns.len() {
        return Err(Error::Bounds {
            index: k,
            len: session.turns.len(),
        });
    }
    let parts: Vec<String> = session.turns[..k - 1]
        .iter()
        .rev()
        .map(|t| format!("question: {} answer: {}", t.query, t.answer))
        .collect();
    Ok(parts.join(&format!(" {SEP} ")))
}

/// One instance per turn, with both topic-shift flags filled in.
pub fn build_instances(sessions: &[Session]) -> Vec<ReformulationInstance> {
    let mut out = Vec::new();
    for session in sessions {
        let mut seen_pids: HashSet<&str> = HashSet::new();
        for (i, turn) in session.turns.iter().enumerate() {
            let k = i + 1;
            let topic_shift_by_label = if k == 1 {
                Some(false)
            } else {
                match (&session.turns[i - 1].topic, &turn.topic) {
                    (Some(prev), Some(cur)) => Some(prev != cur),
                    _ => None,
                }
            };
            let topic_shift_by_pid = if turn.gold_passage_ids.is_empty() {
                None
            } else {
                Some(!turn.gold_passage_ids.iter().any(|p| seen_pids.contains(p.as_str())))
            };
            seen_pids.extend(turn.gold_passage_ids.iter().map(String::as_str));
            out.push(ReformulationInstance {
                instance_id: instance_id(&session.session_id, k),
                session_id: session.session_id.clone(),
                turn_index: k,
                current_query: turn.query.clone(),
                history_text: build_history(session, k).expect("k within range"),
                gold_passage_ids: turn.gold_passage_ids.clone(),
                bootstrap_rewrite: None,
                topic_shift_by_label,
                topic_shift_by_pid,
            });
        }
    }
    out
}

/// Sample whole sessions until at least `fraction` of the instances are
/// covered. Output keeps the input order.
pub fn sample_fraction(
    instances: &[ReformulationInstance],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ReformulationInstance>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(instances.to_vec());
    }
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for inst in instances {
        match counts.iter_mut().find(|(s, _)| *s == inst.session_id) {
            Some((_, c)) => *c += 1,
            None => counts.push((&inst.session_id, 1)),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    counts.shuffle(&mut rng);
    let target = fraction * instances.len() as f64;
    let mut covered = 0usize;
    let mut chosen = HashSet::new();
    for (session, count) in counts {
        if covered as f64 >= target - 1e-9 {
            break;
        }
        chosen.insert(session);
        covered += count;
    }
    Ok(instances
        .iter()
        .filter(|i| chosen.contains(i.session_id.as_str()))
        .cloned()
        .collect())
}

/// Qrels rows (`qid 0 pid 1`) for every instance with gold passages.
pub fn qrels_lines(instances: &[ReformulationInstance]) -> Vec<String> {
    instances
        .iter()
        .flat_map(|inst| {
            inst.gold_passage_ids
                .iter()
                .map(move |pid| format!("{} 0 {} 1", inst.instance_id, pid))
        })
        .collect()
}
