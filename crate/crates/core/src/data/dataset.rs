//! Versioned training datasets: D0 holds one rewrite per instance, later
//! versions hold a fixed-size candidate set per instance.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ReformulationInstance;
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmBootstrap,
    File,
    Generated,
}

/// A generated query with its total sequence log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Raw cosine rewards, one per candidate; absent for instances without
    /// gold passages.
    pub rewards: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Rewrite(String),
    Candidates(CandidateSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub instance_id: String,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetVersion {
    pub iteration: usize,
    /// Candidates per row; 1 for the bootstrap version.
    pub n: usize,
    pub provenance: Provenance,
    /// Iteration of the model that produced the candidates.
    pub generated_by: Option<usize>,
    pub rows: Vec<DatasetRow>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: usize,
    n: usize,
    provenance: Provenance,
    generated_by: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RowRecord {
    Rewrite {
        instance_id: String,
        rewrite: String,
    },
    Candidates {
        instance_id: String,
        candidates: Vec<Candidate>,
        rewards: Option<Vec<f64>>,
    },
}

impl DatasetVersion {
    pub fn bootstrap(provenance: Provenance, rows: Vec<(String, String)>) -> Self {
        DatasetVersion {
            iteration: 0,
            n: 1,
            provenance,
            generated_by: None,
            rows: rows
                .into_iter()
                .map(|(instance_id, rewrite)| DatasetRow {
                    instance_id,
                    targets: Targets::Rewrite(rewrite),
                })
                .collect(),
        }
    }

    /// Structural invariants: unique ids, target kind matches the iteration,
    /// and every candidate set has exactly `n` entries.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.instance_id.as_str()) {
                return Err(Error::Format(format!("duplicate instance_id {}", row.instance_id)));
            }
            match (&row.targets, self.iteration) {
                (Targets::Rewrite(text), 0) => {
                    if text.trim().is_empty() {
                        return Err(Error::Format(format!("empty rewrite for {}", row.instance_id)));
                    }
                }
                (Targets::Candidates(set), t) if t > 0 => {
                    if set.candidates.len() != self.n {
                        return Err(Error::Format(format!(
                            "{}: expected {} candidates, found {}",
                            row.instance_id,
                            self.n,
                            set.candidates.len()
                        )));
                    }
                    if let Some(r) = &set.rewards {
                        if r.len() != self.n {
                            return Err(Error::Format(format!(
                                "{}: {} rewards for {} candidates",
                                row.instance_id,
                                r.len(),
                                self.n
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::Format(format!(
                        "{}: target kind does not match iteration {}",
                        row.instance_id, self.iteration
                    )))
                }
            }
        }
        Ok(())
    }

    /// Every row must name a known instance.
    pub fn check_instances(&self, instances: &[ReformulationInstance]) -> Result<()> {
        let known: HashSet<&str> = instances.iter().map(|i| i.instance_id.as_str()).collect();
        match self.rows.iter().find(|r| !known.contains(r.instance_id.as_str())) {
            Some(r) => Err(Error::Validation(format!("unknown instance_id {}", r.instance_id))),
            None => Ok(()),
        }
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            version: FORMAT_VERSION,
            iteration: self.iteration,
            n: self.n,
            provenance: self.provenance,
            generated_by: self.generated_by,
        };
        let mut put = |value: String| writeln!(w, "{value}").map_err(|e| Error::io(path, e));
        put(serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?)?;
        for row in &self.rows {
            let record = match &row.targets {
                Targets::Rewrite(text) => RowRecord::Rewrite {
                    instance_id: row.instance_id.clone(),
                    rewrite: text.clone(),
                },
                Targets::Candidates(set) => RowRecord::Candidates {
                    instance_id: row.instance_id.clone(),
                    candidates: set.candidates.clone(),
                    rewards: set.rewards.clone(),
                },
            };
            put(serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| Error::parse(path, 1, format!("bad header: {e}")))?
            }
            None => return Err(Error::Format(format!("{}: missing header", path.display()))),
        };
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: dataset format version {} (expected {FORMAT_VERSION})",
                path.display(),
                header.version
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: RowRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            rows.push(match record {
                RowRecord::Rewrite { instance_id, rewrite } => DatasetRow {
                    instance_id,
                    targets: Targets::Rewrite(rewrite),
                },
                RowRecord::Candidates {
                    instance_id,
                    candidates,
                    rewards,
                } => DatasetRow {
                    instance_id,
                    targets: Targets::Candidates(CandidateSet { candidates, rewards }),
                },
            });
        }
        let version = DatasetVersion {
            iteration: header.iteration,
            n: header.n,
            provenance: header.provenance,
            generated_by: header.generated_by,
            rows,
        };
        version
            .validate()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(version)
    }
}
