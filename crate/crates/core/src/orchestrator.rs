//! The iteration loop: bootstrap training, candidate generation with
//! rewards, MBR or top-1 training, checkpointing and resume.
//!
//! Layout of a run directory:
//!
//! ```text
//! <runs_dir>/<name>/manifest.json
//! <runs_dir>/<name>/.lock
//! <runs_dir>/<name>/iter<t>/{model.bin, model.vocab, dataset.jsonl, stats.jsonl}
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CandidateSet, DatasetRow, DatasetVersion, Provenance, ReformulationInstance, Targets};
use crate::embedding::{EmbeddingStore, TextEncoder};
use crate::error::{Error, Result};
use crate::generator::{Adam, AdamConfig, Generator, GeneratorConfig, Vocab};
use crate::training::{compute_rewards, select_top1, train_epoch, EpochContext, EpochStats, Phase};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Candidates per instance.
    pub n: usize,
    pub beam_width: usize,
    pub tau: usize,
    /// Last iteration index; iterations 0..=T run.
    #[serde(rename = "T")]
    pub iterations: usize,
    pub epochs_init: usize,
    pub epochs_mbr: usize,
    pub epochs_top1: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_query_len: usize,
    pub max_source_len: usize,
    pub embedding_size: usize,
    pub hidden_size: usize,
    pub copy_attention: bool,
    pub init_scale: f64,
    pub seed: u64,
    pub data_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        RunConfig {
            n: 10,
            beam_width: 10,
            tau: 1,
            iterations: 3,
            epochs_init: 5,
            epochs_mbr: 2,
            epochs_top1: 5,
            learning_rate: 1e-5,
            batch_size: 8,
            max_query_len: 32,
            max_source_len: g.max_source_len,
            embedding_size: g.embedding_size,
            hidden_size: g.hidden_size,
            copy_attention: g.copy_attention,
            init_scale: g.init_scale,
            seed: 0,
            data_fraction: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.tau > self.iterations {
            return fail(format!("tau = {} exceeds T = {}", self.tau, self.iterations));
        }
        if self.epochs_init == 0 || self.epochs_mbr == 0 || self.epochs_top1 == 0 {
            return fail("epoch counts must be at least 1".into());
        }
        if self.n == 0 || self.beam_width < self.n {
            return fail(format!("need 1 <= n <= beam_width, got n = {}, beam_width = {}", self.n, self.beam_width));
        }
        if self.batch_size == 0 || self.max_query_len == 0 || self.max_source_len == 0 {
            return fail("batch_size, max_query_len and max_source_len must be positive".into());
        }
        if self.embedding_size == 0 || self.hidden_size == 0 {
            return fail("layer sizes must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("invalid learning rate {}", self.learning_rate));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return fail(format!("data_fraction {} outside (0, 1]", self.data_fraction));
        }
        Ok(())
    }

    pub fn phase(&self, t: usize) -> Phase {
        Phase::for_iteration(t, self.tau)
    }

    pub fn epochs(&self, phase: Phase) -> usize {
        match phase {
            Phase::Init => self.epochs_init,
            Phase::Mbr => self.epochs_mbr,
            Phase::Top1 => self.epochs_top1,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            embedding_size: self.embedding_size,
            hidden_size: self.hidden_size,
            max_decode_len: self.max_query_len,
            max_source_len: self.max_source_len,
            copy_attention: self.copy_attention,
            init_scale: self.init_scale,
            seed: derive_seed(self.seed, 0),
        }
    }
}

/// Per-iteration seed from the run seed.
pub fn derive_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub phase: Phase,
    /// Iteration whose model produced this dataset version.
    pub generated_by: Option<usize>,
    pub provenance: Provenance,
    pub dataset: Artifact,
    pub model: Artifact,
    pub vocab: Artifact,
    pub stats: Artifact,
    /// Mean raw reward of the best candidate per instance in this dataset.
    pub dataset_top1_reward: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    pub config: RunConfig,
    pub iterations: Vec<IterationRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {} is not supported", m.version)));
        }
        Ok(m)
    }

    fn persist(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn phases(&self) -> Vec<Phase> {
        self.iterations.iter().map(|r| r.phase).collect()
    }

    pub fn last_completed(&self) -> Option<usize> {
        self.iterations.iter().filter(|r| r.completed).map(|r| r.t).max()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Everything a run consumes besides its configuration.
pub struct RunInputs<'a> {
    /// Training instances; every dataset version covers exactly these.
    pub instances: &'a [ReformulationInstance],
    pub store: &'a EmbeddingStore,
    pub encoder: &'a dyn TextEncoder,
    pub d0: &'a DatasetVersion,
    pub vocab: &'a Vocab,
}

/// Exclusive ownership of a run directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Validation(format!("{} is locked by another run (remove the file if stale)", path.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Orchestrator<'a> {
    pub config: RunConfig,
    pub name: String,
    pub run_dir: PathBuf,
    inputs: RunInputs<'a>,
    by_id: HashMap<String, ReformulationInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub finished: bool,
    pub final_model: Option<PathBuf>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(config: RunConfig, runs_dir: &Path, name: &str, inputs: RunInputs<'a>) -> Result<Self> {
        config.validate()?;
        if inputs.instances.is_empty() {
            return Err(Error::Validation("no training instances".into()));
        }
        inputs.d0.validate()?;
        if inputs.d0.iteration != 0 {
            return Err(Error::Validation("bootstrap dataset must be version 0".into()));
        }
        inputs.d0.check_instances(inputs.instances)?;
        if inputs.d0.rows.len() != inputs.instances.len() {
            return Err(Error::Validation(format!(
                "bootstrap dataset has {} rows for {} instances",
                inputs.d0.rows.len(),
                inputs.instances.len()
            )));
        }
        let by_id = inputs
            .instances
            .iter()
            .map(|i| (i.instance_id.clone(), i.clone()))
            .collect();
        Ok(Orchestrator {
            config,
            name: name.to_string(),
            run_dir: runs_dir.join(name),
            inputs,
            by_id,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }

    fn iter_dir(&self, t: usize) -> PathBuf {
        self.run_dir.join(format!("iter{t}"))
    }

    pub fn model_path(&self, t: usize) -> PathBuf {
        self.iter_dir(t).join("model.bin")
    }

    fn artifact(&self, path: &Path) -> Result<Artifact> {
        let rel = path
            .strip_prefix(&self.run_dir)
            .map_err(|_| Error::Invariant(format!("{} is outside the run directory", path.display())))?;
        Ok(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_file(path)?,
        })
    }

    fn verify(&self, a: &Artifact) -> Result<()> {
        let path = self.run_dir.join(&a.path);
        let actual = sha256_file(&path)?;
        if actual != a.sha256 {
            return Err(Error::Validation(format!(
                "checksum mismatch for {}: manifest {}, file {actual}",
                path.display(),
                a.sha256
            )));
        }
        Ok(())
    }

    /// Checks that the on-disk run matches the manifest and this config.
    fn verify_manifest(&self, m: &Manifest) -> Result<()> {
        if m.config != self.config {
            return Err(Error::Validation(format!(
                "{} was written with a different configuration",
                self.manifest_path().display()
            )));
        }
        for (i, rec) in m.iterations.iter().enumerate() {
            if rec.t != i || !rec.completed {
                return Err(Error::Validation(format!("manifest iteration entries are not contiguous at {i}")));
            }
            for a in [&rec.dataset, &rec.model, &rec.vocab, &rec.stats] {
                self.verify(a)?;
            }
        }
        Ok(())
    }

    /// Runs iterations `0..=T`, resuming from an existing manifest. With
    /// `stop_after = Some(t)` the run halts once iteration `t` is complete.
    pub fn run(&self, stop_after: Option<usize>) -> Result<RunOutcome> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let _lock = RunLock::acquire(&self.run_dir)?;
        let mut manifest = if self.manifest_path().exists() {
            let m = Manifest::load(&self.manifest_path())?;
            self.verify_manifest(&m)?;
            log::info!("resuming {} after iteration {:?}", self.name, m.last_completed());
            m
        } else {
            Manifest {
                version: MANIFEST_VERSION,
                name: self.name.clone(),
                config: self.config.clone(),
                iterations: Vec::new(),
            }
        };
        let start = manifest.iterations.len();
        for t in start..=self.config.iterations {
            let record = self
                .run_iteration(t, &manifest)
                .map_err(|e| match e {
                    Error::Invariant(m) => Error::Invariant(format!("iteration {t}: {m}")),
                    Error::Validation(m) => Error::Validation(format!("iteration {t}: {m}")),
                    other => other,
                })?;
            manifest.iterations.push(record);
            manifest.persist(&self.manifest_path())?;
            if stop_after == Some(t) && t < self.config.iterations {
                log::info!("stopping after iteration {t} as requested");
                return Ok(RunOutcome {
                    manifest,
                    finished: false,
                    final_model: None,
                });
            }
        }
        let last = self.config.iterations;
        Ok(RunOutcome {
            manifest,
            finished: true,
            final_model: Some(self.model_path(last)),
        })
    }

    fn load_previous(&self, t: usize, manifest: &Manifest) -> Result<Generator> {
        let prev = manifest
            .iterations
            .get(t - 1)
            .filter(|r| r.completed)
            .ok_or_else(|| Error::Validation(format!("iteration {} has no completed checkpoint", t - 1)))?;
        self.verify(&prev.model)?;
        self.verify(&prev.vocab)?;
        Generator::load(&self.run_dir.join(&prev.model.path))
    }

    /// D_t from M_{t-1}: `n` candidates per instance with raw rewards.
    pub fn generate_dataset(&self, model: &Generator, t: usize) -> Result<DatasetVersion> {
        let cfg = &self.config;
        let rows = self
            .inputs
            .instances
            .par_iter()
            .map(|inst| {
                let candidates = model.generate_candidates(&inst.model_input(), cfg.n, cfg.beam_width)?;
                let rewards = if inst.gold_passage_ids.is_empty() {
                    None
                } else {
                    let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
                    Some(compute_rewards(&texts, &inst.gold_passage_ids, self.inputs.store, self.inputs.encoder)?)
                };
                Ok(DatasetRow {
                    instance_id: inst.instance_id.clone(),
                    targets: Targets::Candidates(CandidateSet { candidates, rewards }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let version = DatasetVersion {
            iteration: t,
            n: cfg.n,
            provenance: Provenance::Generated,
            generated_by: Some(t - 1),
            rows,
        };
        version.validate()?;
        Ok(version)
    }

    fn run_iteration(&self, t: usize, manifest: &Manifest) -> Result<IterationRecord> {
        let phase = self.config.phase(t);
        let dir = self.iter_dir(t);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (mut model, dataset) = if t == 0 {
            let model = Generator::new(self.inputs.vocab.clone(), self.config.generator_config());
            (model, self.inputs.d0.clone())
        } else {
            let prev = self.load_previous(t, manifest)?;
            log::info!("iteration {t}: generating {} candidates per instance", self.config.n);
            let dataset = self.generate_dataset(&prev, t)?;
            (prev, dataset)
        };
        let dataset_path = dir.join("dataset.jsonl");
        dataset.persist(&dataset_path)?;

        let mut optimizer = Adam::new(AdamConfig::with_learning_rate(self.config.learning_rate), &model.params);
        let ctx = EpochContext {
            instances: &self.by_id,
            batch_size: self.config.batch_size,
            seed: derive_seed(self.config.seed, t),
        };
        let mut epochs = Vec::new();
        for epoch in 0..self.config.epochs(phase) {
            let stats = train_epoch(&mut model, &mut optimizer, &dataset, phase, &ctx, epoch)?;
            log::info!(
                "iteration {t} {} epoch {epoch}: loss {:.6} skipped {}",
                phase.as_str(),
                stats.mean_loss,
                stats.skipped_instances
            );
            epochs.push(stats);
        }

        let model_path = dir.join("model.bin");
        model.save(&model_path)?;
        let stats_path = dir.join("stats.jsonl");
        crate::data::write_jsonl(&stats_path, &epochs)?;
        Ok(IterationRecord {
            t,
            phase,
            generated_by: dataset.generated_by,
            provenance: dataset.provenance,
            dataset: self.artifact(&dataset_path)?,
            model: self.artifact(&model_path)?,
            vocab: self.artifact(&Generator::vocab_path(&model_path))?,
            stats: self.artifact(&stats_path)?,
            dataset_top1_reward: dataset_top1_reward(&dataset),
            epochs,
            completed: true,
        })
    }
}

/// Mean over rewarded rows of the best raw candidate reward.
pub fn dataset_top1_reward(dataset: &DatasetVersion) -> Option<f64> {
    let best: Vec<f64> = dataset
        .rows
        .iter()
        .filter_map(|row| match &row.targets {
            Targets::Candidates(CandidateSet {
                rewards: Some(raw), ..
            }) => Some(raw[select_top1(raw)]),
            _ => None,
        })
        .collect();
    if best.is_empty() {
        None
    } else {
        Some(best.iter().sum::<f64>() / best.len() as f64)
    }
}

/// Vocabulary over everything the generator reads or is trained to emit:
/// model inputs, bootstrap rewrites and passage text.
pub fn build_vocab(
    instances: &[ReformulationInstance],
    d0: &DatasetVersion,
    passages: &[crate::data::Passage],
) -> Result<Vocab> {
    let mut texts: Vec<String> = instances.iter().map(|i| i.model_input()).collect();
    texts.extend(d0.rows.iter().filter_map(|r| match &r.targets {
        Targets::Rewrite(t) => Some(t.clone()),
        Targets::Candidates(_) => None,
    }));
    texts.extend(passages.iter().map(|p| p.text.clone()));
    Vocab::fit(&texts, 1)
}
