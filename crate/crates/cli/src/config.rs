use std::path::{Path, PathBuf};

use serde::Deserialize;

use itercqr::bootstrap::ApiConfig;
use itercqr::orchestrator::RunConfig;
use itercqr::retrieval::Bm25Params;
use itercqr::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Retriever {
    Dense,
    Sparse,
    Both,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_sessions: PathBuf,
    #[serde(default)]
    pub test_sessions: Option<PathBuf>,
    pub passages: PathBuf,
    /// Bootstrap dataset (D₀).
    pub bootstrap: PathBuf,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub retriever: Retriever,
    pub k: usize,
    pub k1: f64,
    pub b: f64,
    pub beam_width: usize,
    pub embedding_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let bm25 = Bm25Params::default();
        RetrievalConfig {
            retriever: Retriever::Dense,
            k: 100,
            k1: bm25.k1,
            b: bm25.b,
            beam_width: 10,
            embedding_dim: itercqr::embedding::DEFAULT_DIM,
        }
    }
}

/// Whole-pipeline configuration file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub name: String,
    pub paths: Paths,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub api: ApiConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: CliConfig =
            toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.train_sessions, &mut p.passages, &mut p.bootstrap, &mut p.runs_dir] {
            *slot = resolve(base, slot);
        }
        for slot in [&mut p.test_sessions, &mut p.embeddings].into_iter().flatten() {
            *slot = resolve(base, slot);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == ".." {
            return Err(Error::Validation(format!("invalid run name {:?}", self.name)));
        }
        self.run.validate()?;
        let r = &self.retrieval;
        if r.k == 0 || r.beam_width == 0 || r.embedding_dim == 0 {
            return Err(Error::Validation("retrieval k, beam_width and embedding_dim must be positive".into()));
        }
        if !(r.k1 >= 0.0 && (0.0..=1.0).contains(&r.b)) {
            return Err(Error::Validation(format!("invalid BM25 parameters k1 = {}, b = {}", r.k1, r.b)));
        }
        Ok(())
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.retrieval.k1,
            b: self.retrieval.b,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.runs_dir.join(&self.name)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_take_defaults() {
        let cfg: CliConfig = toml::from_str(
            r#"
            name = "x"
            [paths]
            train_sessions = "a"
            passages = "b"
            bootstrap = "c"
            [api]
            model = "m"
            [retrieval]
            retriever = "both"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.api.model, "m");
        assert_eq!(cfg.api.max_attempts, ApiConfig::default().max_attempts);
        assert_eq!(cfg.retrieval.retriever, Retriever::Both);
        assert_eq!(cfg.retrieval.k, 100);
        assert_eq!(cfg.run, RunConfig::default());
        cfg.validate().unwrap();
    }
}
