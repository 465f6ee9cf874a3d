//! Initial rewrite dataset from an LLM completion endpoint or a rewrites file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_jsonl, DatasetVersion, Provenance, ReformulationInstance, Session};
use crate::error::{Error, Result};
use crate::text::truncate_tokens;

pub const INSTRUCTION: &str = "This is a part of conversational question answering. Rewrite the current query as a stand-alone question based on the previous conversation so that it could be context-independent.";
pub const MAX_CONTEXT_TURNS: usize = 3;
pub const API_KEY_ENV: &str = "ITERCQR_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapRequest {
    pub instance_id: String,
    pub prompt: String,
    pub context_turns_used: usize,
}

/// Instruction, then up to three preceding turns oldest first, then the
/// current query.
pub fn build_prompt(instance: &ReformulationInstance, session: &Session) -> Result<BootstrapRequest> {
    let k = instance.turn_index;
    if session.session_id != instance.session_id || k == 0 || k > session.turns.len() {
        return Err(Error::Validation(format!(
            "instance {} does not belong to session {}",
            instance.instance_id, session.session_id
        )));
    }
    let start = (k - 1).saturating_sub(MAX_CONTEXT_TURNS);
    let context = &session.turns[start..k - 1];
    let mut prompt = format!("{INSTRUCTION}\n\n");
    for turn in context {
        prompt += &format!("Question: {}\nAnswer: {}\n", turn.query, turn.answer);
    }
    prompt += &format!("Current query: {}\nRewrite:", session.turns[k - 1].query);
    Ok(BootstrapRequest {
        instance_id: instance.instance_id.clone(),
        prompt,
        context_turns_used: context.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_initial_ms: u64,
    pub max_in_flight: usize,
    pub max_query_tokens: usize,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_tokens: 64,
            timeout_secs: 60,
            max_attempts: 5,
            backoff_initial_ms: 500,
            max_in_flight: 4,
            max_query_tokens: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest<'a> {
    pub endpoint: &'a str,
    pub api_key: &'a str,
    pub model: &'a str,
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Status(u16, String),
    Network(String),
    Malformed(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Status(code, _) => *code >= 500,
            TransportError::Network(_) => true,
            TransportError::Malformed(_) => false,
        }
    }
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            TransportError::Network(msg) => write!(f, "network error: {msg}"),
            TransportError::Malformed(msg) => write!(f, "malformed response: {msg}"),
        }
    }
}

/// One completion call; returns the raw completion text.
pub trait Transport: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> std::result::Result<String, TransportError>;
}

/// Chat-completions over HTTPS.
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn complete(&self, req: &CompletionRequest<'_>) -> std::result::Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(req.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::json!({
            "model": req.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let mut resp = agent
            .post(req.endpoint)
            .header("Authorization", &format!("Bearer {}", req.api_key))
            .send_json(&body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError::Status(status, text));
        }
        let json: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        json["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub instance_id: String,
    pub rewrite: String,
}

/// instance_id -> rewrite, backed by an append-only JSONL file.
pub struct BootstrapCache {
    path: PathBuf,
    inner: Mutex<CacheInner>,
}

struct CacheInner {
    entries: HashMap<String, String>,
    writer: BufWriter<File>,
}

impl BootstrapCache {
    /// Loads existing entries (later lines override earlier ones) and opens
    /// the file for appending.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            read_jsonl::<RewriteRecord>(path)?
                .into_iter()
                .map(|r| (r.instance_id, r.rewrite))
                .collect()
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(BootstrapCache {
            path: path.to_path_buf(),
            inner: Mutex::new(CacheInner {
                entries,
                writer: BufWriter::new(file),
            }),
        })
    }

    pub fn get(&self, instance_id: &str) -> Option<String> {
        self.inner.lock().expect("cache lock").entries.get(instance_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, instance_id: &str, rewrite: &str) -> Result<()> {
        let mut inner = self.inner.lock().expect("cache lock");
        let line = serde_json::to_string(&RewriteRecord {
            instance_id: instance_id.to_string(),
            rewrite: rewrite.to_string(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        writeln!(inner.writer, "{line}").map_err(|e| Error::io(&self.path, e))?;
        inner.writer.flush().map_err(|e| Error::io(&self.path, e))?;
        inner.entries.insert(instance_id.to_string(), rewrite.to_string());
        Ok(())
    }
}

/// Trims whitespace and wrapping quotes, then caps the token count.
pub fn clean_completion(raw: &str, max_tokens: usize) -> String {
    let quotes: &[char] = &['"', '\'', '\u{201c}', '\u{201d}', '`'];
    let text = raw.trim().trim_matches(quotes).trim();
    truncate_tokens(text, max_tokens).trim().to_string()
}

pub struct ApiClient {
    pub config: ApiConfig,
    api_key: Option<String>,
    transport: Box<dyn Transport>,
    cache: BootstrapCache,
}

impl ApiClient {
    /// Client with the key taken from the environment. A missing key only
    /// fails once a request actually needs the network.
    pub fn from_env(config: ApiConfig, cache: BootstrapCache) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_transport(config, key, Box::new(HttpTransport), cache)
    }

    pub fn with_transport(
        config: ApiConfig,
        api_key: Option<String>,
        transport: Box<dyn Transport>,
        cache: BootstrapCache,
    ) -> Self {
        ApiClient {
            config,
            api_key,
            transport,
            cache,
        }
    }

    pub fn cache(&self) -> &BootstrapCache {
        &self.cache
    }

    pub fn rewrite(&self, instance: &ReformulationInstance, session: &Session) -> Result<String> {
        if let Some(hit) = self.cache.get(&instance.instance_id) {
            return Ok(hit);
        }
        let key = self
            .api_key
            .as_deref()
            .ok_or_else(|| Error::External(format!("{API_KEY_ENV} is not set")))?;
        let request = build_prompt(instance, session)?;
        let call = CompletionRequest {
            endpoint: &self.config.endpoint,
            api_key: key,
            model: &self.config.model,
            prompt: &request.prompt,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            timeout: Duration::from_secs(self.config.timeout_secs),
        };
        let mut delay = Duration::from_millis(self.config.backoff_initial_ms);
        let mut attempt = 1;
        let raw = loop {
            match self.transport.complete(&call) {
                Ok(text) => break text,
                Err(e) if e.retryable() && attempt < self.config.max_attempts => {
                    log::warn!("{}: attempt {attempt} failed ({e}), retrying in {delay:?}", instance.instance_id);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => {
                    return Err(Error::External(format!(
                        "{}: {e} after {attempt} attempt(s)",
                        instance.instance_id
                    )))
                }
            }
        };
        let mut text = clean_completion(&raw, self.config.max_query_tokens);
        if text.is_empty() {
            log::warn!("{}: empty completion, falling back to the raw query", instance.instance_id);
            text = instance.current_query.clone();
        }
        self.cache.insert(&instance.instance_id, &text)?;
        Ok(text)
    }
}

pub enum BootstrapMode<'a> {
    Api(&'a ApiClient),
    File(&'a Path),
}

pub fn load_rewrites(path: &Path) -> Result<HashMap<String, String>> {
    Ok(read_jsonl::<RewriteRecord>(path)?
        .into_iter()
        .map(|r| (r.instance_id, r.rewrite))
        .collect())
}

/// D₀ with one rewrite per instance, in instance order.
pub fn bootstrap_dataset(
    instances: &[ReformulationInstance],
    sessions: &[Session],
    mode: BootstrapMode<'_>,
) -> Result<DatasetVersion> {
    let rows = match mode {
        BootstrapMode::File(path) => {
            let rewrites = load_rewrites(path)?;
            let rows = instances
                .iter()
                .map(|inst| {
                    let text = rewrites
                        .get(&inst.instance_id)
                        .ok_or_else(|| Error::Validation(format!("no rewrite for instance {} in {}", inst.instance_id, path.display())))?;
                    if text.trim().is_empty() {
                        return Err(Error::Validation(format!("empty rewrite for instance {}", inst.instance_id)));
                    }
                    Ok((inst.instance_id.clone(), text.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(DatasetVersion::bootstrap(Provenance::File, rows));
        }
        BootstrapMode::Api(client) => {
            let by_id: HashMap<&str, &Session> = sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(client.config.max_in_flight.max(1))
                .build()
                .map_err(|e| Error::Invariant(e.to_string()))?;
            pool.install(|| {
                instances
                    .par_iter()
                    .map(|inst| {
                        let session = by_id.get(inst.session_id.as_str()).ok_or_else(|| {
                            Error::Validation(format!("session {} for {} not found", inst.session_id, inst.instance_id))
                        })?;
                        Ok((inst.instance_id.clone(), client.rewrite(inst, session)?))
                    })
                    .collect::<Result<Vec<_>>>()
            })?
        }
    };
    Ok(DatasetVersion::bootstrap(Provenance::LlmBootstrap, rows))
}
