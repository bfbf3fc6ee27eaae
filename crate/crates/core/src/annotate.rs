//! Running prompts against a generation backend.
//!
//! [`Annotator::annotate_corpus`] renders one or two prompts per example,
//! consults the [`Cache`] before every call, decodes the final generation
//! and returns records in corpus order. Backends implement [`Backend`]:
//! [`HttpBackend`] speaks the common chat/completions JSON schema,
//! [`MockOracle`] answers from gold labels, [`ScriptedBackend`] wraps a
//! closure and [`ConcurrencyProbe`] counts overlapping calls.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, StanceExample};
use crate::decoder::LabelDecoder;
use crate::exec::Execution;
use crate::label::{Decoded, StanceLabel};
use crate::prompt::{
    render_relation_hop, render_single_hop, render_stance_hop, HopMode, PromptAxes, PromptError, RenderedPrompt,
    Segment, TemplateSet,
};

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("remote returned status {status}: {body}")]
    RemoteStatus { status: u16, body: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("environment variable {0} is not set")]
    AuthMissing(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("example {0:?} is not in the oracle corpus or has no gold label")]
    UnknownExample(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport { .. } | BackendError::Timeout { .. } => true,
            BackendError::RemoteStatus { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("example {example_id}: {source}")]
    Backend {
        example_id: String,
        #[source]
        source: BackendError,
    },
    #[error("example {example_id}: {source}")]
    Prompt {
        example_id: String,
        #[source]
        source: PromptError,
    },
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// POST `{model, messages, ...}`, read `choices[0].message.content`.
    Chat,
    /// POST `{model, prompt, ...}`, read `choices[0].text`.
    Completion,
    /// In-process gold-label oracle.
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 4, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (1-based `attempt`).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

fn default_backend_id() -> String {
    "mock".into()
}
fn default_endpoint() -> String {
    "http://127.0.0.1:8000/v1/chat/completions".into()
}
fn default_model() -> String {
    "mock-oracle".into()
}
fn default_max_new_tokens() -> u32 {
    256
}
fn default_auth_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_kind() -> BackendKind {
    BackendKind::Mock
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "default_backend_id")]
    pub backend_id: String,
    #[serde(default = "default_kind")]
    pub kind: BackendKind,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Name of the variable holding the bearer token. The token itself
    /// never appears in configs or digests.
    #[serde(default = "default_auth_env")]
    pub auth_env_var: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            backend_id: default_backend_id(),
            kind: default_kind(),
            endpoint: default_endpoint(),
            model_name: default_model(),
            temperature: 0.0,
            max_new_tokens: default_max_new_tokens(),
            auth_env_var: default_auth_env(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be a finite number >= 0");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be at least 1");
        }
        if self.backend_id.trim().is_empty() {
            return bad("backend_id is empty");
        }
        if self.kind != BackendKind::Mock && !self.endpoint.starts_with("http") {
            return bad("endpoint must be an http(s) URL");
        }
        Ok(())
    }

    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams { temperature: self.temperature, max_new_tokens: self.max_new_tokens }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_new_tokens: u32,
}

/// Everything a backend may look at for one call.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub example_id: &'a str,
    /// The target phrase shown in the prompt.
    pub target: &'a str,
    pub axes: &'a PromptAxes,
    pub prompt: &'a RenderedPrompt,
}

impl GenerationRequest<'_> {
    pub fn hop_index(&self) -> u8 {
        self.prompt.hop_index
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub latency_ms: u64,
}

pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_name(&self) -> &str;
    fn decode_params(&self) -> DecodeParams;

    /// Checks that must pass before any request is sent.
    fn preflight(&self) -> Result<(), BackendError> {
        Ok(())
    }

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<Completion, BackendError>;

    /// Number of `complete` calls served so far.
    fn request_count(&self) -> u64;
}

/// SHA-256 over backend identity, decode parameters and the full prompt.
pub fn prompt_digest(backend_id: &str, model_name: &str, params: DecodeParams, prompt: &RenderedPrompt) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        backend_id: &'a str,
        model_name: &'a str,
        temperature: f64,
        max_new_tokens: u32,
        hop_index: u8,
        segments: &'a [Segment],
    }
    let key = Key {
        backend_id,
        model_name,
        temperature: params.temperature,
        max_new_tokens: params.max_new_tokens,
        hop_index: prompt.hop_index,
        segments: &prompt.segments,
    };
    hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("digest key serializes")))
}

// ---------------------------------------------------------------- cache

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub raw_text: String,
    pub backend_id: String,
    pub model_name: String,
    pub hop_index: u8,
}

/// Digest-keyed generation store. On disk it is an append-only JSONL file;
/// entries are never evicted. The first write for a digest wins.
pub struct Cache {
    map: RwLock<HashMap<String, CacheEntry>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache").field("path", &self.path).field("len", &self.len()).finish()
    }
}

impl Cache {
    pub fn in_memory() -> Self {
        Cache { map: RwLock::new(HashMap::new()), file: None, path: None }
    }

    /// Opens (creating if needed) a cache file. A torn final line left by
    /// an interrupted write is cut off; corruption elsewhere is an error.
    pub fn open(path: &Path) -> Result<Self, AnnotateError> {
        let mut map = HashMap::new();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        if path.exists() {
            let bytes = std::fs::read(path)?;
            let mut offset = 0;
            let mut good_end = 0;
            let mut lines = bytes.split_inclusive(|b| *b == b'\n').peekable();
            let mut n = 0;
            while let Some(line) = lines.next() {
                n += 1;
                offset += line.len();
                let text = String::from_utf8_lossy(line);
                if text.trim().is_empty() {
                    good_end = offset;
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&text) {
                    Ok(e) if line.ends_with(b"\n") => {
                        map.entry(e.digest.clone()).or_insert(e);
                        good_end = offset;
                    }
                    Ok(_) | Err(_) if lines.peek().is_none() => {
                        tracing::warn!("dropping torn cache line {n} in {}", path.display());
                    }
                    Ok(_) => unreachable!("only the final line can lack a newline"),
                    Err(e) => {
                        return Err(AnnotateError::Cache(format!("{} line {n}: {e}", path.display())));
                    }
                }
            }
            if good_end < bytes.len() {
                OpenOptions::new().write(true).open(path)?.set_len(good_end as u64)?;
            }
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Cache { map: RwLock::new(map), file: Some(Mutex::new(BufWriter::new(f))), path: Some(path.to_path_buf()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        self.map.read().expect("cache lock").get(digest).cloned()
    }

    /// Stores `entry` unless its digest is already present. Returns the
    /// entry that ends up cached.
    pub fn put(&self, entry: CacheEntry) -> Result<CacheEntry, AnnotateError> {
        let mut map = self.map.write().expect("cache lock");
        if let Some(existing) = map.get(&entry.digest) {
            return Ok(existing.clone());
        }
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&entry).map_err(|e| AnnotateError::Cache(e.to_string()))?;
            line.push('\n');
            let mut w = file.lock().expect("cache file lock");
            w.write_all(line.as_bytes())?;
            w.flush()?;
        }
        map.insert(entry.digest.clone(), entry.clone());
        Ok(entry)
    }
}

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_digest: String,
    pub raw_text: String,
    pub hop_index: u8,
    pub backend_id: String,
    pub from_cache: bool,
    /// Wall time of the backend call; 0 for cache hits and in-process backends.
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub example_id: String,
    /// Target phrase the prompt asked about.
    pub target: String,
    pub axes: PromptAxes,
    pub generations: Vec<GenerationRecord>,
    pub decoded: Decoded,
    pub reversal_applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn write_records(records: &[AnnotationRecord], path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{} line {}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------- annotator

pub struct Annotator<'a> {
    backend: &'a dyn Backend,
    cache: &'a Cache,
    templates: TemplateSet,
    decoder: LabelDecoder,
    max_in_flight: usize,
    strict: bool,
    execution: Execution,
}

impl<'a> Annotator<'a> {
    pub fn new(backend: &'a dyn Backend, cache: &'a Cache) -> Self {
        Annotator {
            backend,
            cache,
            templates: TemplateSet::default(),
            decoder: LabelDecoder::default(),
            max_in_flight: default_in_flight(),
            strict: false,
            execution: Execution::default(),
        }
    }

    pub fn templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn decoder(mut self, decoder: LabelDecoder) -> Self {
        self.decoder = decoder;
        self
    }

    pub fn max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    /// Abort on the first per-example failure instead of recording it.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    /// One record per example, in input order.
    ///
    /// Prompts are issued hop by hop. Within a hop each distinct prompt goes
    /// to the backend at most once, on behalf of its first example in input
    /// order; later duplicates read the cache. Records therefore depend only
    /// on the inputs and the cache contents at entry, never on scheduling.
    pub fn annotate_corpus(
        &self,
        examples: &[StanceExample],
        axes: &PromptAxes,
    ) -> Result<Vec<AnnotationRecord>, AnnotateError> {
        self.backend
            .preflight()
            .map_err(|source| AnnotateError::Backend { example_id: String::new(), source })?;
        let prompt_err = |ex: &StanceExample, source| AnnotateError::Prompt { example_id: ex.id.clone(), source };
        let mut gens: Vec<Vec<GenerationRecord>> = vec![Vec::with_capacity(2); examples.len()];
        let mut finals: Vec<Result<String, AnnotateError>> = Vec::with_capacity(examples.len());

        let first: Vec<Result<RenderedPrompt, AnnotateError>> = examples
            .iter()
            .map(|ex| match axes.hop_mode {
                HopMode::Single => render_single_hop(&self.templates, ex, axes),
                HopMode::TwoHop => render_relation_hop(&self.templates, ex, axes),
            }
            .map_err(|e| prompt_err(ex, e)))
            .collect();
        let hop1 = self.wave(examples, axes, first, &mut gens)?;
        match axes.hop_mode {
            HopMode::Single => finals.extend(hop1),
            HopMode::TwoHop => {
                let second = examples
                    .iter()
                    .zip(hop1)
                    .map(|(ex, relation)| {
                        relation.and_then(|r| {
                            render_stance_hop(&self.templates, ex, axes, &r).map_err(|e| prompt_err(ex, e))
                        })
                    })
                    .collect();
                finals.extend(self.wave(examples, axes, second, &mut gens)?);
            }
        }

        let mut records = Vec::with_capacity(examples.len());
        for ((ex, generations), outcome) in examples.iter().zip(gens).zip(finals) {
            let (decoded, error) = match outcome {
                Ok(text) => (self.decoder.decode(&text, axes.reversed()).label, None),
                Err(e) if self.strict => return Err(e),
                Err(e) => {
                    tracing::warn!("{e}");
                    (Decoded::Undecodable, Some(e.to_string()))
                }
            };
            records.push(AnnotationRecord {
                example_id: ex.id.clone(),
                target: axes.effective_target(ex).to_string(),
                axes: axes.clone(),
                generations,
                decoded,
                reversal_applied: axes.reversed(),
                error,
            });
        }
        Ok(records)
    }

    /// Resolves one hop for every example whose earlier hops succeeded.
    fn wave(
        &self,
        examples: &[StanceExample],
        axes: &PromptAxes,
        prompts: Vec<Result<RenderedPrompt, AnnotateError>>,
        gens: &mut [Vec<GenerationRecord>],
    ) -> Result<Vec<Result<String, AnnotateError>>, AnnotateError> {
        let b = self.backend;
        let digests: Vec<Option<String>> = prompts
            .iter()
            .map(|p| p.as_ref().ok().map(|p| prompt_digest(b.backend_id(), b.model_name(), b.decode_params(), p)))
            .collect();
        // First occurrence of each digest missing from the cache.
        let mut owner: HashMap<&str, usize> = HashMap::new();
        let mut misses = Vec::new();
        for (i, d) in digests.iter().enumerate() {
            if let Some(d) = d {
                if !owner.contains_key(d.as_str()) && self.cache.get(d).is_none() {
                    misses.push(i);
                }
                owner.entry(d.as_str()).or_insert(i);
            }
        }
        let fetched = self.execution.map_bounded(&misses, self.max_in_flight, |&i| {
            let ex = &examples[i];
            let prompt = prompts[i].as_ref().expect("only rendered prompts are fetched");
            let req = GenerationRequest { example_id: &ex.id, target: axes.effective_target(ex), axes, prompt };
            b.complete(&req)
        });
        let mut outcomes: HashMap<usize, Result<Completion, BackendError>> = HashMap::new();
        for (&i, result) in misses.iter().zip(fetched) {
            if let Ok(c) = &result {
                let prompt = prompts[i].as_ref().expect("rendered");
                self.cache.put(CacheEntry {
                    digest: digests[i].clone().expect("rendered"),
                    raw_text: c.text.clone(),
                    backend_id: b.backend_id().to_string(),
                    model_name: b.model_name().to_string(),
                    hop_index: prompt.hop_index,
                })?;
            }
            outcomes.insert(i, result);
        }

        let mut out = Vec::with_capacity(prompts.len());
        for (i, prompt) in prompts.into_iter().enumerate() {
            let prompt = match prompt {
                Ok(p) => p,
                Err(e) => {
                    out.push(Err(e));
                    continue;
                }
            };
            let digest = digests[i].clone().expect("rendered");
            let first = owner[digest.as_str()];
            let (from_cache, latency_ms) = match outcomes.get(&first) {
                Some(Err(e)) => {
                    out.push(Err(AnnotateError::Backend { example_id: examples[i].id.clone(), source: e.clone() }));
                    continue;
                }
                Some(Ok(c)) if first == i => (false, c.latency_ms),
                _ => (true, 0),
            };
            let stored = self.cache.get(&digest).expect("resolved prompts are cached");
            gens[i].push(GenerationRecord {
                prompt_digest: digest,
                raw_text: stored.raw_text.clone(),
                hop_index: prompt.hop_index,
                backend_id: b.backend_id().to_string(),
                from_cache,
                latency_ms,
            });
            out.push(Ok(stored.raw_text));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------- http

/// Client for any server following the chat/completions JSON schema.
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    requests: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        if config.kind == BackendKind::Mock {
            return Err(BackendError::Config("HttpBackend needs kind chat or completion".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend { config, agent, requests: AtomicU64::new(0) })
    }

    fn token(&self) -> Result<String, BackendError> {
        match std::env::var(&self.config.auth_env_var) {
            Ok(t) if !t.is_empty() => Ok(t),
            _ => Err(BackendError::AuthMissing(self.config.auth_env_var.clone())),
        }
    }

    fn body(&self, prompt: &RenderedPrompt) -> serde_json::Value {
        let c = &self.config;
        match c.kind {
            BackendKind::Chat => {
                let messages: Vec<_> = prompt
                    .to_messages()
                    .into_iter()
                    .map(|(role, content)| serde_json::json!({ "role": role, "content": content }))
                    .collect();
                serde_json::json!({
                    "model": c.model_name,
                    "messages": messages,
                    "temperature": c.temperature,
                    "max_tokens": c.max_new_tokens,
                })
            }
            _ => serde_json::json!({
                "model": c.model_name,
                "prompt": prompt.to_plain_text(),
                "temperature": c.temperature,
                "max_tokens": c.max_new_tokens,
            }),
        }
    }

    fn attempt(&self, token: &str, body: &serde_json::Value, attempt: u32) -> Result<String, BackendError> {
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", format!("Bearer {token}"))
            .send_json(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout { attempts: attempt }),
            Err(e) => return Err(BackendError::Transport { attempts: attempt, message: e.to_string() }),
        };
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::RemoteStatus { status, body: body.chars().take(500).collect() });
        }
        let json: serde_json::Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout { attempts: attempt }),
            Err(e) => return Err(BackendError::BadResponse(e.to_string())),
        };
        let choice = &json["choices"][0];
        let text = match self.config.kind {
            BackendKind::Chat => choice["message"]["content"].as_str(),
            _ => choice["text"].as_str(),
        };
        text.map(str::to_string)
            .ok_or_else(|| BackendError::BadResponse(format!("no generation text in {}", truncate(&json.to_string()))))
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

impl Backend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.config.backend_id
    }

    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn decode_params(&self) -> DecodeParams {
        self.config.decode_params()
    }

    fn preflight(&self) -> Result<(), BackendError> {
        self.token().map(|_| ())
    }

    fn complete(&self, request: &GenerationRequest<'_>) -> Result<Completion, BackendError> {
        let token = self.token()?;
        let body = self.body(request.prompt);
        let retry = self.config.retry;
        let mut attempt = 1;
        loop {
            self.requests.fetch_add(1, Ordering::Relaxed);
            let start = Instant::now();
            match self.attempt(&token, &body, attempt) {
                Ok(text) => {
                    return Ok(Completion { text, latency_ms: start.elapsed().as_millis() as u64 });
                }
                Err(e) if e.retryable() && attempt < retry.max_attempts => {
                    let wait = retry.backoff(attempt);
                    tracing::debug!("attempt {attempt} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

// ---------------------------------------------------------------- mocks

/// How [`MockOracle`] answers when asked about a target that is neither
/// the example's own target nor a configured override.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum PhrasePolicy {
    /// Always answer None.
    AnswerNone,
    /// A seeded uniform label per (example, phrase).
    #[default]
    Random,
    /// Labels keyed by (example id, normalized phrase); unknown pairs get None.
    Table(HashMap<(String, String), StanceLabel>),
}

/// Lowercases and drops everything except letters and digits.
pub fn normalize_phrase(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Answers with the gold label, flipped to a uniformly chosen other label
/// with probability `noise_rate`. Every decision comes from a generator
/// keyed on (seed, example id, axes digest, target, hop), so answers do not
/// depend on call order. The noise draw is made before the replacement
/// draw, which makes the set of wrong answers grow monotonically with
/// `noise_rate` for a fixed seed.
pub struct MockOracle {
    gold: HashMap<String, (String, StanceLabel)>,
    noise_rate: f64,
    seed: u64,
    phrases: PhrasePolicy,
    backend_id: String,
    requests: AtomicU64,
}

impl MockOracle {
    pub fn new(corpus: &Corpus, noise_rate: f64, seed: u64) -> Result<Self, BackendError> {
        Self::from_examples(&corpus.examples, noise_rate, seed)
    }

    pub fn from_examples(examples: &[StanceExample], noise_rate: f64, seed: u64) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(BackendError::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
        }
        let gold = examples
            .iter()
            .filter_map(|e| e.gold.map(|g| (e.id.clone(), (normalize_phrase(&e.target), g))))
            .collect();
        Ok(MockOracle {
            gold,
            noise_rate,
            seed,
            phrases: PhrasePolicy::default(),
            backend_id: "mock".into(),
            requests: AtomicU64::new(0),
        })
    }

    pub fn with_phrase_policy(mut self, policy: PhrasePolicy) -> Self {
        self.phrases = policy;
        self
    }

    pub fn with_backend_id(mut self, id: impl Into<String>) -> Self {
        self.backend_id = id.into();
        self
    }

    /// Keyed on the prompt alone so identical prompts get identical
    /// answers, as a temperature-0 model would give.
    fn rng(&self, req: &GenerationRequest<'_>, stream: &str) -> ChaCha8Rng {
        let key = prompt_digest("mock", "mock-oracle", self.decode_params(), req.prompt);
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stream.as_bytes());
        h.update(key.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// The label the oracle believes is correct for this request.
    fn truth(&self, req: &GenerationRequest<'_>) -> Result<StanceLabel, BackendError> {
        let (own_target, gold) =
            self.gold.get(req.example_id).ok_or_else(|| BackendError::UnknownExample(req.example_id.to_string()))?;
        if let Some(o) = &req.axes.target_override {
            return Ok(if o.reversed { gold.reversed() } else { *gold });
        }
        let phrase = normalize_phrase(req.target);
        if &phrase == own_target {
            return Ok(*gold);
        }
        Ok(match &self.phrases {
            PhrasePolicy::AnswerNone => StanceLabel::None,
            PhrasePolicy::Random => {
                let mut rng = self.rng(req, "phrase");
                StanceLabel::ALL[rng.random_range(0..3)]
            }
            PhrasePolicy::Table(t) => {
                t.get(&(req.example_id.to_string(), phrase)).copied().unwrap_or(StanceLabel::None)
            }
        })
    }
}

impl Backend for MockOracle {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn model_name(&self) -> &str {
        "mock-oracle"
    }

    fn decode_params(&self) -> DecodeParams {
        DecodeParams { temperature: 0.0, max_new_tokens: default_max_new_tokens() }
    }

    fn complete(&self, req: &GenerationRequest<'_>) -> Result<Completion, BackendError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let truth = self.truth(req)?;
        let two_hop = req.axes.hop_mode == HopMode::TwoHop;
        if two_hop && req.hop_index() == 1 {
            return Ok(Completion {
                text: format!("The tweet expresses a view that bears on {}.", req.target),
                latency_ms: 0,
            });
        }
        let mut rng = self.rng(req, "noise");
        let u: f64 = rng.random();
        let label = if u < self.noise_rate {
            let others: Vec<StanceLabel> = StanceLabel::ALL.into_iter().filter(|l| *l != truth).collect();
            others[rng.random_range(0..2)]
        } else {
            truth
        };
        Ok(Completion { text: format!("Stance: {}", label.word()), latency_ms: 0 })
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

type Script = dyn Fn(&GenerationRequest<'_>) -> Result<String, BackendError> + Send + Sync;

/// Backend answering through a closure.
pub struct ScriptedBackend {
    id: String,
    script: Box<Script>,
    requests: AtomicU64,
}

impl ScriptedBackend {
    pub fn new<F>(id: impl Into<String>, script: F) -> Self
    where
        F: Fn(&GenerationRequest<'_>) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend { id: id.into(), script: Box::new(script), requests: AtomicU64::new(0) }
    }
}

impl Backend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn model_name(&self) -> &str {
        "scripted"
    }

    fn decode_params(&self) -> DecodeParams {
        DecodeParams { temperature: 0.0, max_new_tokens: default_max_new_tokens() }
    }

    fn complete(&self, req: &GenerationRequest<'_>) -> Result<Completion, BackendError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        (self.script)(req).map(|text| Completion { text, latency_ms: 0 })
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

/// Wraps a backend and records the peak number of overlapping calls.
pub struct ConcurrencyProbe<B> {
    inner: B,
    hold: Duration,
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl<B: Backend> ConcurrencyProbe<B> {
    /// `hold` is slept inside every call to widen overlap windows.
    pub fn new(inner: B, hold: Duration) -> Self {
        ConcurrencyProbe { inner, hold, live: AtomicUsize::new(0), peak: AtomicUsize::new(0) }
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for ConcurrencyProbe<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn decode_params(&self) -> DecodeParams {
        self.inner.decode_params()
    }

    fn preflight(&self) -> Result<(), BackendError> {
        self.inner.preflight()
    }

    fn complete(&self, req: &GenerationRequest<'_>) -> Result<Completion, BackendError> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.hold);
        let out = self.inner.complete(req);
        self.live.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn request_count(&self) -> u64 {
        self.inner.request_count()
    }
}

/// Builds the backend described by `config`; mock configs need the corpus
/// that supplies gold labels.
pub fn build_backend(
    config: &BackendConfig,
    oracle_corpus: Option<&[StanceExample]>,
    noise_rate: f64,
    seed: u64,
) -> Result<Box<dyn Backend>, BackendError> {
    config.validate()?;
    match config.kind {
        BackendKind::Mock => {
            let examples = oracle_corpus.ok_or_else(|| BackendError::Config("mock backend needs a labeled corpus".into()))?;
            Ok(Box::new(MockOracle::from_examples(examples, noise_rate, seed)?.with_backend_id(&config.backend_id)))
        }
        BackendKind::Chat | BackendKind::Completion => Ok(Box::new(HttpBackend::new(config.clone())?)),
    }
}
