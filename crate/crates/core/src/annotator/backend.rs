//! Chat backends, the two-stage conversation, retries and the response cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::Engine;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::parse::format_scores;
use super::prompt::PromptBundle;
use super::{AnnotatorConfig, Window};
use crate::dataset::LabelSource;
use crate::env::{shaped_reward, TaskSpec};
use crate::seed;

pub const API_KEY_VAR: &str = "RGVLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { media_type: String, data_base64: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

/// Canonical request body of the `/chat` endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("chat request serializes")
    }

    /// Hex SHA-256 of the serialized request, image bytes included.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Analysis,
    Scoring,
}

/// What a backend knows about the request beyond its payload. Real models
/// only see the request; the oracle reads the window's symbolic states.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub window: &'a Window,
    pub stage: Stage,
    pub scale_max: u32,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("no cached response for request {0} (cache-replay backend)")]
    CacheMiss(String),
    #[error("oracle backend: {0}")]
    Oracle(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: Box<BackendError> },
}

impl BackendError {
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout | BackendError::InvalidResponse(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait AnnotatorBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Provenance recorded on the labels this backend produces.
    fn label_source(&self) -> LabelSource {
        LabelSource::Lvlm
    }

    fn complete(&self, request: &ChatRequest, ctx: &QueryContext<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub stage1_text: String,
    pub stage2_text: String,
    /// `source` is "cache" when both stages came from the cache; `latency_ms`
    /// covers the whole conversation.
    pub usage_meta: BTreeMap<String, serde_json::Value>,
}

/// One file per request hash: `{request_hash, stage, response_content, timestamp}`.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_hash: String,
    pub stage: Stage,
    pub response_content: String,
    pub timestamp: u64,
}

static TMP_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl ResponseCache {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.path(hash)).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(e) if e.request_hash == hash => Some(e),
            _ => {
                log::warn!("ignoring unreadable cache entry {hash}");
                None
            }
        }
    }

    /// Writes through a unique temp file and a rename, so readers never see
    /// a partial entry.
    pub fn put(&self, hash: &str, stage: Stage, content: &str) -> std::io::Result<()> {
        let entry = CacheEntry {
            request_hash: hash.to_string(),
            stage,
            response_content: content.to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{hash}.{}.{n}.tmp", std::process::id()));
        fs::write(&tmp, serde_json::to_vec(&entry).expect("cache entry serializes"))?;
        fs::rename(&tmp, self.path(hash))
    }
}

fn image_part(bundle: &PromptBundle) -> ContentPart {
    ContentPart::Image {
        media_type: "image/png".into(),
        data_base64: base64::engine::general_purpose::STANDARD.encode(bundle.image.image.to_png()),
    }
}

fn text_part(text: &str) -> ContentPart {
    ContentPart::Text { text: text.to_string() }
}

pub fn stage1_request(bundle: &PromptBundle, cfg: &AnnotatorConfig) -> ChatRequest {
    ChatRequest {
        model: cfg.model.clone(),
        temperature: cfg.temperature,
        messages: vec![ChatMessage {
            role: Role::User,
            content: vec![text_part(&bundle.stage1_text), image_part(bundle)],
        }],
    }
}

/// The scoring turn replays the first exchange verbatim before asking for scores.
pub fn stage2_request(bundle: &PromptBundle, stage1_response: &str, cfg: &AnnotatorConfig) -> ChatRequest {
    let mut req = stage1_request(bundle, cfg);
    req.messages.push(ChatMessage { role: Role::Assistant, content: vec![text_part(stage1_response)] });
    req.messages.push(ChatMessage { role: Role::User, content: vec![text_part(&bundle.stage2_text)] });
    req
}

fn call_with_retries(
    backend: &dyn AnnotatorBackend,
    request: &ChatRequest,
    ctx: &QueryContext<'_>,
    cfg: &AnnotatorConfig,
) -> Result<String, BackendError> {
    let mut attempt = 0;
    loop {
        let result = backend.complete(request, ctx).and_then(|text| {
            if text.trim().is_empty() {
                Err(BackendError::InvalidResponse("empty content".into()))
            } else {
                Ok(text)
            }
        });
        match result {
            Ok(text) => return Ok(text),
            Err(e) if e.retryable() && attempt < cfg.max_retries => {
                let delay = cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                log::debug!(
                    "{} window {}: attempt {} failed ({e}); retrying in {delay} ms",
                    ctx.window.trajectory_id,
                    ctx.window.start_index,
                    attempt + 1
                );
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) if attempt == 0 => return Err(e),
            Err(e) => return Err(BackendError::RetriesExhausted { attempts: attempt + 1, last: Box::new(e) }),
        }
    }
}

fn cached_call(
    backend: &dyn AnnotatorBackend,
    request: &ChatRequest,
    ctx: &QueryContext<'_>,
    cfg: &AnnotatorConfig,
    cache: Option<&ResponseCache>,
) -> Result<(String, bool), BackendError> {
    let hash = cache.map(|_| request.hash());
    if let (Some(cache), Some(hash)) = (cache, &hash) {
        if let Some(entry) = cache.get(hash) {
            return Ok((entry.response_content, true));
        }
    }
    let text = call_with_retries(backend, request, ctx, cfg)?;
    if let (Some(cache), Some(hash)) = (cache, &hash) {
        if let Err(e) = cache.put(hash, ctx.stage, &text) {
            log::warn!("could not write cache entry {hash}: {e}");
        }
    }
    Ok((text, false))
}

/// Runs the two-turn conversation for one window. The stages are strictly
/// sequential because the second request embeds the first response.
pub fn query_backend(
    backend: &dyn AnnotatorBackend,
    window: &Window,
    bundle: &PromptBundle,
    cfg: &AnnotatorConfig,
    cache: Option<&ResponseCache>,
) -> Result<BackendResponse, BackendError> {
    let start = Instant::now();
    let ctx1 = QueryContext { window, stage: Stage::Analysis, scale_max: cfg.scale_max };
    let (stage1_text, hit1) = cached_call(backend, &stage1_request(bundle, cfg), &ctx1, cfg, cache)?;
    let ctx2 = QueryContext { stage: Stage::Scoring, ..ctx1 };
    let req2 = stage2_request(bundle, &stage1_text, cfg);
    let (stage2_text, hit2) = cached_call(backend, &req2, &ctx2, cfg, cache)?;

    let source = match (hit1, hit2) {
        (true, true) => "cache",
        (false, false) => "backend",
        _ => "mixed",
    };
    let mut usage_meta = BTreeMap::new();
    usage_meta.insert("source".into(), source.into());
    usage_meta.insert("backend".into(), backend.name().into());
    usage_meta.insert("latency_ms".into(), (start.elapsed().as_millis() as u64).into());
    Ok(BackendResponse { stage1_text, stage2_text, usage_meta })
}

/// HTTP client for the canonical `/chat` wire contract.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

#[derive(Deserialize)]
struct ChatResponse {
    content: String,
}

impl HttpBackend {
    /// Reads the bearer token from `RGVLM_API_KEY` when set.
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            endpoint: format!("{}/chat", base_url.trim_end_matches('/')),
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            agent,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl AnnotatorBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &ChatRequest, _ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(request.to_json()).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout,
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let mut body = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status != 200 {
            body.truncate(500);
            return Err(BackendError::Status { status, body });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&body).map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        Ok(parsed.content)
    }
}

/// Serves only what is already in the response cache; every call that
/// reaches it is a miss.
pub struct CacheReplayBackend;

impl AnnotatorBackend for CacheReplayBackend {
    fn name(&self) -> &str {
        "cache-replay"
    }

    fn complete(&self, request: &ChatRequest, _ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        Err(BackendError::CacheMiss(request.hash()))
    }
}

/// Hermetic stand-in for a vision-language model. It ignores the pixels,
/// recomputes each transition's shaped reward from the task, adds Gaussian
/// noise in score units and answers in the requested grammar.
pub struct OracleBackend {
    tasks: HashMap<String, TaskSpec>,
    noise_std: f64,
    seed: u64,
    calls: AtomicUsize,
}

impl OracleBackend {
    /// `tasks` maps trajectory ids to the tasks they were generated from.
    pub fn new(tasks: HashMap<String, TaskSpec>, noise_std: f64, seed: u64) -> Result<Self, BackendError> {
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(BackendError::Oracle(format!("noise_std must be >= 0, got {noise_std}")));
        }
        Ok(OracleBackend { tasks, noise_std, seed, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn shaped(&self, window: &Window) -> Result<Vec<f64>, BackendError> {
        let task = self
            .tasks
            .get(&window.trajectory_id)
            .ok_or_else(|| BackendError::Oracle(format!("unknown trajectory {:?}", window.trajectory_id)))?;
        Ok(window
            .actions
            .iter()
            .enumerate()
            .map(|(i, &a)| shaped_reward(task, &window.states[i], a, &window.states[i + 1]))
            .collect())
    }

    /// Noisy integer scores; the noise stream depends only on the seed and
    /// the window identity.
    pub fn scores(&self, window: &Window, scale_max: u32) -> Result<Vec<u32>, BackendError> {
        let shaped = self.shaped(window)?;
        let mut rng = seed::rng(seed::derive(
            self.seed,
            &[seed::hash_str(&window.trajectory_id), window.start_index as u64],
        ));
        let normal = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
        Ok(shaped
            .iter()
            .map(|&r| {
                let noise = if self.noise_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                quantize(scale_max as f64 * r + noise, scale_max)
            })
            .collect())
    }
}

/// Clamps to `[0, scale_max]` and rounds half away from zero.
pub fn quantize(x: f64, scale_max: u32) -> u32 {
    x.clamp(0.0, scale_max as f64).round() as u32
}

impl AnnotatorBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn label_source(&self) -> LabelSource {
        LabelSource::Oracle
    }

    fn complete(&self, _request: &ChatRequest, ctx: &QueryContext<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let w = ctx.window;
        match ctx.stage {
            Stage::Analysis => {
                let shaped = self.shaped(w)?;
                let lines: Vec<String> = w
                    .actions
                    .iter()
                    .zip(&shaped)
                    .enumerate()
                    .map(|(i, (a, &r))| {
                        let effect = if r >= 1.0 {
                            "completes the current sub-task"
                        } else if r > 0.0 {
                            "moves the agent closer to the current target"
                        } else {
                            "does not advance the goal"
                        };
                        format!("Step {i} ({}): {effect}.", a.name())
                    })
                    .collect();
                Ok(format!("Analysis of {} actions:\n{}", w.len(), lines.join("\n")))
            }
            Stage::Scoring => {
                let scores = self.scores(w, ctx.scale_max)?;
                Ok(format!("Scores:\n{}", format_scores(&scores)))
            }
        }
    }
}
