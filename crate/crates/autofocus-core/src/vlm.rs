//! OpenAI-compatible vision-chat client with a deterministic mock transport.
//!
//! Prompts are built from the versioned templates in `templates/`; responses
//! are parsed leniently (code fences and surrounding prose are tolerated) but
//! validated strictly against the expected JSON schema.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::detect::{normalize_term, BBox};
use crate::error::{Error, Result};
use crate::manifest::{format_significant, ActionValue};

pub const ENV_BASE_URL: &str = "AUTOFOCUS_VLM_BASE_URL";
pub const ENV_API_KEY: &str = "AUTOFOCUS_VLM_API_KEY";
pub const ENV_MODEL: &str = "AUTOFOCUS_VLM_MODEL";

const CONTEXT_TEMPLATE: &str = include_str!("../templates/context.txt");
const FILTER_TEMPLATE: &str = include_str!("../templates/filter.txt");

const SYSTEM_PROMPT: &str = "You annotate imitation-learning demonstrations. Always answer \
with exactly one JSON object matching the requested schema. No code fences, no extra prose.";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type")]
pub enum ContentPart {
    #[serde(rename = "text")]
    Text { text: String },
    #[serde(rename = "image_url")]
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageUrl {
    pub url: String,
}

/// Global demonstration summary plus the detector vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub task: String,
    pub environment: String,
    pub risks: Vec<String>,
    /// Non-empty, lowercase, deduplicated object terms.
    pub vocabulary: Vec<String>,
}

/// Parsed key-object decision for one sub-sequence. `key_ids` are raw model
/// output; the supervisor drops ids outside the active set.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub key_ids: Vec<i64>,
    pub missing_categories: Vec<String>,
}

/// One sampled frame for the context query.
pub struct ContextFrame {
    pub index: usize,
    pub png: Vec<u8>,
}

/// One tracked object line for the filter prompt.
#[derive(Debug, Clone)]
pub struct ActiveObject {
    pub id: u64,
    pub label: String,
    pub bbox: BBox,
}

/// Evenly spaced frame indices: `min(n, T)` samples from `[0, T-1]`
/// inclusive of both ends (a single sample falls on frame 0).
pub fn sample_context_frames(t_len: usize, n: usize) -> Vec<usize> {
    assert!(t_len >= 1 && n >= 1, "sample_context_frames needs T >= 1 and n >= 1");
    let k = n.min(t_len);
    if k == 1 {
        return vec![0];
    }
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let idx = (j as f64 * (t_len - 1) as f64 / (k - 1) as f64).round() as usize;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    out
}

fn data_uri(png: &[u8]) -> String {
    format!("data:image/png;base64,{}", crate::detect::base64_encode(png))
}

/// Multi-image context request: sampled frames in temporal order followed by
/// the instruction text, with the schema pinned in the system message.
pub fn build_context_prompt(
    model: &str,
    frames: &[ContextFrame],
    actions: &[ActionValue],
) -> Result<ChatRequest> {
    if frames.is_empty() {
        return Err(Error::Pipeline("context prompt needs at least one frame".into()));
    }
    if frames.len() != actions.len() {
        return Err(Error::Pipeline(format!(
            "context prompt got {} frames but {} actions",
            frames.len(),
            actions.len()
        )));
    }
    for pair in frames.windows(2) {
        if pair[1].index <= pair[0].index {
            return Err(Error::Pipeline(format!(
                "context frames out of order: index {} follows {}",
                pair[1].index, pair[0].index
            )));
        }
    }
    let action_lines: Vec<String> = frames
        .iter()
        .zip(actions)
        .map(|(f, a)| format!("frame {}: {}", f.index, a.to_prompt_text()))
        .collect();
    let text = CONTEXT_TEMPLATE.replace("{action}", &action_lines.join("\n"));

    let mut parts: Vec<ContentPart> = frames
        .iter()
        .map(|f| ContentPart::ImageUrl { image_url: ImageUrl { url: data_uri(&f.png) } })
        .collect();
    parts.push(ContentPart::Text { text });
    Ok(ChatRequest {
        model: model.to_owned(),
        messages: vec![
            ChatMessage { role: "system".into(), content: MessageContent::Text(SYSTEM_PROMPT.into()) },
            ChatMessage { role: "user".into(), content: MessageContent::Parts(parts) },
        ],
        temperature: 0.0,
    })
}

fn context_block(context: &ContextSummary) -> String {
    format!(
        "task: {}\nenvironment: {}\nrisks: {}\nvocabulary: {}",
        context.task,
        context.environment,
        if context.risks.is_empty() { "none".to_owned() } else { context.risks.join("; ") },
        context.vocabulary.join(", ")
    )
}

fn format_box(bbox: &BBox) -> String {
    format!(
        "[{}, {}, {}, {}]",
        format_significant(bbox.x_min),
        format_significant(bbox.y_min),
        format_significant(bbox.x_max),
        format_significant(bbox.y_max)
    )
}

/// Single-image filter request for the first frame of a sub-sequence.
pub fn build_filter_prompt(
    model: &str,
    frame_png: &[u8],
    action: &ActionValue,
    context: &ContextSummary,
    active: &[ActiveObject],
) -> ChatRequest {
    let objects = if active.is_empty() {
        "(none)".to_owned()
    } else {
        active
            .iter()
            .map(|o| format!("id={} label={} box={}", o.id, o.label, format_box(&o.bbox)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let text = FILTER_TEMPLATE
        .replace("{context}", &context_block(context))
        .replace("{action}", &action.to_prompt_text())
        .replace("{objects}", &objects);
    ChatRequest {
        model: model.to_owned(),
        messages: vec![
            ChatMessage { role: "system".into(), content: MessageContent::Text(SYSTEM_PROMPT.into()) },
            ChatMessage {
                role: "user".into(),
                content: MessageContent::Parts(vec![
                    ContentPart::ImageUrl { image_url: ImageUrl { url: data_uri(frame_png) } },
                    ContentPart::Text { text },
                ]),
            },
        ],
        temperature: 0.0,
    }
}

/// Finds the first brace-balanced substring that parses as a JSON object.
/// Braces inside string literals are handled; fences and prose are skipped.
fn extract_first_json_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut search_from = 0;
    while let Some(rel) = raw[search_from..].find('{') {
        let start = search_from + rel;
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (i, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_string = false;
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &raw[start..=start + i];
                        if serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(
                            candidate,
                        )
                        .is_ok()
                        {
                            return Some(candidate);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        search_from = start + 1;
    }
    None
}

/// Trim, lowercase and dedupe, keeping first-occurrence order and dropping
/// empties.
pub fn normalize_vocabulary(terms: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(terms.len());
    for term in terms {
        let n = normalize_term(term);
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

#[derive(Deserialize)]
struct RawContext {
    task: String,
    environment: String,
    risks: Vec<String>,
    objects: Vec<String>,
}

/// Parses the context reply into a validated, normalized summary.
pub fn parse_context_response(raw: &str) -> Result<ContextSummary> {
    let json = extract_first_json_object(raw).ok_or_else(|| Error::VlmParse {
        message: "no JSON object found".into(),
        raw: raw.to_owned(),
    })?;
    let parsed: RawContext = serde_json::from_str(json).map_err(|e| Error::VlmParse {
        message: format!("context reply does not match the schema: {e}"),
        raw: raw.to_owned(),
    })?;
    let vocabulary = normalize_vocabulary(&parsed.objects);
    if vocabulary.is_empty() {
        return Err(Error::VlmParse {
            message: "objects list is empty after normalization".into(),
            raw: raw.to_owned(),
        });
    }
    Ok(ContextSummary {
        task: parsed.task,
        environment: parsed.environment,
        risks: parsed.risks,
        vocabulary,
    })
}

#[derive(Deserialize)]
struct RawFilter {
    key_object_ids: Vec<i64>,
    missing_categories: Vec<String>,
}

/// Parses the filter reply; missing categories come back normalized.
pub fn parse_filter_response(raw: &str) -> Result<FilterDecision> {
    let json = extract_first_json_object(raw).ok_or_else(|| Error::VlmParse {
        message: "no JSON object found".into(),
        raw: raw.to_owned(),
    })?;
    let parsed: RawFilter = serde_json::from_str(json).map_err(|e| Error::VlmParse {
        message: format!("filter reply does not match the schema: {e}"),
        raw: raw.to_owned(),
    })?;
    Ok(FilterDecision {
        key_ids: parsed.key_object_ids,
        missing_categories: normalize_vocabulary(&parsed.missing_categories),
    })
}

/// Transport abstraction: the pipeline only needs the reply text for a
/// request. `scope` is the trajectory name, which the mock uses to key its
/// per-trajectory response scripts.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, scope: &str, request: &ChatRequest) -> Result<String>;
}

/// Counting semaphore bounding concurrent in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.sem.available.notify_one();
    }
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Blocking HTTP transport for POST `<base_url>/chat/completions` with
/// bearer auth, bounded exponential backoff on 429/5xx and an in-flight cap.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    max_attempts: u32,
    base_delay: Duration,
    limiter: Semaphore,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("default reqwest client"),
            base_url: base_url.into(),
            api_key,
            max_attempts: 4,
            base_delay: Duration::from_millis(250),
            limiter: Semaphore::new(4),
        }
    }

    /// Reads the endpoint and key from `AUTOFOCUS_VLM_BASE_URL` and
    /// `AUTOFOCUS_VLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let base_url = std::env::var(ENV_BASE_URL)
            .map_err(|_| Error::VlmTransport(format!("{ENV_BASE_URL} is not set")))?;
        let api_key = std::env::var(ENV_API_KEY).ok();
        Ok(HttpTransport::new(base_url, api_key))
    }

    pub fn with_in_flight(mut self, n: usize) -> Self {
        self.limiter = Semaphore::new(n);
        self
    }

    pub fn with_backoff(mut self, max_attempts: u32, base_delay: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.base_delay = base_delay;
        self
    }

    fn retryable(status: reqwest::StatusCode) -> bool {
        status.as_u16() == 429 || status.is_server_error()
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, _scope: &str, request: &ChatRequest) -> Result<String> {
        let _permit = self.limiter.acquire();
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut last_error = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
            }
            let mut builder = self.client.post(&url).json(request);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().map_err(|e| {
                        Error::VlmTransport(format!("reading response body: {e}"))
                    })?;
                    if status.is_success() {
                        let parsed: ChatCompletionResponse = serde_json::from_str(&text)
                            .map_err(|e| {
                                Error::VlmTransport(format!("malformed completion response: {e}"))
                            })?;
                        return parsed
                            .choices
                            .first()
                            .map(|c| c.message.content.clone())
                            .ok_or_else(|| {
                                Error::VlmTransport("completion response has no choices".into())
                            });
                    }
                    last_error = format!("status {status}: {}", &text[..text.len().min(200)]);
                    if !Self::retryable(status) {
                        return Err(Error::VlmTransport(last_error));
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(Error::VlmTransport(format!(
            "giving up after {} attempts: {last_error}",
            self.max_attempts
        )))
    }
}

/// Deterministic transport replaying canned responses. The fixture maps each
/// trajectory name to the ordered list of responses it will receive.
pub struct MockTransport {
    responses: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new(responses: HashMap<String, Vec<String>>) -> Self {
        MockTransport { responses, cursors: Mutex::new(HashMap::new()), calls: AtomicUsize::new(0) }
    }

    /// Fixture file layout: `{"<trajectory>": ["reply 0", "reply 1", ...]}`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading mock fixture {}", path.display()), e))?;
        let responses: HashMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing mock fixture {}", path.display()), e))?;
        Ok(MockTransport::new(responses))
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatTransport for MockTransport {
    fn complete(&self, scope: &str, _request: &ChatRequest) -> Result<String> {
        let script = self.responses.get(scope).ok_or_else(|| {
            Error::VlmTransport(format!("mock transport has no responses for \"{scope}\""))
        })?;
        let mut cursors = self.cursors.lock().expect("mock cursor lock poisoned");
        let ordinal = cursors.entry(scope.to_owned()).or_insert(0);
        let response = script.get(*ordinal).ok_or_else(|| {
            Error::VlmTransport(format!(
                "mock transport exhausted for \"{scope}\" at ordinal {ordinal}"
            ))
        })?;
        *ordinal += 1;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(response.clone())
    }
}

/// Chat client bound to a model name and a transport. The transport is
/// shared so callers can keep a handle for call accounting.
pub struct VlmClient {
    transport: Arc<dyn ChatTransport>,
    model: String,
}

impl VlmClient {
    pub fn new(transport: Arc<dyn ChatTransport>, model: impl Into<String>) -> Self {
        VlmClient { transport, model: model.into() }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn query_context(
        &self,
        scope: &str,
        frames: &[ContextFrame],
        actions: &[ActionValue],
    ) -> Result<ContextSummary> {
        let request = build_context_prompt(&self.model, frames, actions)?;
        let raw = self.transport.complete(scope, &request)?;
        parse_context_response(&raw)
    }

    pub fn query_filter(
        &self,
        scope: &str,
        frame_png: &[u8],
        action: &ActionValue,
        context: &ContextSummary,
        active: &[ActiveObject],
    ) -> Result<FilterDecision> {
        let request = build_filter_prompt(&self.model, frame_png, action, context, active);
        let raw = self.transport.complete(scope, &request)?;
        parse_filter_response(&raw)
    }
}
