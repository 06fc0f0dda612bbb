//! Question generation through a completion backend.
//!
//! A backend turns a [`CompletionRequest`] into a [`Completion`] carrying the
//! generated tokens and their natural-log probabilities. Two backends ship:
//! [`MockBackend`], which replays scripted completions keyed by document id or
//! prompt hash, and [`RemoteBackend`], which talks to an HTTP completion
//! endpoint.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, CorpusError, CorpusHandle, Document};
use crate::par;
use crate::promptkit::{PromptError, PromptMode, PromptTemplate};

/// Greedy decoding.
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: usize = 64;
pub const DEFAULT_NUM_DOCUMENTS: usize = 100_000;
pub const API_KEY_ENV: &str = "INPARS_API_KEY";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, Self::Unavailable(_) | Self::RateLimited { .. })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("generated question is empty")]
    EmptyGeneration,
    #[error("no good question in gbq continuation {0:?}")]
    GbqParseFailure(String),
    #[error("document {0:?} has no text to generate from")]
    EmptyDocument(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{failed} of {requested} generations failed, above the {ceiling} ceiling")]
    FailureCeilingExceeded {
        failed: usize,
        requested: usize,
        ceiling: f64,
    },
    #[error("invalid generation record at line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub stop_sequences: Vec<String>,
    pub want_logprobs: bool,
    /// Document the prompt was built from. Not sent over the wire; the mock
    /// backend uses it as a lookup key.
    pub source_id: Option<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: None,
            stop_sequences: vec!["\n".into()],
            want_logprobs: true,
            source_id: None,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(
                "temperature must be non-negative".into(),
            ));
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return Err(BackendError::InvalidRequest("empty stop sequence".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub finish_reason: FinishReason,
}

impl Completion {
    fn check(&self, want_logprobs: bool) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Protocol(m));
        if self.tokens.len() != self.token_logprobs.len() {
            return bad(format!(
                "{} tokens but {} logprobs",
                self.tokens.len(),
                self.token_logprobs.len()
            ));
        }
        if let Some(lp) = self
            .token_logprobs
            .iter()
            .find(|lp| lp.is_nan() || **lp > 0.0)
        {
            return bad(format!("log-probability {lp} is not <= 0"));
        }
        if want_logprobs && self.tokens.concat() != self.text {
            return bad("tokens do not concatenate to the completion text".into());
        }
        Ok(())
    }
}

/// Applies stop sequences and the token cap to a raw token stream.
///
/// Generation halts at the earliest stop sequence (which is excluded; a token
/// straddling it keeps only its part before the stop) or after `max_tokens`
/// tokens. If neither triggers, `natural_finish` is reported.
pub fn truncate_stream(
    tokens: &[String],
    logprobs: &[f64],
    stop: &[String],
    max_tokens: usize,
    natural_finish: FinishReason,
) -> Completion {
    let longest_stop = stop.iter().map(String::len).max().unwrap_or(0);
    let mut text = String::new();
    let mut starts = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i == max_tokens {
            return build(text, tokens, logprobs, &starts, None, FinishReason::Length);
        }
        let from = floor_boundary(
            &text,
            text.len().saturating_sub(longest_stop.saturating_sub(1)),
        );
        starts.push(text.len());
        text.push_str(tok);
        let hit = stop
            .iter()
            .filter_map(|s| text[from..].find(s.as_str()).map(|p| from + p))
            .min();
        if let Some(cut) = hit {
            return build(
                text,
                tokens,
                logprobs,
                &starts,
                Some(cut),
                FinishReason::Stop,
            );
        }
    }
    return build(text, tokens, logprobs, &starts, None, natural_finish);

    fn build(
        mut text: String,
        tokens: &[String],
        logprobs: &[f64],
        starts: &[usize],
        cut: Option<usize>,
        finish: FinishReason,
    ) -> Completion {
        let cut = cut.unwrap_or(text.len());
        text.truncate(cut);
        let mut out_tokens = Vec::new();
        let mut out_lps = Vec::new();
        for (i, &start) in starts.iter().enumerate() {
            if start >= cut {
                break;
            }
            let end = (start + tokens[i].len()).min(cut);
            out_tokens.push(text[start..end].to_string());
            out_lps.push(logprobs.get(i).copied().unwrap_or(f64::NAN));
        }
        Completion {
            text,
            tokens: out_tokens,
            token_logprobs: out_lps,
            finish_reason: finish,
        }
    }
}

fn floor_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;
}

/// Validates the request, calls the backend and checks the returned
/// completion's invariants.
pub fn complete(
    backend: &dyn CompletionBackend,
    request: &CompletionRequest,
) -> Result<Completion, BackendError> {
    request.validate()?;
    let completion = backend.complete(request)?;
    completion.check(request.want_logprobs)?;
    if completion.tokens.len() > request.max_tokens {
        return Err(BackendError::Protocol(format!(
            "{} tokens exceed max_tokens {}",
            completion.tokens.len(),
            request.max_tokens
        )));
    }
    Ok(completion)
}

/// Hex SHA-256 of a prompt; the mock backend's secondary lookup key.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    Unavailable,
    RateLimited,
    Protocol,
}

/// One canned response of the [`MockBackend`]. The token stream is what the
/// model "would emit"; stop sequences and the token cap of each request are
/// applied on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCompletion {
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub logprobs: Vec<f64>,
    #[serde(default = "default_finish")]
    pub finish_reason: FinishReason,
    /// Fail instead of completing. With `fail_times`, only the first that
    /// many calls fail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_times: Option<u32>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
}

fn default_finish() -> FinishReason {
    FinishReason::Stop
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl ScriptedCompletion {
    pub fn new(tokens: &[&str], logprobs: &[f64]) -> Self {
        Self {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            logprobs: logprobs.to_vec(),
            finish_reason: FinishReason::Stop,
            error: None,
            fail_times: None,
            delay_ms: 0,
        }
    }

    pub fn failing(kind: ScriptedFailure) -> Self {
        Self {
            error: Some(kind),
            ..Self::new(&[], &[])
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay_ms = delay.as_millis() as u64;
        self
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptRecord {
    #[serde(default)]
    doc_id: Option<String>,
    #[serde(default)]
    prompt_hash: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(flatten)]
    completion: ScriptedCompletion,
}

/// Deterministic backend replaying scripted completions.
#[derive(Debug, Default)]
pub struct MockBackend {
    by_doc: HashMap<String, ScriptedCompletion>,
    by_prompt: HashMap<String, ScriptedCompletion>,
    failures_served: Mutex<HashMap<String, u32>>,
    calls: Mutex<u64>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_doc(mut self, doc_id: impl Into<String>, completion: ScriptedCompletion) -> Self {
        self.by_doc.insert(doc_id.into(), completion);
        self
    }

    pub fn with_prompt(mut self, prompt: &str, completion: ScriptedCompletion) -> Self {
        self.by_prompt.insert(prompt_hash(prompt), completion);
        self
    }

    /// Loads a JSONL script. Each record names a `doc_id` or a `prompt_hash`
    /// and carries `tokens`, `logprobs`, and optionally `text` (which must
    /// equal the concatenated tokens), `finish_reason`, `error`,
    /// `fail_times` and `delay_ms`.
    pub fn from_script(path: impl AsRef<Path>) -> Result<Self, GenerationError> {
        Self::from_script_reader(BufReader::new(File::open(path)?))
    }

    pub fn from_script_reader<R: BufRead>(reader: R) -> Result<Self, GenerationError> {
        let mut mock = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |reason: String| GenerationError::InvalidRecord {
                line: line_no,
                reason,
            };
            let rec: ScriptRecord =
                serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
            let sc = rec.completion;
            if sc.tokens.len() != sc.logprobs.len() {
                return Err(invalid("tokens and logprobs differ in length".into()));
            }
            if let Some(text) = rec.text {
                if text != sc.tokens.concat() {
                    return Err(invalid(
                        "text does not match the concatenated tokens".into(),
                    ));
                }
            }
            match (rec.doc_id, rec.prompt_hash) {
                (Some(id), None) => mock.by_doc.insert(id, sc),
                (None, Some(h)) => mock.by_prompt.insert(h, sc),
                _ => {
                    return Err(invalid(
                        "exactly one of doc_id or prompt_hash is required".into(),
                    ))
                }
            };
        }
        Ok(mock)
    }

    /// Number of `complete` calls served so far.
    pub fn calls(&self) -> u64 {
        *self.calls.lock().unwrap()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        *self.calls.lock().unwrap() += 1;
        let hash = prompt_hash(&request.prompt);
        let (key, script) = request
            .source_id
            .as_ref()
            .and_then(|id| self.by_doc.get(id).map(|s| (id.clone(), s)))
            .or_else(|| self.by_prompt.get(&hash).map(|s| (hash.clone(), s)))
            .ok_or_else(|| BackendError::Protocol("no scripted completion for request".into()))?;
        if script.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(script.delay_ms));
        }
        if let Some(kind) = script.error {
            let mut served = self.failures_served.lock().unwrap();
            let count = served.entry(key).or_default();
            if script.fail_times.is_none_or(|n| *count < n) {
                *count += 1;
                return Err(match kind {
                    ScriptedFailure::Unavailable => {
                        BackendError::Unavailable("scripted outage".into())
                    }
                    ScriptedFailure::RateLimited => BackendError::RateLimited { retry_after: None },
                    ScriptedFailure::Protocol => {
                        BackendError::Protocol("scripted malformed response".into())
                    }
                });
            }
        }
        Ok(truncate_stream(
            &script.tokens,
            &script.logprobs,
            &request.stop_sequences,
            request.max_tokens,
            script.finish_reason,
        ))
    }
}

/// HTTP completion client.
///
/// Sends `{"prompt", "max_tokens", "temperature", "stop", "logprobs"}` (plus
/// `model` and `top_p` when set) and reads `choices[0].text`,
/// `choices[0].logprobs.tokens`, `choices[0].logprobs.token_logprobs` and
/// `choices[0].finish_reason`. The bearer token comes from `INPARS_API_KEY`.
pub struct RemoteBackend {
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, model: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            model,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": request.stop_sequences,
        });
        if request.want_logprobs {
            body["logprobs"] = 0.into();
        }
        if let Some(model) = &self.model {
            body["model"] = model.clone().into();
        }
        if let Some(p) = request.top_p {
            body["top_p"] = p.into();
        }
        body
    }
}

/// Parses a completion response body and re-applies the request's stop and
/// length limits to the returned token stream.
pub fn parse_completion_response(
    body: &str,
    request: &CompletionRequest,
) -> Result<Completion, BackendError> {
    #[derive(Deserialize)]
    struct Response {
        choices: Vec<Choice>,
    }
    #[derive(Deserialize)]
    struct Choice {
        text: String,
        #[serde(default)]
        logprobs: Option<Logprobs>,
        #[serde(default)]
        finish_reason: Option<String>,
    }
    #[derive(Deserialize)]
    struct Logprobs {
        tokens: Vec<String>,
        token_logprobs: Vec<f64>,
    }

    let protocol = |m: String| BackendError::Protocol(m);
    let resp: Response =
        serde_json::from_str(body).map_err(|e| protocol(format!("malformed body: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| protocol("response has no choices".into()))?;
    let finish = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    let Some(lp) = choice.logprobs else {
        if request.want_logprobs {
            return Err(protocol("response lacks logprobs".into()));
        }
        return Ok(Completion {
            text: choice.text,
            tokens: Vec::new(),
            token_logprobs: Vec::new(),
            finish_reason: finish,
        });
    };
    if lp.tokens.len() != lp.token_logprobs.len() {
        return Err(protocol(
            "tokens and token_logprobs differ in length".into(),
        ));
    }
    // rounding can leave certain tokens a hair above zero
    let logprobs: Vec<f64> = lp
        .token_logprobs
        .iter()
        .map(|&x| if x > 0.0 && x < 1e-6 { 0.0 } else { x })
        .collect();
    let completion = truncate_stream(
        &lp.tokens,
        &logprobs,
        &request.stop_sequences,
        request.max_tokens,
        finish,
    );
    // servers may or may not have applied the stop sequences themselves
    if completion.text != choice.text && lp.tokens.concat() != choice.text {
        return Err(protocol(
            "token stream does not reproduce the completion text".into(),
        ));
    }
    Ok(completion)
}

impl CompletionBackend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let mut req = self.agent.post(&self.url).content_type("application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(self.request_body(request).to_string())
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { retry_after });
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        match status {
            200..=299 => parse_completion_response(&body, request),
            500..=599 => Err(BackendError::Unavailable(format!("HTTP {status}"))),
            _ => Err(BackendError::Protocol(format!("HTTP {status}: {body}"))),
        }
    }
}

/// One generated question with the log-probabilities of its tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub doc_id: String,
    pub question: String,
    pub token_logprobs: Vec<f64>,
    pub mean_logprob: f64,
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discarded_bad_question: Option<String>,
}

/// Arithmetic mean of token log-probabilities, or `None` for an empty slice.
pub fn mean_of(logprobs: &[f64]) -> Option<f64> {
    if logprobs.is_empty() {
        None
    } else {
        Some(logprobs.iter().sum::<f64>() / logprobs.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub retries: u32,
    pub backoff: Duration,
    pub in_flight: usize,
    pub failure_ceiling: f64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: None,
            retries: 3,
            backoff: Duration::from_millis(500),
            in_flight: 8,
            failure_ceiling: 0.2,
        }
    }
}

fn complete_with_retry(
    backend: &dyn CompletionBackend,
    request: &CompletionRequest,
    settings: &GenerationSettings,
) -> Result<Completion, BackendError> {
    let mut attempt = 0;
    loop {
        match complete(backend, request) {
            Err(e) if e.is_transient() && attempt < settings.retries => {
                let backoff = settings.backoff * 2u32.saturating_pow(attempt);
                let wait = match e {
                    BackendError::RateLimited {
                        retry_after: Some(after),
                    } => after.max(backoff),
                    _ => backoff,
                };
                log::debug!("retrying after {e} in {wait:?}");
                std::thread::sleep(wait);
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Log-probabilities of the tokens overlapping `text[span]`.
fn span_logprobs(completion: &Completion, span: std::ops::Range<usize>) -> Vec<f64> {
    let mut start = 0;
    let mut out = Vec::new();
    for (tok, &lp) in completion.tokens.iter().zip(&completion.token_logprobs) {
        let end = start + tok.len();
        if start < span.end && end > span.start {
            out.push(lp);
        }
        start = end;
    }
    out
}

/// Byte range of `s.trim()` within `s`, offset by `base`.
fn trimmed_span(s: &str, base: usize) -> std::ops::Range<usize> {
    let lead = s.len() - s.trim_start().len();
    let trimmed = s.trim();
    base + lead..base + lead + trimmed.len()
}

/// Renders the prompt for `doc`, runs one greedy completion and extracts the
/// question. In GBQ mode the continuation holds a bad question on its first
/// line and the kept question on a later line starting with the good-question
/// cue; only the kept question's tokens are scored.
pub fn generate_for_document(
    backend: &dyn CompletionBackend,
    template: &PromptTemplate,
    doc: &Document,
    settings: &GenerationSettings,
) -> Result<GeneratedQuery, GenerationError> {
    let text = doc.presentation_text();
    if text.is_empty() {
        return Err(GenerationError::EmptyDocument(doc.doc_id.clone()));
    }
    let prompt = template.render(&text)?;
    let stop = match template.mode() {
        PromptMode::Vanilla => vec!["\n".to_string()],
        PromptMode::Gbq => vec!["\n\n".to_string()],
    };
    let request = CompletionRequest {
        prompt,
        max_tokens: settings.max_tokens,
        temperature: settings.temperature,
        top_p: settings.top_p,
        stop_sequences: stop,
        want_logprobs: true,
        source_id: Some(doc.doc_id.clone()),
    };
    let completion = complete_with_retry(backend, &request, settings)?;

    let (span, bad) = match template.mode() {
        PromptMode::Vanilla => (trimmed_span(&completion.text, 0), None),
        PromptMode::Gbq => {
            let cue = template.cues().good_question.as_str();
            let mut offset = 0;
            let mut found = None;
            let mut bad = None;
            for (i, line) in completion.text.split('\n').enumerate() {
                if i == 0 {
                    bad = Some(line.trim().to_string()).filter(|b| !b.is_empty());
                } else {
                    let lead = line.len() - line.trim_start().len();
                    if let Some(rest) = line[lead..].strip_prefix(cue) {
                        let base = offset + lead + cue.len();
                        found = Some(trimmed_span(rest, base));
                        break;
                    }
                }
                offset += line.len() + 1;
            }
            let span =
                found.ok_or_else(|| GenerationError::GbqParseFailure(completion.text.clone()))?;
            (span, bad)
        }
    };
    let question = completion.text[span.clone()].to_string();
    if question.is_empty() {
        return Err(GenerationError::EmptyGeneration);
    }
    let token_logprobs = span_logprobs(&completion, span);
    let mean_logprob = mean_of(&token_logprobs).ok_or(GenerationError::EmptyGeneration)?;
    Ok(GeneratedQuery {
        doc_id: doc.doc_id.clone(),
        question,
        token_logprobs,
        mean_logprob,
        mode: template.mode(),
        discarded_bad_question: bad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub doc_id: String,
    pub error: String,
}

/// Generated queries sorted by doc_id, plus the failures that were skipped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationSet {
    pub queries: Vec<GeneratedQuery>,
    pub failures: Vec<GenerationFailure>,
    pub n_requested: usize,
}

impl GenerationSet {
    pub fn from_queries(mut queries: Vec<GeneratedQuery>) -> Self {
        queries.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        Self {
            n_requested: queries.len(),
            queries,
            failures: Vec::new(),
        }
    }

    pub fn n_succeeded(&self) -> usize {
        self.queries.len()
    }

    pub fn n_failed(&self) -> usize {
        self.failures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    /// One [`GeneratedQuery`] per line, in stored order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for q in &self.queries {
            serde_json::to_writer(&mut out, q)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_failures_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for f in &self.failures {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a generation file, checking that every stored mean matches its
    /// token log-probabilities.
    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, GenerationError> {
        let mut queries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |reason: String| GenerationError::InvalidRecord {
                line: idx + 1,
                reason,
            };
            let q: GeneratedQuery =
                serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
            let mean =
                mean_of(&q.token_logprobs).ok_or_else(|| invalid("empty token_logprobs".into()))?;
            if (mean - q.mean_logprob).abs() > 1e-12 {
                return Err(invalid(format!(
                    "mean_logprob {} != {mean}",
                    q.mean_logprob
                )));
            }
            if q.question.is_empty() {
                return Err(invalid("empty question".into()));
            }
            queries.push(q);
        }
        Ok(Self::from_queries(queries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenerationError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}

/// Samples `n` documents and generates one question for each. Per-document
/// failures are logged and skipped; the run fails only when the failure rate
/// exceeds `settings.failure_ceiling`. Output is sorted by doc_id regardless
/// of completion order.
pub fn run_generation(
    corpus: &CorpusHandle,
    backend: &dyn CompletionBackend,
    template: &PromptTemplate,
    n: usize,
    min_chars: usize,
    seed: u64,
    settings: &GenerationSettings,
) -> Result<GenerationSet, GenerationError> {
    let ids = corpus::sample_documents(corpus, n, min_chars, seed)?;
    let results = par::bounded_map(&ids, settings.in_flight, |id| {
        let doc = corpus.get(id).expect("sampled ids resolve");
        generate_for_document(backend, template, doc, settings)
    });

    let mut set = GenerationSet {
        n_requested: n,
        ..GenerationSet::default()
    };
    for (id, res) in ids.into_iter().zip(results) {
        match res {
            Ok(q) => set.queries.push(q),
            Err(e) => {
                log::warn!("generation failed for {id}: {e}");
                set.failures.push(GenerationFailure {
                    doc_id: id,
                    error: e.to_string(),
                });
            }
        }
    }
    set.queries.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    set.failures.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    if n > 0 && set.n_failed() as f64 / n as f64 > settings.failure_ceiling {
        return Err(GenerationError::FailureCeilingExceeded {
            failed: set.n_failed(),
            requested: n,
            ceiling: settings.failure_ceiling,
        });
    }
    Ok(set)
}
