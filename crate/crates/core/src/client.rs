//! Text-generation endpoint adapter.
//!
//! Builds prompts from the seq2seq and causal templates, calls a minimal
//! HTTP generation contract (`{prompt, max_tokens, stop}` in,
//! `{generated_text}` out), repairs the raw completion and exposes the
//! whole chain as a [`Detector`].

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::detectors::{DetectError, Detector};
use crate::masked::{align_gold_spans, extract_mask_spans, MaskedText, Segment};
use crate::span::Entity;
use crate::taxonomy::MappingTable;

pub const SEQ2SEQ_PREFIX: &str = "mask pii: ";
pub const STOP_SEQUENCE: &str = "</s>";
pub const DEFAULT_CAUSAL_PROMPT: &str =
    "Mask all personally identifiable information in the input with bracketed labels.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Seq2seq,
    Causal,
}

/// A prompt is `prefix + input + suffix`; generation continues after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub prefix: String,
    pub suffix: String,
    /// Marks where the model's answer starts in an echoed completion.
    pub output_delimiter: Option<String>,
    pub stop: String,
}

impl PromptTemplate {
    /// `mask pii: <input_text>`
    pub fn seq2seq() -> Self {
        Self {
            kind: TemplateKind::Seq2seq,
            prefix: SEQ2SEQ_PREFIX.to_string(),
            suffix: String::new(),
            output_delimiter: None,
            stop: STOP_SEQUENCE.to_string(),
        }
    }

    /// `<s>{prompt_text} Input: {input_text} Output:` with the output slot empty.
    pub fn causal(prompt_text: &str) -> Self {
        Self {
            kind: TemplateKind::Causal,
            prefix: format!("<s>{prompt_text} Input: "),
            suffix: " Output:".to_string(),
            output_delimiter: Some("Output:".to_string()),
            stop: STOP_SEQUENCE.to_string(),
        }
    }

    pub fn for_kind(kind: TemplateKind) -> Self {
        match kind {
            TemplateKind::Seq2seq => Self::seq2seq(),
            TemplateKind::Causal => Self::causal(DEFAULT_CAUSAL_PROMPT),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("prompt input is empty")]
    EmptyInput,
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("endpoint timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    TransportFailure { attempts: u32, message: String },
    #[error("endpoint returned status {status} after {attempts} attempt(s)")]
    NonRetryableStatus { attempts: u32, status: u16 },
    #[error("no documents to benchmark")]
    NoDocuments,
}

impl ClientError {
    pub fn attempts(&self) -> u32 {
        match self {
            ClientError::Timeout { attempts }
            | ClientError::TransportFailure { attempts, .. }
            | ClientError::NonRetryableStatus { attempts, .. } => *attempts,
            _ => 0,
        }
    }
}

impl From<ClientError> for DetectError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Timeout { attempts } => DetectError::Timeout { attempts },
            other => DetectError::Backend(other.to_string()),
        }
    }
}

pub fn format_prompt(template: &PromptTemplate, input: &str) -> Result<String, ClientError> {
    if input.is_empty() {
        return Err(ClientError::EmptyInput);
    }
    Ok(format!("{}{}{}", template.prefix, input, template.suffix))
}

// ---------------------------------------------------------------------------
// Output repair

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseNote {
    EchoStripped,
    StopTruncated,
    /// Output exceeded the cap and was cut to `cap` units (characters,
    /// with each mask token counting as one).
    RunawayTruncated { cap: usize, original: usize },
    Normalized { from: String, to: String },
    Unmapped { label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Verdict {
    /// Every bracket pair forms a mask token.
    pub parses: bool,
    pub labels_valid: bool,
    pub no_template_residue: bool,
    pub truncated: bool,
}

impl Verdict {
    pub fn well_formed(&self) -> bool {
        self.parses && self.labels_valid && self.no_template_residue && !self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub masked: MaskedText,
    pub notes: Vec<ParseNote>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct ParseOptions<'a> {
    pub mapping: &'a MappingTable,
    /// Output is capped at this multiple of the source length in characters.
    pub cap_factor: f64,
}

impl<'a> ParseOptions<'a> {
    pub fn new(mapping: &'a MappingTable) -> Self {
        Self { mapping, cap_factor: 2.0 }
    }
}

/// Output length with every mask token counted as a single unit.
fn output_units(segments: &[Segment]) -> usize {
    segments
        .iter()
        .map(|s| match s {
            Segment::Literal(l) => l.chars().count(),
            Segment::Mask(_) => 1,
        })
        .sum()
}

fn truncate_units(segments: &mut Vec<Segment>, cap: usize) {
    let mut left = cap;
    let mut keep = 0;
    for s in segments.iter_mut() {
        if left == 0 {
            break;
        }
        match s {
            Segment::Mask(_) => left -= 1,
            Segment::Literal(l) => {
                let n = l.chars().count();
                if n > left {
                    let end = l.char_indices().nth(left).map_or(l.len(), |(b, _)| b);
                    l.truncate(end);
                    left = 0;
                } else {
                    left -= n;
                }
            }
        }
        keep += 1;
    }
    segments.truncate(keep);
}

/// Repairs a raw completion into masked text. Never fails: the worst case
/// is the raw text flagged as malformed. Repair only strips, truncates and
/// renames labels; it never adds masks.
pub fn parse_model_output(raw: &str, template: &PromptTemplate, source: &str, opts: &ParseOptions) -> ParsedOutput {
    let mut notes = Vec::new();
    let mut text = raw;

    let echoed = format_prompt(template, source).ok();
    if let Some(rest) = echoed.as_deref().and_then(|p| text.strip_prefix(p)) {
        text = rest;
        notes.push(ParseNote::EchoStripped);
    } else if let Some(delim) = &template.output_delimiter {
        if let Some(pos) = text.find(delim.as_str()) {
            text = &text[pos + delim.len()..];
            notes.push(ParseNote::EchoStripped);
        }
    }
    if template.output_delimiter.is_some() {
        text = text.strip_prefix(' ').unwrap_or(text);
    }
    if !template.stop.is_empty() {
        if let Some(pos) = text.find(template.stop.as_str()) {
            text = &text[..pos];
            notes.push(ParseNote::StopTruncated);
        }
    }

    let mut seg = extract_mask_spans(text);
    let cap = (opts.cap_factor * source.chars().count() as f64).floor() as usize;
    let original = output_units(&seg.segments);
    let truncated = original > cap;
    if truncated {
        truncate_units(&mut seg.segments, cap);
        notes.push(ParseNote::RunawayTruncated { cap, original });
    }

    let mut labels_valid = true;
    for s in &mut seg.segments {
        if let Segment::Mask(label) = s {
            match opts.mapping.normalize_label(label) {
                Ok(canon) => {
                    if canon.as_str() != label {
                        notes.push(ParseNote::Normalized {
                            from: label.clone(),
                            to: canon.as_str().to_string(),
                        });
                        *label = canon.as_str().to_string();
                    }
                }
                Err(_) => {
                    labels_valid = false;
                    notes.push(ParseNote::Unmapped { label: label.clone() });
                }
            }
        }
    }
    let rendered = seg.render();

    let mut residue = vec!["<s>", STOP_SEQUENCE, template.stop.as_str(), template.prefix.trim()];
    if let Some(d) = &template.output_delimiter {
        residue.push(d);
        residue.push("Input:");
    }
    let no_template_residue = residue.iter().all(|r| r.is_empty() || !rendered.contains(r));

    ParsedOutput {
        masked: MaskedText::new(rendered),
        notes,
        verdict: Verdict {
            parses: seg.warnings == 0,
            labels_valid,
            no_template_residue,
            truncated,
        },
    }
}

// ---------------------------------------------------------------------------
// Endpoint client

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub route: String,
    pub health_route: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_tokens: u32,
    /// Name of the environment variable holding a bearer token.
    pub auth_env: Option<String>,
    pub initial_backoff: Duration,
    /// Maximum requests in flight from one client.
    pub concurrency: usize,
    /// Extra generation options passed through verbatim.
    pub options: serde_json::Map<String, serde_json::Value>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            route: "/generate".to_string(),
            health_route: "/health".to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            max_tokens: 512,
            auth_env: None,
            initial_backoff: Duration::from_millis(100),
            concurrency: 1,
            options: serde_json::Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout.is_zero() {
            return Err(ClientError::Config("timeout must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(ClientError::Config("concurrency must be at least 1".into()));
        }
        if !self.base_url.starts_with("http://") && !self.base_url.starts_with("https://") {
            return Err(ClientError::Config(format!("unsupported url {:?}", self.base_url)));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    stop: [&'a str; 1],
    #[serde(flatten)]
    options: &'a serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    generated_text: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ResponseBody {
    One(GenerateResponse),
    Many(Vec<GenerateResponse>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub durations: Vec<Duration>,
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner()) -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Done(String),
    Retry(ClientError),
    Fatal(ClientError),
}

pub struct EndpointClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    limiter: Limiter,
}

impl std::fmt::Debug for EndpointClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointClient").field("config", &self.config).finish()
    }
}

impl EndpointClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Config(e.to_string()))?;
        let limiter = Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: config.concurrency,
        };
        Ok(Self { config, http, limiter })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn attempt(&self, prompt: &str, attempt: u32) -> Attempt {
        let body = GenerateRequest {
            prompt,
            max_tokens: self.config.max_tokens,
            stop: [STOP_SEQUENCE],
            options: &self.config.options,
        };
        let mut req = self
            .http
            .post(format!("{}{}", self.config.base_url, self.config.route))
            .json(&body);
        if let Some(token) = self.config.auth_env.as_deref().and_then(|v| std::env::var(v).ok()) {
            req = req.bearer_auth(token);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(ClientError::Timeout { attempts: attempt }),
            Err(e) => {
                return Attempt::Retry(ClientError::TransportFailure {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status();
        if !status.is_success() {
            let err = ClientError::NonRetryableStatus {
                attempts: attempt,
                status: status.as_u16(),
            };
            return if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(ClientError::TransportFailure {
                    attempts: attempt,
                    message: format!("status {}", status.as_u16()),
                })
            } else {
                Attempt::Fatal(err)
            };
        }
        match resp.json::<ResponseBody>() {
            Ok(ResponseBody::One(r)) => Attempt::Done(r.generated_text),
            Ok(ResponseBody::Many(mut v)) if !v.is_empty() => Attempt::Done(v.swap_remove(0).generated_text),
            Ok(ResponseBody::Many(_)) => Attempt::Fatal(ClientError::TransportFailure {
                attempts: attempt,
                message: "empty response list".into(),
            }),
            Err(e) if e.is_timeout() => Attempt::Retry(ClientError::Timeout { attempts: attempt }),
            Err(e) => Attempt::Fatal(ClientError::TransportFailure {
                attempts: attempt,
                message: format!("malformed response: {e}"),
            }),
        }
    }

    /// Sends one prompt, retrying transient failures with exponential backoff.
    pub fn request_masking(&self, prompt: &str) -> Result<Completion, ClientError> {
        let _slot = self.limiter.acquire();
        let mut durations = Vec::new();
        let mut backoff = self.config.initial_backoff;
        let max_attempts = self.config.max_retries + 1;
        for attempt in 1..=max_attempts {
            let started = Instant::now();
            let outcome = self.attempt(prompt, attempt);
            durations.push(started.elapsed());
            match outcome {
                Attempt::Done(text) => {
                    tracing::debug!(attempt, elapsed = ?durations.last(), "completion received");
                    return Ok(Completion {
                        text,
                        attempts: attempt,
                        durations,
                    });
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) if attempt == max_attempts => return Err(e),
                Attempt::Retry(e) => {
                    tracing::warn!(attempt, error = %e, "retrying endpoint request");
                    thread::sleep(backoff);
                    backoff = backoff.saturating_mul(2);
                }
            }
        }
        unreachable!("loop returns on the final attempt")
    }

    /// True when the health route answers with a success status.
    pub fn health(&self) -> bool {
        self.http
            .get(format!("{}{}", self.config.base_url, self.config.health_route))
            .send()
            .map(|r| r.status().is_success())
            .unwrap_or(false)
    }
}

/// An endpoint-backed model used as a detector: prompt, generate, repair,
/// then align the masked output against the input.
#[derive(Debug)]
pub struct EndpointDetector {
    pub client: EndpointClient,
    pub template: PromptTemplate,
    pub mapping: MappingTable,
    pub cap_factor: f64,
}

impl EndpointDetector {
    pub fn new(client: EndpointClient, template: PromptTemplate) -> Self {
        Self {
            client,
            template,
            mapping: MappingTable::default(),
            cap_factor: 2.0,
        }
    }

    /// Runs the model and returns the repaired output.
    pub fn generate(&self, text: &str) -> Result<ParsedOutput, ClientError> {
        let prompt = format_prompt(&self.template, text)?;
        let completion = self.client.request_masking(&prompt)?;
        let opts = ParseOptions {
            mapping: &self.mapping,
            cap_factor: self.cap_factor,
        };
        Ok(parse_model_output(&completion.text, &self.template, text, &opts))
    }
}

impl Detector for EndpointDetector {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let parsed = self.generate(text)?;
        align_gold_spans(text, &parsed.masked)
            .map_err(|e| DetectError::Backend(format!("model output does not align with input: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Latency

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
    pub failures: usize,
}

impl LatencyStats {
    /// Nearest-rank quantiles over the given samples, in seconds.
    pub fn from_samples(samples: &[f64], failures: usize) -> Self {
        if samples.is_empty() {
            return Self {
                failures,
                ..Default::default()
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
            max: sorted[sorted.len() - 1],
            failures,
        }
    }
}

impl std::fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "requests   {}", self.count + self.failures)?;
        writeln!(f, "failures   {}", self.failures)?;
        writeln!(f, "mean       {:.3} s", self.mean)?;
        writeln!(f, "p50        {:.3} s", self.p50)?;
        writeln!(f, "p95        {:.3} s", self.p95)?;
        write!(f, "max        {:.3} s", self.max)
    }
}

/// Times one request per document, sequentially.
pub fn bench_latency(client: &EndpointClient, template: &PromptTemplate, documents: &[String]) -> Result<LatencyStats, ClientError> {
    if documents.is_empty() {
        return Err(ClientError::NoDocuments);
    }
    let mut samples = Vec::with_capacity(documents.len());
    let mut failures = 0;
    for doc in documents {
        let prompt = format_prompt(template, doc)?;
        let started = Instant::now();
        match client.request_masking(&prompt) {
            Ok(_) => samples.push(started.elapsed().as_secs_f64()),
            Err(e) => {
                tracing::warn!(error = %e, "benchmark request failed");
                failures += 1;
            }
        }
    }
    Ok(LatencyStats::from_samples(&samples, failures))
}

// ---------------------------------------------------------------------------
// Mock endpoint

type Responder = dyn Fn(&str) -> String + Send + Sync;

/// A local generation server for tests: answers every prompt through a
/// closure, optionally after a delay or with injected failures.
pub struct MockEndpoint {
    responder: Arc<Responder>,
    delay: Duration,
    fail_first: usize,
    fail_status: u16,
}

impl MockEndpoint {
    pub fn new(responder: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self {
            responder: Arc::new(responder),
            delay: Duration::ZERO,
            fail_first: 0,
            fail_status: 503,
        }
    }

    /// Always answers with `completion`.
    pub fn canned(completion: impl Into<String>) -> Self {
        let completion = completion.into();
        Self::new(move |_| completion.clone())
    }

    pub fn delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// The first `n` generation requests fail with `status`.
    pub fn fail_first(mut self, n: usize, status: u16) -> Self {
        self.fail_first = n;
        self.fail_status = status;
        self
    }

    pub fn start(self) -> std::io::Result<MockHandle> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let shared = Arc::new(self);
        let (stop2, requests2) = (stop.clone(), requests.clone());
        let thread = thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (mock, requests) = (shared.clone(), requests2.clone());
                thread::spawn(move || {
                    let _ = mock.handle(stream, &requests);
                });
            }
        });
        Ok(MockHandle {
            addr,
            stop,
            requests,
            thread: Some(thread),
        })
    }

    fn handle(&self, mut stream: TcpStream, requests: &AtomicUsize) -> std::io::Result<()> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut request_line = String::new();
        reader.read_line(&mut request_line)?;
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.trim().eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;

        let (status, payload) = if request_line.starts_with("GET ") {
            (200, r#"{"status":"ok"}"#.to_string())
        } else {
            let n = requests.fetch_add(1, Ordering::SeqCst);
            if !self.delay.is_zero() {
                thread::sleep(self.delay);
            }
            if n < self.fail_first {
                (self.fail_status, r#"{"error":"injected failure"}"#.to_string())
            } else {
                let prompt = serde_json::from_slice::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v.get("prompt").and_then(|p| p.as_str()).map(str::to_string))
                    .unwrap_or_default();
                let text = (self.responder)(&prompt);
                (200, serde_json::json!({ "generated_text": text }).to_string())
            }
        };
        write!(
            stream,
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
            payload.len()
        )?;
        stream.flush()
    }
}

/// A running [`MockEndpoint`]; stops when dropped.
pub struct MockHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    thread: Option<thread::JoinHandle<()>>,
}

impl MockHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Generation requests received so far.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> EndpointConfig {
        let mut c = EndpointConfig::new(self.url());
        c.initial_backoff = Duration::from_millis(10);
        c
    }
}

impl Drop for MockHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
