//! Chat moderation connector: read a message, mask it, repost or flag.
//!
//! Events are handled in order within a channel and concurrently across
//! channels. Message text and entity values are never logged.

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use clap::ValueEnum;
use piimask::detectors::{DetectError, Detector};
use piimask::apply_detector_as_masker;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatEvent {
    pub channel_id: String,
    pub author_id: String,
    pub message_id: String,
    pub text: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum GatewayAction {
    /// Post the masked text on behalf of the original author.
    Repost {
        channel_id: String,
        author_id: String,
        reply_to: String,
        text: String,
    },
    Delete {
        channel_id: String,
        message_id: String,
    },
    Flag {
        channel_id: String,
        message_id: String,
        reason: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway disconnected: {0}")]
    Disconnected(String),
    #[error("gateway rejected request: {0}")]
    Rejected(String),
}

pub trait Gateway {
    /// Next batch of events; `None` once the stream has ended.
    fn poll(&mut self) -> Result<Option<Vec<ChatEvent>>, GatewayError>;
    fn act(&mut self, action: &GatewayAction) -> Result<(), GatewayError>;
    fn reconnect(&mut self) -> Result<(), GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
pub enum ModerationPolicy {
    /// Repost the masked text; leave the original alone.
    #[default]
    Repost,
    /// Repost and delete the original.
    RepostDelete,
    /// Repost and flag the original for moderators.
    RepostFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
pub enum FailurePolicy {
    /// Leave the message untouched.
    #[default]
    Skip,
    /// Flag the message as unchecked.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BotConfig {
    pub policy: ModerationPolicy,
    pub on_backend_failure: FailurePolicy,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Consecutive failed reconnects before giving up.
    pub max_reconnects: u32,
    pub poll_interval: Duration,
}

impl Default for BotConfig {
    fn default() -> Self {
        Self {
            policy: ModerationPolicy::Repost,
            on_backend_failure: FailurePolicy::Skip,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
            max_reconnects: 10,
            poll_interval: Duration::from_millis(500),
        }
    }
}

/// Operational counters; anonymized, safe to export.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BotStats {
    pub processed: usize,
    pub reposted: usize,
    pub deleted: usize,
    pub flagged: usize,
    pub skipped: usize,
    pub backend_failures: usize,
    pub reconnects: usize,
    pub entities_by_label: BTreeMap<String, usize>,
}

/// What one message turned into.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Handled {
    pub actions: Vec<GatewayAction>,
    pub labels: Vec<String>,
    pub backend_failed: bool,
}

pub fn handle_event(event: &ChatEvent, backend: &dyn Detector, config: &BotConfig) -> Handled {
    if event.text.trim().is_empty() {
        return Handled::default();
    }
    let started = Instant::now();
    match apply_detector_as_masker(&event.text, backend) {
        Ok(outcome) => {
            let latency = started.elapsed().as_secs_f64();
            let spans: Vec<String> = outcome
                .entities
                .iter()
                .map(|e| format!("{}[{},{})", e.label.as_str(), e.span.start(), e.span.end()))
                .collect();
            tracing::info!(
                message_id = %event.message_id,
                entities = outcome.entities.len(),
                spans = ?spans,
                latency_seconds = latency,
                "message checked"
            );
            if outcome.entities.is_empty() {
                return Handled::default();
            }
            let mut actions = vec![GatewayAction::Repost {
                channel_id: event.channel_id.clone(),
                author_id: event.author_id.clone(),
                reply_to: event.message_id.clone(),
                text: outcome.masked.into_string(),
            }];
            match config.policy {
                ModerationPolicy::Repost => {}
                ModerationPolicy::RepostDelete => actions.push(GatewayAction::Delete {
                    channel_id: event.channel_id.clone(),
                    message_id: event.message_id.clone(),
                }),
                ModerationPolicy::RepostFlag => actions.push(GatewayAction::Flag {
                    channel_id: event.channel_id.clone(),
                    message_id: event.message_id.clone(),
                    reason: "contains personal information".into(),
                }),
            }
            Handled {
                actions,
                labels: outcome.entities.iter().map(|e| e.label.as_str().to_string()).collect(),
                backend_failed: false,
            }
        }
        Err(e) => {
            let timed_out = matches!(e, DetectError::Timeout { .. });
            let actions = match config.on_backend_failure {
                FailurePolicy::Skip => {
                    tracing::warn!(message_id = %event.message_id, timed_out, "masking backend failed, message skipped");
                    Vec::new()
                }
                FailurePolicy::Block => {
                    tracing::error!(message_id = %event.message_id, timed_out, "masking backend failed, message flagged");
                    vec![GatewayAction::Flag {
                        channel_id: event.channel_id.clone(),
                        message_id: event.message_id.clone(),
                        reason: "masking backend unavailable; message not checked".into(),
                    }]
                }
            };
            Handled {
                actions,
                labels: Vec::new(),
                backend_failed: true,
            }
        }
    }
}

/// Handles a batch: per-channel order is kept, channels run in parallel.
/// Actions come back grouped by channel in first-seen channel order.
pub fn handle_batch(events: &[ChatEvent], backend: &dyn Detector, config: &BotConfig) -> Vec<Handled> {
    let mut channels: Vec<(&str, Vec<&ChatEvent>)> = Vec::new();
    for e in events {
        match channels.iter_mut().find(|(c, _)| *c == e.channel_id) {
            Some((_, v)) => v.push(e),
            None => channels.push((&e.channel_id, vec![e])),
        }
    }
    std::thread::scope(|scope| {
        let workers: Vec<_> = channels
            .iter()
            .map(|(_, evs)| scope.spawn(move || evs.iter().map(|e| handle_event(e, backend, config)).collect::<Vec<_>>()))
            .collect();
        workers
            .into_iter()
            .flat_map(|w| w.join().expect("channel worker panicked"))
            .collect()
    })
}

fn record(stats: &mut BotStats, h: &Handled) {
    stats.processed += 1;
    if h.backend_failed {
        stats.backend_failures += 1;
    }
    if h.actions.is_empty() {
        stats.skipped += 1;
    }
    for a in &h.actions {
        match a {
            GatewayAction::Repost { .. } => stats.reposted += 1,
            GatewayAction::Delete { .. } => stats.deleted += 1,
            GatewayAction::Flag { .. } => stats.flagged += 1,
        }
    }
    for l in &h.labels {
        *stats.entities_by_label.entry(l.clone()).or_default() += 1;
    }
}

/// Runs until the gateway stream ends or reconnection gives up.
pub fn run_bot(gateway: &mut dyn Gateway, backend: &dyn Detector, config: &BotConfig) -> Result<BotStats, GatewayError> {
    let mut stats = BotStats::default();
    let mut backoff = config.initial_backoff;
    let mut failures = 0;
    loop {
        let batch = match gateway.poll() {
            Ok(Some(b)) => b,
            Ok(None) => return Ok(stats),
            Err(e) => {
                failures += 1;
                if failures > config.max_reconnects {
                    return Err(e);
                }
                tracing::warn!(attempt = failures, backoff_ms = backoff.as_millis() as u64, "gateway error, reconnecting: {e}");
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(config.max_backoff);
                stats.reconnects += 1;
                if let Err(e) = gateway.reconnect() {
                    tracing::warn!("reconnect failed: {e}");
                }
                continue;
            }
        };
        failures = 0;
        backoff = config.initial_backoff;
        if batch.is_empty() {
            std::thread::sleep(config.poll_interval);
            continue;
        }
        for handled in handle_batch(&batch, backend, config) {
            record(&mut stats, &handled);
            for action in &handled.actions {
                gateway.act(action)?;
            }
        }
    }
}

/// Scripted gateway for tests and demos.
#[derive(Debug, Default)]
pub struct InMemoryGateway {
    pub script: VecDeque<Result<Vec<ChatEvent>, String>>,
    pub actions: Vec<GatewayAction>,
    pub reconnects: usize,
}

impl InMemoryGateway {
    pub fn new(batches: Vec<Vec<ChatEvent>>) -> Self {
        Self {
            script: batches.into_iter().map(Ok).collect(),
            ..Default::default()
        }
    }

    /// Makes the next poll fail as if the connection dropped.
    pub fn push_disconnect(&mut self, reason: &str) {
        self.script.push_back(Err(reason.to_string()));
    }
}

impl Gateway for InMemoryGateway {
    fn poll(&mut self) -> Result<Option<Vec<ChatEvent>>, GatewayError> {
        match self.script.pop_front() {
            None => Ok(None),
            Some(Ok(b)) => Ok(Some(b)),
            Some(Err(reason)) => Err(GatewayError::Disconnected(reason)),
        }
    }

    fn act(&mut self, action: &GatewayAction) -> Result<(), GatewayError> {
        self.actions.push(action.clone());
        Ok(())
    }

    fn reconnect(&mut self) -> Result<(), GatewayError> {
        self.reconnects += 1;
        Ok(())
    }
}

/// Adapter for a gateway bridge speaking plain HTTP:
/// `GET {base}/events?after={cursor}` returns a list of events (`410 Gone`
/// once the stream is closed) and `POST {base}/actions` accepts one action.
/// The bearer token is read from an environment variable and never logged.
pub struct HttpGateway {
    base_url: String,
    token: String,
    http: reqwest::blocking::Client,
    cursor: Option<String>,
}

impl HttpGateway {
    pub fn new(base_url: &str, token_env: &str, timeout: Duration) -> anyhow::Result<Self> {
        let token = std::env::var(token_env).map_err(|_| anyhow::anyhow!("gateway token variable {token_env} is not set"))?;
        let http = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            token,
            http,
            cursor: None,
        })
    }
}

impl Gateway for HttpGateway {
    fn poll(&mut self) -> Result<Option<Vec<ChatEvent>>, GatewayError> {
        let mut req = self.http.get(format!("{}/events", self.base_url)).bearer_auth(&self.token);
        if let Some(c) = &self.cursor {
            req = req.query(&[("after", c)]);
        }
        let resp = req.send().map_err(|e| GatewayError::Disconnected(e.to_string()))?;
        if resp.status() == reqwest::StatusCode::GONE {
            return Ok(None);
        }
        if !resp.status().is_success() {
            return Err(GatewayError::Disconnected(format!("status {}", resp.status())));
        }
        let events: Vec<ChatEvent> = resp.json().map_err(|e| GatewayError::Rejected(e.to_string()))?;
        if let Some(last) = events.last() {
            self.cursor = Some(last.message_id.clone());
        }
        Ok(Some(events))
    }

    fn act(&mut self, action: &GatewayAction) -> Result<(), GatewayError> {
        let resp = self
            .http
            .post(format!("{}/actions", self.base_url))
            .bearer_auth(&self.token)
            .json(action)
            .send()
            .map_err(|e| GatewayError::Disconnected(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(GatewayError::Rejected(format!("status {}", resp.status())))
        }
    }

    fn reconnect(&mut self) -> Result<(), GatewayError> {
        Ok(())
    }
}
