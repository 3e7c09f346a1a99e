//! Provider-agnostic chat completion with usage and cost capture.
//!
//! A [`Gateway`] wraps a [`ChatBackend`] with a context-window check, a
//! per-provider rate limiter, bounded retries of transient failures and a
//! record/replay store keyed by [`replay_key`].

pub mod mock;
pub mod providers;
mod rate;
mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::money::Money;

pub use rate::{Clock, RateLimiter, SystemClock, VirtualClock};
pub use replay::{replay_key, ReplayRecord, ReplayStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Human,
    Ai,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::System => b's',
            Role::Human => b'h',
            Role::Ai => b'a',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn human(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Human,
            content: content.into(),
        }
    }

    pub fn ai(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Ai,
            content: content.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    OpenAi,
    Anthropic,
    Mock,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::OpenAi => "openai",
            ProviderKind::Anthropic => "anthropic",
            ProviderKind::Mock => "mock",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_name: String,
    pub provider: ProviderKind,
    /// Per 1k input tokens.
    pub input_price: Money,
    /// Per 1k output tokens.
    pub output_price: Money,
    pub context_window: u64,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u64,
}

fn default_max_output() -> u64 {
    4096
}

impl ModelProfile {
    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> Money {
        Money::cost(&[
            (input_tokens, self.input_price),
            (output_tokens, self.output_price),
        ])
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("pricing file: {0}")]
    Parse(String),
    #[error("model {0:?}: {1}")]
    Invalid(String, String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// Model profiles keyed by model name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PricingTable {
    profiles: BTreeMap<String, ModelProfile>,
}

#[derive(Deserialize)]
struct PricingFile {
    models: BTreeMap<String, PricingEntry>,
}

#[derive(Deserialize)]
struct PricingEntry {
    provider: ProviderKind,
    input_price: Money,
    output_price: Money,
    context_window: u64,
    #[serde(default = "default_max_output")]
    max_output_tokens: u64,
}

impl PricingTable {
    pub fn bundled() -> Self {
        PricingTable::from_toml(include_str!("../../data/pricing.toml")).expect("bundled pricing parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: PricingFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut profiles = BTreeMap::new();
        for (name, e) in file.models {
            if e.input_price < Money::ZERO || e.output_price < Money::ZERO {
                return Err(ConfigError::Invalid(name, "negative price".into()));
            }
            if e.context_window == 0 {
                return Err(ConfigError::Invalid(name, "context_window must be positive".into()));
            }
            if e.output_price < e.input_price {
                tracing::warn!(model = %name, "output price below input price");
            }
            profiles.insert(
                name.clone(),
                ModelProfile {
                    model_name: name,
                    provider: e.provider,
                    input_price: e.input_price,
                    output_price: e.output_price,
                    context_window: e.context_window,
                    max_output_tokens: e.max_output_tokens,
                },
            );
        }
        Ok(PricingTable { profiles })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        PricingTable::from_toml(&text)
    }

    pub fn get(&self, model_name: &str) -> Result<&ModelProfile, ConfigError> {
        self.profiles
            .get(model_name)
            .ok_or_else(|| ConfigError::UnknownModel(model_name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    /// Distinguishes repeated samples of the same request.
    pub run_index: u32,
}

impl CompletionParams {
    pub fn new(temperature: f64, run_index: u32) -> Result<Self, LlmError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        Ok(CompletionParams {
            temperature,
            run_index,
        })
    }

    pub fn deterministic() -> Self {
        CompletionParams {
            temperature: 0.0,
            run_index: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
    pub cost: Money,
}

impl UsageRecord {
    pub fn priced(profile: &ModelProfile, input_tokens: u64, output_tokens: u64, wall_time: Duration) -> Self {
        UsageRecord {
            input_tokens,
            output_tokens,
            wall_time,
            cost: profile.cost(input_tokens, output_tokens),
        }
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(u64::try_from(d.as_millis()).unwrap_or(u64::MAX))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// One gateway call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    /// What the call was for, e.g. `analysis` or `tot step 3 candidate 2`.
    pub purpose: String,
    pub request: Vec<ChatMessage>,
    pub response: ChatMessage,
    pub params: CompletionParams,
    pub usage: UsageRecord,
    pub key: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    steps: Vec<TranscriptStep>,
}

impl Transcript {
    pub fn new() -> Self {
        Transcript::default()
    }

    pub fn push(&mut self, step: TranscriptStep) {
        self.steps.push(step);
    }

    pub fn steps(&self) -> &[TranscriptStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_cost(&self) -> Money {
        self.steps.iter().map(|s| s.usage.cost).sum()
    }

    pub fn total_wall_time(&self) -> Duration {
        self.steps.iter().map(|s| s.usage.wall_time).sum()
    }

    pub fn total_tokens(&self) -> (u64, u64) {
        self.steps.iter().fold((0, 0), |(i, o), s| {
            (i + s.usage.input_tokens, o + s.usage.output_tokens)
        })
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("transcript serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("request of ~{estimated} tokens exceeds the {window}-token context window")]
    ContextOverflow { estimated: u64, window: u64 },
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("quota exhausted: {0}")]
    Quota(String),
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no recorded response for key {0}")]
    ReplayMiss(String),
    #[error("replay store: {0}")]
    Store(String),
    #[error("transient failure persisted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

impl LlmError {
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transient(_))
    }

    /// Errors that make further calls pointless (credentials, quota).
    pub fn is_terminal(&self) -> bool {
        matches!(self, LlmError::Auth(_) | LlmError::Quota(_))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CompletionRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub profile: &'a ModelProfile,
    pub params: CompletionParams,
}

/// What a provider returns: text plus billing-authoritative token counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&CompletionRequest<'_>) -> Result<Completion, LlmError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError> {
        self(request)
    }
}

/// A rough token estimate (four characters per token plus per-message
/// overhead) used only for the context-window pre-check.
pub fn estimate_tokens(messages: &[ChatMessage]) -> u64 {
    messages
        .iter()
        .map(|m| (m.content.chars().count() as u64).div_ceil(4) + 4)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Always call the backend; nothing is stored.
    Live,
    /// Serve recorded responses when present, otherwise call and record.
    Record,
    /// Serve recorded responses only; a miss is an error.
    Replay,
}

impl std::str::FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ReplayMode::Live),
            "record" => Ok(ReplayMode::Record),
            "replay" => Ok(ReplayMode::Replay),
            other => Err(format!("unknown replay mode {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(16),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    mode: ReplayMode,
    store: Option<ReplayStore>,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    backend_calls: AtomicU64,
}

impl Gateway {
    /// A live gateway with no store and no rate limit.
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            mode: ReplayMode::Live,
            store: None,
            limiter: None,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::new()),
            backend_calls: AtomicU64::new(0),
        }
    }

    /// Record or replay mode requires a store.
    pub fn with_store(mut self, mode: ReplayMode, store: ReplayStore) -> Self {
        self.mode = mode;
        self.store = Some(store);
        self
    }

    pub fn with_rate_limit(mut self, calls_per_second: u32) -> Self {
        self.limiter = Some(RateLimiter::new(calls_per_second));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    /// Calls that reached the backend (network operations for real
    /// providers).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn complete(
        &self,
        messages: &[ChatMessage],
        profile: &ModelProfile,
        params: CompletionParams,
    ) -> Result<(ChatMessage, UsageRecord), LlmError> {
        self.complete_step("completion", messages, profile, params)
            .map(|step| (step.response, step.usage))
    }

    pub fn complete_step(
        &self,
        purpose: &str,
        messages: &[ChatMessage],
        profile: &ModelProfile,
        params: CompletionParams,
    ) -> Result<TranscriptStep, LlmError> {
        validate_messages(messages)?;
        CompletionParams::new(params.temperature, params.run_index)?;
        let estimated = estimate_tokens(messages);
        if estimated > profile.context_window {
            return Err(LlmError::ContextOverflow {
                estimated,
                window: profile.context_window,
            });
        }
        let key = replay_key(messages, profile, params);

        let store = match (self.mode, &self.store) {
            (ReplayMode::Live, _) => None,
            (_, Some(store)) => Some(store),
            (_, None) => return Err(LlmError::Store("record/replay mode without a store".into())),
        };
        if let Some(store) = store {
            if let Some(record) = store.get(&key)? {
                return Ok(step_from_record(purpose, messages, params, key, &record, profile));
            }
            if self.mode == ReplayMode::Replay {
                return Err(LlmError::ReplayMiss(key));
            }
        }

        let request = CompletionRequest {
            messages,
            profile,
            params,
        };
        let (completion, wall_time) = self.call_with_retry(&request)?;
        let usage = UsageRecord::priced(profile, completion.input_tokens, completion.output_tokens, wall_time);
        if let Some(store) = store {
            store.put(&ReplayRecord {
                schema_version: replay::RECORD_SCHEMA_VERSION,
                key: key.clone(),
                model_name: profile.model_name.clone(),
                temperature: params.temperature,
                run_index: params.run_index,
                messages: messages.to_vec(),
                response: completion.content.clone(),
                input_tokens: completion.input_tokens,
                output_tokens: completion.output_tokens,
                wall_time_ms: u64::try_from(wall_time.as_millis()).unwrap_or(u64::MAX),
            })?;
        }
        Ok(TranscriptStep {
            purpose: purpose.to_string(),
            request: messages.to_vec(),
            response: ChatMessage::ai(completion.content),
            params,
            usage,
            key,
        })
    }

    fn call_with_retry(&self, request: &CompletionRequest<'_>) -> Result<(Completion, Duration), LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            let started = self.clock.now();
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            let result = self.backend.complete(request);
            let elapsed = self.clock.now().saturating_sub(started);
            // Stored records keep whole milliseconds; so does the live path.
            let elapsed = Duration::from_millis(u64::try_from(elapsed.as_millis()).unwrap_or(u64::MAX));
            match result {
                Ok(completion) => {
                    if completion.content.is_empty() {
                        return Err(LlmError::Protocol("empty completion".into()));
                    }
                    return Ok((completion, elapsed));
                }
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying");
                    self.clock.sleep(delay);
                }
                Err(LlmError::Transient(last)) => {
                    return Err(LlmError::RetriesExhausted { attempts: attempt, last })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn validate_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    if messages.is_empty() {
        return Err(LlmError::InvalidRequest("no messages".into()));
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::System && m.content.is_empty())
    {
        return Err(LlmError::InvalidRequest(format!("empty {:?} turn", m.role)));
    }
    Ok(())
}

fn step_from_record(
    purpose: &str,
    messages: &[ChatMessage],
    params: CompletionParams,
    key: String,
    record: &ReplayRecord,
    profile: &ModelProfile,
) -> TranscriptStep {
    TranscriptStep {
        purpose: purpose.to_string(),
        request: messages.to_vec(),
        response: ChatMessage::ai(record.response.clone()),
        params,
        usage: UsageRecord::priced(
            profile,
            record.input_tokens,
            record.output_tokens,
            Duration::from_millis(record.wall_time_ms),
        ),
        key,
    }
}
