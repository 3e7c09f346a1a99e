//! HTTP adapters for the OpenAI chat-completions and Anthropic messages
//! APIs. Credentials come from `OPENAI_API_KEY` / `ANTHROPIC_API_KEY`;
//! `OPENAI_BASE_URL` / `ANTHROPIC_BASE_URL` override the endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatBackend, Completion, CompletionRequest, LlmError, ProviderKind, Role};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(600);

fn client() -> Result<reqwest::blocking::Client, LlmError> {
    reqwest::blocking::Client::builder()
        .timeout(REQUEST_TIMEOUT)
        .build()
        .map_err(|e| LlmError::InvalidRequest(format!("http client: {e}")))
}

fn env_key(name: &str) -> Result<String, LlmError> {
    match std::env::var(name) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(LlmError::Auth(format!("{name} is not set"))),
    }
}

/// Maps an HTTP failure to an error class. Token-limit failures are never
/// transient.
pub fn classify_http_error(status: u16, body: &str) -> LlmError {
    let lower = body.to_ascii_lowercase();
    let overflow = lower.contains("context_length_exceeded")
        || lower.contains("maximum context length")
        || lower.contains("prompt is too long")
        || lower.contains("too many tokens");
    let snippet: String = body.chars().take(300).collect();
    match status {
        400 | 413 if overflow => LlmError::ContextOverflow {
            estimated: 0,
            window: 0,
        },
        401 | 403 => LlmError::Auth(snippet),
        402 => LlmError::Quota(snippet),
        429 if lower.contains("insufficient_quota") || lower.contains("credit balance") => LlmError::Quota(snippet),
        408 | 409 | 425 | 429 => LlmError::Transient(format!("HTTP {status}: {snippet}")),
        500..=599 => LlmError::Transient(format!("HTTP {status}: {snippet}")),
        _ => LlmError::InvalidRequest(format!("HTTP {status}: {snippet}")),
    }
}

fn send(request: reqwest::blocking::RequestBuilder) -> Result<Value, LlmError> {
    let response = request.send().map_err(|e| {
        if e.is_timeout() || e.is_connect() || e.is_request() {
            LlmError::Transient(e.to_string())
        } else {
            LlmError::Protocol(e.to_string())
        }
    })?;
    let status = response.status().as_u16();
    let body = response.text().map_err(|e| LlmError::Transient(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(classify_http_error(status, &body));
    }
    serde_json::from_str(&body).map_err(|e| LlmError::Protocol(format!("response is not JSON: {e}")))
}

fn token_count(v: &Value, path: &[&str]) -> Result<u64, LlmError> {
    let mut cur = v;
    for p in path {
        cur = cur
            .get(p)
            .ok_or_else(|| LlmError::Protocol(format!("missing {}", path.join("."))))?;
    }
    cur.as_u64()
        .ok_or_else(|| LlmError::Protocol(format!("{} is not a count", path.join("."))))
}

pub struct OpenAiBackend {
    api_key: String,
    base_url: String,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn from_env() -> Result<Self, LlmError> {
        Ok(OpenAiBackend {
            api_key: env_key("OPENAI_API_KEY")?,
            base_url: std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into()),
            client: client()?,
        })
    }

    pub fn request_body(request: &CompletionRequest<'_>) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::Human => "user",
                    Role::Ai => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        json!({
            "model": request.profile.model_name,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.profile.max_output_tokens,
        })
    }

    pub fn parse_response(v: &Value) -> Result<Completion, LlmError> {
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Protocol("missing choices[0].message.content".into()))?;
        Ok(Completion {
            content: content.to_string(),
            input_tokens: token_count(v, &["usage", "prompt_tokens"])?,
            output_tokens: token_count(v, &["usage", "completion_tokens"])?,
        })
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let v = send(
            self.client
                .post(url)
                .bearer_auth(&self.api_key)
                .json(&OpenAiBackend::request_body(request)),
        )?;
        OpenAiBackend::parse_response(&v)
    }
}

pub struct AnthropicBackend {
    api_key: String,
    base_url: String,
    client: reqwest::blocking::Client,
}

impl AnthropicBackend {
    pub fn from_env() -> Result<Self, LlmError> {
        Ok(AnthropicBackend {
            api_key: env_key("ANTHROPIC_API_KEY")?,
            base_url: std::env::var("ANTHROPIC_BASE_URL").unwrap_or_else(|_| "https://api.anthropic.com/v1".into()),
            client: client()?,
        })
    }

    pub fn request_body(request: &CompletionRequest<'_>) -> Value {
        let system: Vec<&str> = request
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect();
        let messages: Vec<Value> = request
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| {
                let role = if m.role == Role::Human { "user" } else { "assistant" };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        let mut body = json!({
            "model": request.profile.model_name,
            "messages": messages,
            "temperature": request.params.temperature.min(1.0),
            "max_tokens": request.profile.max_output_tokens,
        });
        if !system.is_empty() {
            body["system"] = Value::String(system.join("\n\n"));
        }
        body
    }

    pub fn parse_response(v: &Value) -> Result<Completion, LlmError> {
        let blocks = v
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::Protocol("missing content".into()))?;
        let content: String = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect();
        Ok(Completion {
            content,
            input_tokens: token_count(v, &["usage", "input_tokens"])?,
            output_tokens: token_count(v, &["usage", "output_tokens"])?,
        })
    }
}

impl ChatBackend for AnthropicBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<Completion, LlmError> {
        let url = format!("{}/messages", self.base_url.trim_end_matches('/'));
        let v = send(
            self.client
                .post(url)
                .header("x-api-key", &self.api_key)
                .header("anthropic-version", "2023-06-01")
                .json(&AnthropicBackend::request_body(request)),
        )?;
        AnthropicBackend::parse_response(&v)
    }
}

/// The backend for a provider, built from environment credentials.
pub fn backend_for(provider: ProviderKind) -> Result<Box<dyn ChatBackend>, LlmError> {
    Ok(match provider {
        ProviderKind::OpenAi => Box::new(OpenAiBackend::from_env()?),
        ProviderKind::Anthropic => Box::new(AnthropicBackend::from_env()?),
        ProviderKind::Mock => Box::new(super::mock::HeuristicBackend::new()),
    })
}
