//! Chat-completion client used for LLM-assisted detokenization.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    Response(String),
    #[error("empty completion")]
    EmptyCompletion,
}

impl LlmError {
    /// Transport failures and server-side statuses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Anything that can turn a single user prompt into a completion.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub token: Option<String>,
    pub retries: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".to_owned(),
            model: "meta-llama/Llama-3.1-70B-Instruct".to_owned(),
            token: None,
            retries: 3,
            backoff_ms: 500,
            concurrency: 4,
            timeout_secs: 120,
        }
    }
}

impl LlmSettings {
    /// Overrides fields from `GECPREP_LLM_*` environment variables.
    pub fn apply_env(&mut self) {
        self.apply_vars(|k| std::env::var(k).ok());
    }

    pub fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("GECPREP_LLM_ENDPOINT") {
            self.endpoint = v;
        }
        if let Some(v) = get("GECPREP_LLM_MODEL") {
            self.model = v;
        }
        if let Some(v) = get("GECPREP_LLM_TOKEN") {
            self.token = Some(v);
        }
        if let Some(v) = get("GECPREP_LLM_RETRIES").and_then(|v| v.parse().ok()) {
            self.retries = v;
        }
        if let Some(v) = get("GECPREP_LLM_CONCURRENCY").and_then(|v| v.parse().ok()) {
            self.concurrency = v;
        }
    }
}

/// Builds the JSON body sent to the endpoint. Temperature is pinned to 0.
pub fn chat_request(model: &str, prompt: &str) -> Value {
    json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    })
}

/// Pulls the completion text out of a chat-completion response. Accepts the
/// `choices[0].message.content` shape and the older `choices[0].text`.
pub fn completion_text(body: &Value) -> Result<String, LlmError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Response("missing choices[0]".to_owned()))?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| LlmError::Response("missing message content".to_owned()))
}

pub struct HttpLlmClient {
    agent: ureq::Agent,
    settings: LlmSettings,
}

impl HttpLlmClient {
    pub fn new(settings: LlmSettings) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            settings,
        }
    }

    pub fn settings(&self) -> &LlmSettings {
        &self.settings
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let mut req = self.agent.post(&self.settings.endpoint);
        if let Some(token) = &self.settings.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(chat_request(&self.settings.model, prompt))
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(LlmError::Status { status, body });
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Response(e.to_string()))?;
        completion_text(&body)
    }
}

/// Offline client that answers the detokenization prompt with the
/// `Corrected text:` line it was given, unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoClient;

impl LlmClient for EchoClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        crate::detok::prompt_target(prompt)
            .map(str::to_owned)
            .ok_or_else(|| LlmError::Response("prompt has no corrected-text line".to_owned()))
    }
}

impl<F> LlmClient for F
where
    F: Fn(&str) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self(prompt)
    }
}
