//! Chat-completions client for OpenAI-compatible model servers.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backend::{BackendError, ChatBackend, Stage};
use crate::chat::{ChatMessage, ContentPart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            temperature: 0.1,
            top_p: 0.95,
            timeout_secs: 120,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.endpoint.is_empty() {
            return Err("endpoint is empty".into());
        }
        Ok(())
    }
}

/// JSON body sent for one completion request.
pub fn request_body(cfg: &BackendConfig, messages: &[ChatMessage]) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD;
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts()
                .iter()
                .map(|p| match p {
                    ContentPart::Text(t) => json!({ "type": "text", "text": t }),
                    ContentPart::Image(png) => json!({
                        "type": "image_url",
                        "image_url": { "url": format!("data:image/png;base64,{}", b64.encode(png)) }
                    }),
                })
                .collect();
            json!({ "role": m.role.as_str(), "content": content })
        })
        .collect();
    json!({
        "model": cfg.model,
        "messages": messages,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
    })
}

/// Text of the first choice. Content given as a list of parts is joined.
pub fn response_text(body: &Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::Protocol(format!("unexpected content {other}"))),
    }
}

pub struct HttpChatBackend {
    cfg: BackendConfig,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate().map_err(BackendError::Protocol)?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, _stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = request_body(&self.cfg, messages);
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        response_text(&value)
    }
}
