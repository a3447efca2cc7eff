use std::time::Duration;

use serde_json::{json, Value};

use super::{Provider, ProviderError, ProviderErrorKind, ProviderReply, ProviderRequest};

/// Provider for any endpoint speaking the OpenAI chat-completions protocol.
pub struct OpenAiCompatible {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiCompatible {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn request_body(&self, request: &ProviderRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.render_user_prompt()},
            ],
            "response_format": {"type": "json_object"},
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn classify_status(status: u16) -> ProviderErrorKind {
    match status {
        401 | 403 => ProviderErrorKind::Auth,
        408 => ProviderErrorKind::Timeout,
        429 => ProviderErrorKind::RateLimited,
        500..=599 => ProviderErrorKind::Transient,
        _ => ProviderErrorKind::Fatal,
    }
}

impl Provider for OpenAiCompatible {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ProviderRequest) -> Result<ProviderReply, ProviderError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut call = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(self.request_body(request))
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => {
                    ProviderError::new(ProviderErrorKind::Timeout, e.to_string())
                }
                other => ProviderError::new(ProviderErrorKind::Network, other.to_string()),
            })?;
        let status = response.status().as_u16();
        let body: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::new(ProviderErrorKind::Transient, e.to_string()))?;
        if !(200..300).contains(&status) {
            let message = body
                .pointer("/error/message")
                .and_then(Value::as_str)
                .unwrap_or("request failed")
                .to_string();
            return Err(ProviderError::new(
                classify_status(status),
                format!("HTTP {status}: {message}"),
            ));
        }
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                ProviderError::new(ProviderErrorKind::Transient, "reply has no content")
            })?
            .to_string();
        let tokens = |field: &str| {
            body.pointer(&format!("/usage/{field}"))
                .and_then(Value::as_u64)
                .map(|n| n as u32)
        };
        Ok(ProviderReply {
            text,
            prompt_tokens: tokens("prompt_tokens"),
            completion_tokens: tokens("completion_tokens"),
        })
    }
}
