//! Backend for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::image_fit::{fit_image, MAX_IMAGE_BYTES};
use super::{BackendError, ChatBackend, CompletionRequest, EndpointConfig, GatewayConfig, GatewayError};
use crate::model::ArtifactStore;
use crate::operators::Segment;

pub struct OpenAiCompatBackend {
    name: String,
    url: String,
    model: String,
    api_key: String,
    supports_images: bool,
    client: reqwest::blocking::Client,
    store: ArtifactStore,
}

impl std::fmt::Debug for OpenAiCompatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompatBackend")
            .field("name", &self.name)
            .field("url", &self.url)
            .finish_non_exhaustive()
    }
}

impl OpenAiCompatBackend {
    /// Reads the API key from the environment variable named in `endpoint`.
    pub fn from_config(
        endpoint: &EndpointConfig,
        gateway: &GatewayConfig,
        store: ArtifactStore,
    ) -> Result<Self, GatewayError> {
        if endpoint.base_url.is_empty() || endpoint.model_name.is_empty() {
            return Err(GatewayError::Config(
                "endpoint needs base_url and model_name".into(),
            ));
        }
        if endpoint.api_key_env_var.is_empty() {
            return Err(GatewayError::Config(format!(
                "endpoint {} has no api_key_env_var",
                endpoint.model_name
            )));
        }
        let api_key = std::env::var(&endpoint.api_key_env_var)
            .map_err(|_| GatewayError::MissingApiKey(endpoint.api_key_env_var.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(gateway.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(OpenAiCompatBackend {
            name: endpoint.model_name.clone(),
            url: format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/')),
            model: endpoint.model_name.clone(),
            api_key,
            supports_images: endpoint.supports_images,
            client,
            store,
        })
    }

    fn content(&self, request: &CompletionRequest<'_>) -> Result<Value, BackendError> {
        if !request.bundle.has_images() {
            return Ok(Value::String(request.bundle.text()));
        }
        let mut parts = Vec::new();
        for seg in &request.bundle.segments {
            match seg {
                Segment::Text(t) => parts.push(json!({"type": "text", "text": t})),
                Segment::Image(r) => {
                    let bytes = self
                        .store
                        .get(&r.content_ref)
                        .map_err(|e| BackendError::Rejected(e.to_string()))?;
                    let bytes = fit_image(&bytes, MAX_IMAGE_BYTES)
                        .map_err(|e| BackendError::Rejected(format!("image {}: {e}", r.content_ref)))?;
                    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{};base64,{data}", r.media_type.mime())}
                    }));
                }
            }
        }
        Ok(Value::Array(parts))
    }
}

impl ChatBackend for OpenAiCompatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports_images(&self) -> bool {
        self.supports_images
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": self.content(request)?}],
        });
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            let excerpt: String = text.chars().take(300).collect();
            return Err(BackendError::Rejected(format!("HTTP {status}: {excerpt}")));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("malformed response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("response has no message content".into()))
    }
}
