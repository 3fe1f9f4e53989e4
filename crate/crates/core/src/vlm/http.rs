use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{VlmBackend, VlmRequest};
use crate::error::{Error, Result};
use crate::image_ops::encode_png;

/// Environment variable holding the backend URL.
pub const VLM_URL_ENV: &str = "EXEDIT_VLM_URL";

#[derive(Serialize)]
struct WireRequest<'a> {
    image: String,
    prompt: &'a str,
    max_new_tokens: usize,
    temperature: f32,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Remote VLM over a small JSON protocol: `POST {image: base64 PNG, prompt,
/// max_new_tokens, temperature}` answered by `{text}`.
pub struct HttpVlm {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpVlm {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let url = url.into();
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(Error::Config(format!("VLM URL must be http(s): {url}")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { url, client })
    }

    /// Uses the URL from [`VLM_URL_ENV`].
    pub fn from_env(timeout: Duration) -> Result<Self> {
        let url = std::env::var(VLM_URL_ENV)
            .map_err(|_| Error::Config(format!("{VLM_URL_ENV} is not set")))?;
        Self::new(url, timeout)
    }
}

impl VlmBackend for HttpVlm {
    fn id(&self) -> String {
        format!("http:{}", self.url)
    }

    fn generate(&self, request: &VlmRequest) -> Result<String> {
        let png = encode_png(&request.image)?;
        let body = WireRequest {
            image: base64::engine::general_purpose::STANDARD.encode(png),
            prompt: &request.prompt,
            max_new_tokens: request.max_new_tokens(),
            temperature: request.temperature,
        };
        let response = self.client.post(&self.url).json(&body).send().map_err(|e| Error::Transport {
            message: format!("VLM request to {} failed: {e}", self.url),
            retryable: e.is_timeout() || e.is_connect(),
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(Error::Transport {
                message: format!("VLM backend answered {status}"),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let reply: WireResponse = response.json().map_err(|e| Error::Transport {
            message: format!("malformed VLM response: {e}"),
            retryable: false,
        })?;
        Ok(reply.text)
    }
}
