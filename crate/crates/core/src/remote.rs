//! Minimal JSON-over-HTTP client shared by the remote policy and embedder.
//!
//! Requests time out after [`RemoteEndpoint::timeout`] and are retried on
//! transport errors, HTTP 429 and 5xx with exponential backoff starting at
//! 500 ms. Other statuses fail immediately.

use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

pub const ENV_API_URL: &str = "FLOWLENS_API_URL";
pub const ENV_API_KEY: &str = "FLOWLENS_API_KEY";
pub const ENV_MODEL: &str = "FLOWLENS_MODEL";
pub const ENV_EMBED_URL: &str = "FLOWLENS_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "FLOWLENS_EMBED_MODEL";

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("remote backend not configured: {0}")]
    Config(String),
    #[error("transport failure contacting {url} after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("{url} answered HTTP {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("malformed response from {url}: {message}")]
    Malformed { url: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEndpoint {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(60),
            retries: 2,
        }
    }

    /// Endpoint from `url_var`/`model_var`, with the key from
    /// [`ENV_API_KEY`]. An explicit `url` wins over the environment.
    pub fn from_env(url: Option<&str>, url_var: &str, model_var: &str) -> Result<Self, RemoteError> {
        let url = match url {
            Some(u) if !u.is_empty() => u.to_string(),
            _ => std::env::var(url_var)
                .map_err(|_| RemoteError::Config(format!("set {url_var} or pass an explicit URL")))?,
        };
        let model = std::env::var(model_var).unwrap_or_else(|_| "default".to_string());
        let mut ep = Self::new(url, model);
        ep.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(ep)
    }

    pub fn post_json(&self, body: &Value) -> Result<Value, RemoteError> {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = agent.post(&self.url).header("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            let retryable = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp.body_mut().read_json::<Value>().map_err(|e| {
                            RemoteError::Malformed {
                                url: self.url.clone(),
                                message: e.to_string(),
                            }
                        });
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let err = RemoteError::Status {
                        url: self.url.clone(),
                        status,
                        body: text.chars().take(500).collect(),
                    };
                    if status == 429 || status >= 500 {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => RemoteError::Transport {
                    url: self.url.clone(),
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt > self.retries {
                return Err(retryable);
            }
            std::thread::sleep(Duration::from_millis(500 << (attempt - 1)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_endpoint_reports_transport_failure() {
        let mut ep = RemoteEndpoint::new("http://127.0.0.1:9/v1/chat", "m");
        ep.retries = 0;
        ep.timeout = Duration::from_secs(2);
        match ep.post_json(&serde_json::json!({})) {
            Err(RemoteError::Transport { attempts, url, .. }) => {
                assert_eq!(attempts, 1);
                assert!(url.contains("127.0.0.1:9"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_url_overrides_environment() {
        let ep = RemoteEndpoint::from_env(Some("http://example.invalid"), "FLOWLENS_TEST_UNSET_URL", "FLOWLENS_TEST_UNSET_MODEL").unwrap();
        assert_eq!(ep.url, "http://example.invalid");
        assert_eq!(ep.model, "default");
        assert!(RemoteEndpoint::from_env(None, "FLOWLENS_TEST_UNSET_URL", "X").is_err());
    }
}
