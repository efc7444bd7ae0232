use serde_json::{json, Value};

use super::backend::{VlmBackend, VlmBackendConfig, VLM_TOKEN_ENV};
use super::LabelError;
use crate::http::{http_agent, image_payload, post_json};
use crate::retry::{Backoff, RetryError};

/// `POST {"prompt": ..., "image" | "image_url": ...}` → `{"text": ...}` or a
/// bare JSON string.
pub struct RemoteVlm {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    backoff: Backoff,
}

impl RemoteVlm {
    pub fn from_config(config: &VlmBackendConfig) -> Result<Self, LabelError> {
        config.validate()?;
        Ok(Self {
            agent: http_agent(std::time::Duration::from_millis(config.timeout_ms)),
            url: config.endpoint_url.clone().expect("validated"),
            token: std::env::var(VLM_TOKEN_ENV).ok(),
            backoff: Backoff::new(config.max_retries),
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }
}

impl VlmBackend for RemoteVlm {
    fn backend_id(&self) -> String {
        format!("remote-vlm:{}", self.url)
    }

    fn describe(&self, image_ref: &str, prompt: &str) -> Result<String, LabelError> {
        let image = image_payload(image_ref).map_err(LabelError::Backend)?;
        let key = if image_ref.starts_with("http") { "image_url" } else { "image" };
        let body = json!({ "prompt": prompt, key: image });
        let value = self
            .backoff
            .run(|| post_json(&self.agent, &self.url, self.token.as_deref(), &body), std::thread::sleep)
            .map_err(|e| match e {
                RetryError::Fatal(m) => LabelError::Backend(m),
                RetryError::Exhausted { attempts, last } => {
                    LabelError::Backend(format!("failed after {attempts} attempts: {last}"))
                }
            })?;
        match value {
            Value::String(s) => Ok(s),
            Value::Object(ref m) => m
                .get("text")
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| LabelError::Backend(format!("response has no text field: {value}"))),
            other => Err(LabelError::Backend(format!("unexpected response {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::tests::canned_server;
    use crate::labeler::VlmKind;
    use std::sync::atomic::Ordering;
    use std::time::Duration;

    fn config(url: String, retries: u32) -> VlmBackendConfig {
        VlmBackendConfig {
            kind: VlmKind::Remote,
            endpoint_url: Some(url),
            max_retries: retries,
            ..VlmBackendConfig::mock(0)
        }
    }

    fn fast(v: RemoteVlm, retries: u32) -> RemoteVlm {
        let mut b = Backoff::new(retries);
        b.base = Duration::from_millis(1);
        v.with_backoff(b)
    }

    #[test]
    fn reads_text_field() {
        let (url, _) = canned_server(vec![(200, r#"{"text":"A chair."}"#.into())]);
        let v = RemoteVlm::from_config(&config(url, 0)).unwrap();
        assert_eq!(v.describe("https://x/a.png", "p").unwrap(), "A chair.");
    }

    #[test]
    fn retries_until_exhausted() {
        let (url, hits) = canned_server(vec![(502, "{}".into())]);
        let v = fast(RemoteVlm::from_config(&config(url, 3)).unwrap(), 3);
        assert!(matches!(v.describe("https://x/a.png", "p"), Err(LabelError::Backend(_))));
        assert_eq!(hits.load(Ordering::SeqCst), 4);
    }
}
