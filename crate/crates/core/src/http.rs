//! Blocking JSON-over-HTTP helpers shared by the remote backends.

use std::time::Duration;

use base64::Engine as _;
use serde_json::Value;

use crate::retry::Attempt;

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// One POST; transport errors, 429 and 5xx are retryable.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    token: Option<&str>,
    body: &Value,
) -> Result<Value, Attempt<String>> {
    let mut req = agent.post(url);
    if let Some(t) = token {
        req = req.header("Authorization", format!("Bearer {t}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(Attempt::Retry(format!("HTTP {status}")));
    }
    if status >= 400 {
        return Err(Attempt::Fatal(format!("HTTP {status}")));
    }
    resp.body_mut()
        .read_json::<Value>()
        .map_err(|e| Attempt::Fatal(e.to_string()))
}

pub(crate) fn image_payload(image_ref: &str) -> Result<Value, String> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") {
        return Ok(Value::String(image_ref.to_owned()));
    }
    let bytes = std::fs::read(image_ref).map_err(|e| format!("{image_ref}: {e}"))?;
    Ok(Value::String(base64::engine::general_purpose::STANDARD.encode(bytes)))
}
