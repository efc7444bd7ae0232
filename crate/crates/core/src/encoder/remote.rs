use std::time::Duration;

use serde_json::{json, Value};

use super::{BaseImageEmbedding, BaseTextEmbedding, EncoderBackendConfig, Encoder, EncoderError, ENCODER_TOKEN_ENV};
use crate::http::{http_agent, image_payload, post_json};
use crate::retry::{Backoff, RetryError};


/// Inference endpoint speaking `POST {"inputs": ...}` → JSON float array.
///
/// Image inputs are sent as the URL when `image_ref` is http(s), otherwise
/// the file is read and sent base64-encoded.
pub struct RemoteEncoder {
    agent: ureq::Agent,
    text_url: String,
    image_url: String,
    token: Option<String>,
    backoff: Backoff,
}

impl RemoteEncoder {
    pub fn from_config(config: &EncoderBackendConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let text_url = config.endpoint_url.clone().expect("validated");
        let image_url = config.image_endpoint_url.clone().unwrap_or_else(|| text_url.clone());
        Ok(Self {
            agent: http_agent(Duration::from_millis(config.timeout_ms)),
            text_url,
            image_url,
            token: std::env::var(ENCODER_TOKEN_ENV).ok(),
            backoff: Backoff::new(config.max_retries),
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    fn post(&self, url: &str, inputs: Value) -> Result<Vec<f32>, EncoderError> {
        let body = json!({ "inputs": inputs });
        let result = self.backoff.run(
            || post_json(&self.agent, url, self.token.as_deref(), &body),
            std::thread::sleep,
        );
        let value = match result {
            Ok(v) => v,
            Err(RetryError::Fatal(message)) => return Err(EncoderError::Protocol(message)),
            Err(RetryError::Exhausted { attempts, last }) => {
                return Err(EncoderError::Backend { attempts, message: last })
            }
        };
        parse_vector(&value)
    }
}

fn parse_vector(value: &Value) -> Result<Vec<f32>, EncoderError> {
    let arr = match value {
        Value::Array(items) if items.len() == 1 && items[0].is_array() => items[0].as_array().expect("array"),
        Value::Array(items) => items,
        other => return Err(EncoderError::Protocol(format!("expected a float array, got {other}"))),
    };
    arr.iter()
        .map(|v| {
            v.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| EncoderError::Protocol(format!("non-numeric component {v}")))
        })
        .collect()
}

impl Encoder for RemoteEncoder {
    fn backend_id(&self) -> String {
        format!("remote:{}", self.text_url)
    }

    fn encode_text(&self, id: &str, text: &str) -> Result<BaseTextEmbedding, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let v = self.post(&self.text_url, Value::String(text.to_owned()))?;
        BaseTextEmbedding::new(id, v)
    }

    fn encode_image(&self, object_id: &str, image_ref: &str) -> Result<BaseImageEmbedding, EncoderError> {
        let payload = image_payload(image_ref).map_err(EncoderError::Protocol)?;
        let v = self.post(&self.image_url, payload)?;
        BaseImageEmbedding::new(object_id, v)
    }
}
