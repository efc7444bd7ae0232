//! Vision-language backends and the clock used for rate limiting.

use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabelError;

/// Env var holding the bearer token sent to the remote VLM.
pub const VLM_TOKEN_ENV: &str = "OBJFIND_VLM_TOKEN";

pub trait VlmBackend: Send + Sync {
    fn backend_id(&self) -> String;

    /// Describes the image at `image_ref` following `prompt`.
    fn describe(&self, image_ref: &str, prompt: &str) -> Result<String, LabelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmBackendConfig {
    pub kind: VlmKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Requests per minute.
    #[serde(default = "default_rate")]
    pub rate_limit: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl VlmBackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            kind: VlmKind::Mock,
            endpoint_url: None,
            rate_limit: 6000.0,
            max_retries: default_retries(),
            timeout_ms: default_timeout_ms(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if !(self.rate_limit > 0.0) || !self.rate_limit.is_finite() {
            return Err(LabelError::Config("rate_limit must be positive".into()));
        }
        if self.kind == VlmKind::Remote && self.endpoint_url.is_none() {
            return Err(LabelError::Config("remote VLM needs endpoint_url".into()));
        }
        Ok(())
    }

    /// Minimum spacing between request starts.
    pub fn interval(&self) -> Duration {
        Duration::from_secs_f64(60.0 / self.rate_limit)
    }
}

pub fn vlm_from_config(config: &VlmBackendConfig) -> Result<Box<dyn VlmBackend>, LabelError> {
    config.validate()?;
    match config.kind {
        VlmKind::Mock => Ok(Box::new(MockVlm::new(config.seed))),
        #[cfg(feature = "remote")]
        VlmKind::Remote => Ok(Box::new(super::remote::RemoteVlm::from_config(config)?)),
        #[cfg(not(feature = "remote"))]
        VlmKind::Remote => Err(LabelError::Config("remote backends need the `remote` feature".into())),
    }
}

/// Deterministic describer that assembles furniture-catalog sentences from
/// a hash of (seed, image_ref, prompt).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockVlm {
    seed: u64,
    /// Number of sentences produced; raise it to exercise the budget policy.
    pub sentences: usize,
}

const STYLES: &[&str] = &[
    "Nordic", "industrial", "mid-century", "minimalist", "Victorian", "ergonomic", "rustic", "modern",
    "art-deco", "Scandinavian", "Bauhaus", "futuristic",
];
const USES: &[&str] = &[
    "office work", "reading", "dining", "lounging", "gaming", "outdoor patios", "waiting rooms",
    "children", "bar counters", "studying",
];
const BACKS: &[&str] = &[
    "a tall curved backrest", "a low open backrest", "a slatted backrest", "a mesh backrest",
    "a high wingback", "no backrest", "a round padded backrest", "a ladder backrest",
];
const SEATS: &[&str] = &[
    "a wide square seat", "a round seat", "a deep cushioned seat", "a narrow saddle seat",
    "a thin flat seat", "a bucket seat",
];
const BASES: &[&str] = &[
    "four straight legs", "a five-star swivel base", "splayed tapered legs", "a sled base",
    "a cantilever frame", "a pedestal base", "crossed X legs", "three legs",
];
const ARMS: &[&str] = &[
    "no armrests", "padded armrests", "thin wire armrests", "armrests that flow into the back",
    "adjustable armrests",
];
const UNIQUE: &[&str] = &[
    "its height is adjustable", "the back tilts", "it stacks compactly", "it rocks on curved runners",
    "the seat folds", "its legs are unusually thick", "it has a built-in footrest",
    "the frame is a single continuous loop",
];

impl MockVlm {
    pub fn new(seed: u64) -> Self {
        Self { seed, sentences: 3 }
    }

    fn words(&self, image_ref: &str, prompt: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image_ref.as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        h.finalize().into()
    }
}

impl VlmBackend for MockVlm {
    fn backend_id(&self) -> String {
        format!("mock-vlm:{}", self.seed)
    }

    fn describe(&self, image_ref: &str, prompt: &str) -> Result<String, LabelError> {
        let h = self.words(image_ref, prompt);
        let pick = |i: usize, list: &[&'static str]| list[h[i % 32] as usize % list.len()];
        let pool = [
            format!("A {} chair for {}.", pick(0, STYLES), pick(1, USES)),
            format!("It has {}, {} and {}.", pick(2, BACKS), pick(3, SEATS), pick(4, BASES)),
            format!("It has {} and is unique because {}.", pick(5, ARMS), pick(6, UNIQUE)),
            format!("The proportions are {} with {}.", if h[7] % 2 == 0 { "slender" } else { "sturdy" }, pick(8, BASES)),
            format!("Designers would pair it with {} furniture.", pick(9, STYLES)),
        ];
        let n = self.sentences.max(1);
        Ok((0..n).map(|i| pool[i % pool.len()].as_str()).collect::<Vec<_>>().join(" "))
    }
}

pub trait Clock: Send + Sync {
    /// Time since the Unix epoch (or since an arbitrary origin for virtual clocks).
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock that only moves when slept on.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().expect("clock lock") += d;
    }
}

/// Spaces request starts at least `interval` apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Option<Duration>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        Self { interval, next: None }
    }

    pub fn acquire(&mut self, clock: &dyn Clock) {
        let now = clock.now();
        if let Some(next) = self.next {
            if next > now {
                clock.sleep(next - now);
            }
        }
        self.next = Some(clock.now() + self.interval);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic() {
        let m = MockVlm::new(4);
        assert_eq!(m.describe("a.png", "p").unwrap(), m.describe("a.png", "p").unwrap());
        assert_ne!(m.describe("a.png", "p").unwrap(), m.describe("b.png", "p").unwrap());
    }

    #[test]
    fn limiter_spaces_calls() {
        let clock = VirtualClock::new();
        let mut lim = RateLimiter::new(Duration::from_secs(1));
        for _ in 0..5 {
            lim.acquire(&clock);
        }
        assert_eq!(clock.now(), Duration::from_secs(4));
    }

    #[test]
    fn config_checks() {
        let mut c = VlmBackendConfig::mock(0);
        c.rate_limit = 0.0;
        assert!(c.validate().is_err());
        c.rate_limit = 60.0;
        assert_eq!(c.interval(), Duration::from_secs(1));
        c.kind = VlmKind::Remote;
        assert!(c.validate().is_err());
    }
}
