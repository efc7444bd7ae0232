//! Exponential backoff shared by the remote backends.

use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    pub max_retries: u32,
}

impl Backoff {
    pub fn new(max_retries: u32) -> Self {
        Self {
            base: Duration::from_millis(200),
            factor: 2,
            max_retries,
        }
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base * self.factor.saturating_pow(attempt)
    }

    /// Runs `op` once plus up to `max_retries` more times while it returns a
    /// retryable error. `sleep` is injected so tests can observe the delays.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut() -> Result<T, Attempt<E>>,
        mut sleep: impl FnMut(Duration),
    ) -> Result<T, RetryError<E>> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(RetryError::Fatal(e)),
                Err(Attempt::Retry(e)) => {
                    if attempt >= self.max_retries {
                        return Err(RetryError::Exhausted {
                            attempts: attempt + 1,
                            last: e,
                        });
                    }
                    sleep(self.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

/// Outcome of a single attempt.
#[derive(Debug)]
pub enum Attempt<E> {
    Retry(E),
    Fatal(E),
}

#[derive(Debug)]
pub enum RetryError<E> {
    Fatal(E),
    Exhausted { attempts: u32, last: E },
}
