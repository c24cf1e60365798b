//! Blocking HTTP plumbing shared by the remote providers.

use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            attempts: 1,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds, sleeping with exponential backoff in
    /// between. The last failure is reported as a transport error.
    pub fn run<T>(&self, mut op: impl FnMut() -> std::result::Result<T, String>) -> Result<T> {
        let attempts = self.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::debug!("attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
            if attempt + 1 < attempts {
                std::thread::sleep(self.base_delay * 2u32.pow(attempt));
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

/// Counting semaphore bounding concurrent requests of one client.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut used = self.used.lock();
        while *used >= self.max {
            self.freed.wait(&mut used);
        }
        *used += 1;
        InFlightPermit { limit: self }
    }
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.limit.used.lock() -= 1;
        self.limit.freed.notify_one();
    }
}

pub(crate) fn client(timeout: Duration) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .expect("http client builds")
}

/// POSTs `body` as JSON to `url` and decodes the JSON answer.
pub(crate) fn post_json<B: serde::Serialize, R: serde::de::DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &B,
) -> std::result::Result<R, String> {
    let resp = client.post(url).json(body).send().map_err(|e| e.to_string())?;
    let status = resp.status();
    if !status.is_success() {
        return Err(format!("{url} answered {status}"));
    }
    resp.json::<R>().map_err(|e| format!("{url}: bad response body: {e}"))
}
