use std::io::Read;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ErrorBody, Request, Response, Role};
use crate::canonical;

/// Where and how to reach one role's model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub role: Role,
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Identifier recorded in stage traces; defaults to the endpoint URL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_id: Option<String>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_max_in_flight() -> usize {
    8
}

impl BackendEndpoint {
    pub fn new(role: Role, base_url: impl Into<String>) -> Self {
        BackendEndpoint {
            role,
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
            backend_id: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::InvalidRequest(format!(
                "{} endpoint timeout must be > 0",
                self.role
            )));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::InvalidRequest(format!(
                "{} endpoint max_in_flight must be >= 1",
                self.role
            )));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(BackendError::InvalidRequest(format!(
                "{} endpoint base_url {:?} is not an http(s) URL",
                self.role, self.base_url
            )));
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            base: Duration::from_millis(self.backoff_base_ms),
            factor: 2.0,
            jitter: 0.5,
            max_retries: self.max_retries,
        }
    }
}

/// Exponential backoff: attempt `k` (0-based) waits `base * factor^k`,
/// stretched by a random jitter fraction in `[0, jitter)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
    pub max_retries: u32,
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let stretch = if self.jitter > 0.0 {
            1.0 + rng.gen_range(0.0..self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64(nominal * stretch)
    }
}

struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for one role's HTTP endpoint.
pub struct HttpBackend {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
    in_flight: InFlight,
    attempts: AtomicU64,
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        endpoint.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(endpoint.timeout())
            .build();
        Ok(HttpBackend {
            in_flight: InFlight {
                limit: endpoint.max_in_flight,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            endpoint,
            agent,
            attempts: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    /// Total HTTP attempts made so far, retries included.
    pub fn attempts_made(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.base_url.trim_end_matches('/'), path)
    }

    fn with_retries<T>(
        &self,
        what: &str,
        mut attempt: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let policy = self.endpoint.retry_policy();
        let mut rng = rand::thread_rng();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match attempt() {
                Ok(v) => {
                    tracing::debug!(role = %self.endpoint.role, what, attempts, "backend call succeeded");
                    return Ok(v);
                }
                Err(e) if e.is_retryable() && attempts <= policy.max_retries => {
                    let wait = policy.delay(attempts - 1, &mut rng);
                    tracing::warn!(role = %self.endpoint.role, what, attempts, error = %e, ?wait, "retrying backend call");
                    std::thread::sleep(wait);
                }
                Err(e) if e.is_retryable() => {
                    tracing::error!(role = %self.endpoint.role, what, attempts, error = %e, "backend retries exhausted");
                    return Err(BackendError::Exhausted {
                        role: self.endpoint.role,
                        attempts,
                        last: Box::new(e),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn map_error(&self, err: ureq::Error) -> BackendError {
        let role = self.endpoint.role;
        match err {
            ureq::Error::Status(status, response) => {
                let body = response.into_string().unwrap_or_default();
                match serde_json::from_str::<ErrorBody>(&body) {
                    Ok(e) => BackendError::Remote {
                        role,
                        status,
                        code: e.error.code,
                        retryable: e.error.retryable,
                        message: e.error.message,
                    },
                    Err(_) => BackendError::Remote {
                        role,
                        status,
                        code: format!("http_{status}"),
                        retryable: status == 429 || status >= 500,
                        message: body,
                    },
                }
            }
            ureq::Error::Transport(t) => {
                let message = t.to_string();
                if message.contains("timed out") {
                    BackendError::Timeout(self.endpoint.timeout())
                } else {
                    BackendError::Transport(message)
                }
            }
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self, role: Role) -> String {
        match &self.endpoint.backend_id {
            Some(id) => id.clone(),
            None => format!("http:{}", self.url(role.as_str())),
        }
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let role = request.role();
        if role != self.endpoint.role {
            return Err(BackendError::Unsupported(role));
        }
        request.validate()?;
        let body = request.body();
        let url = self.url(role.as_str());
        let _permit = self.in_flight.acquire();
        self.with_retries(role.as_str(), || {
            let text = self
                .agent
                .post(&url)
                .set("Content-Type", "application/json")
                .send_string(&body)
                .map_err(|e| self.map_error(e))?
                .into_string()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let response = Response::parse(role, &text)?;
            response.check_answers(request)?;
            Ok(response)
        })
    }

    fn fetch_blob(&self, hash: &str) -> Result<Vec<u8>, BackendError> {
        let url = self.url(&format!("blob/{hash}"));
        let _permit = self.in_flight.acquire();
        let bytes = self.with_retries("blob", || {
            let mut bytes = Vec::new();
            self.agent
                .get(&url)
                .call()
                .map_err(|e| self.map_error(e))?
                .into_reader()
                .read_to_end(&mut bytes)
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            Ok(bytes)
        })?;
        let actual = canonical::sha256_hex(&bytes);
        if actual != hash {
            return Err(BackendError::BlobCorrupt {
                expected: hash.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backoff_doubles_within_jitter() {
        let policy = RetryPolicy {
            base: Duration::from_millis(250),
            factor: 2.0,
            jitter: 0.5,
            max_retries: 3,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for retry in 0..4 {
            let d = policy.delay(retry, &mut rng).as_secs_f64();
            let nominal = 0.25 * 2f64.powi(retry as i32);
            assert!(d >= nominal && d < nominal * 1.5, "{retry}: {d}");
        }
    }

    #[test]
    fn endpoint_validation() {
        let mut ep = BackendEndpoint::new(Role::Detect, "http://localhost:9");
        assert!(ep.validate().is_ok());
        ep.timeout_ms = 0;
        assert!(ep.validate().is_err());
        let ep = BackendEndpoint::new(Role::Detect, "ftp://x");
        assert!(HttpBackend::new(ep).is_err());
        let ep: BackendEndpoint =
            serde_json::from_str(r#"{"role":"embed","base_url":"http://h"}"#).unwrap();
        assert_eq!(
            (ep.timeout_ms, ep.max_retries, ep.max_in_flight),
            (60_000, 3, 8)
        );
    }

    #[test]
    fn wrong_role_is_unsupported() {
        let backend =
            HttpBackend::new(BackendEndpoint::new(Role::Detect, "http://127.0.0.1:9")).unwrap();
        let req = Request::Embed(super::super::EmbedRequest {
            texts: vec!["x".into()],
        });
        assert!(matches!(
            backend.call(&req),
            Err(BackendError::Unsupported(Role::Embed))
        ));
    }
}
