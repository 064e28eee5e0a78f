//! JSON-over-HTTP completion service.
//!
//! * `POST {base}/generate` `{"model","prompt","max_new_tokens","temperature","stop","seed"}`
//!   → `{"text","finish_reason"}`
//! * `POST {base}/finetune` `{"base_model","dataset_url_or_inline","hyperparams"}` → `{"job_id"}`
//! * `GET {base}/jobs/{id}` → `{"status": "running"|"done"|"failed", "model"}`

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    check_finetune, stage_descriptor, AdapterParams, Backend, BackendError, FinishReason, GenerationRequest,
    GenerationResult, InFlight, ModelHandle,
};
use crate::prompting::{InstructionExample, Tokenizer, WhitespaceTokenizer};

pub const ENV_BASE_URL: &str = "ERCFORGE_BASE_URL";
pub const ENV_API_KEY: &str = "ERCFORGE_API_KEY";

/// Retries transport errors and 5xx responses with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub parallelism: usize,
    pub request_timeout: Duration,
    pub poll_interval: Duration,
    pub job_timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            retry: RetryPolicy::default(),
            parallelism: 4,
            request_timeout: Duration::from_secs(120),
            poll_interval: Duration::from_secs(10),
            job_timeout: Duration::from_secs(48 * 3600),
        }
    }

    /// Base URL and key from `ERCFORGE_BASE_URL` / `ERCFORGE_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        let base = std::env::var(ENV_BASE_URL).ok()?;
        let mut config = Self::new(base, model);
        config.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Some(config)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: Client,
    limiter: Limiter,
    in_flight: InFlight,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_new_tokens: usize,
    temperature: f64,
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct GenerateReply {
    text: String,
    finish_reason: String,
}

#[derive(Deserialize)]
struct JobReply {
    job_id: String,
}

#[derive(Deserialize)]
struct JobStatus {
    status: String,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.request_timeout)
            .connect_timeout(config.request_timeout.min(Duration::from_secs(10)))
            .build()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(Self {
            limiter: Limiter::new(config.parallelism),
            config,
            client,
            in_flight: InFlight::default(),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url, path.trim_start_matches('/'))
    }

    fn authorized(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.config.api_key {
            Some(key) => req.bearer_auth(key),
            None => req,
        }
    }

    /// Sends with retries; returns the first non-retryable response.
    fn send(&self, url: &str, build: impl Fn() -> RequestBuilder) -> Result<Response, BackendError> {
        let policy = self.config.retry;
        let attempts = policy.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.authorized(build()).send() {
                Ok(resp) if resp.status().is_server_error() => {
                    let status = resp.status().as_u16();
                    let body = resp.text().unwrap_or_default();
                    if attempt == attempts {
                        return Err(BackendError::Http { status, body });
                    }
                    log::warn!("{url}: http {status}, retrying ({attempt}/{attempts})");
                }
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    last = e.to_string();
                    log::warn!("{url}: {last}, retrying ({attempt}/{attempts})");
                }
            }
            if attempt < attempts {
                thread::sleep(policy.backoff(attempt));
            }
        }
        Err(BackendError::Unreachable {
            url: url.to_string(),
            attempts,
            message: last,
        })
    }

    fn json<T: for<'de> Deserialize<'de>>(resp: Response, model: &str) -> Result<T, BackendError> {
        let status = resp.status();
        if status.as_u16() == 404 {
            return Err(BackendError::ModelNotFound(model.to_string()));
        }
        if status.as_u16() == 413 {
            return Err(BackendError::BudgetExceeded(resp.text().unwrap_or_default()));
        }
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        resp.json::<T>().map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn base_handle(&self) -> ModelHandle {
        ModelHandle::base("remote", self.config.model.clone())
    }

    fn generate(&self, handle: &ModelHandle, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let url = self.url("generate");
        let stop = request.stop.clone().unwrap_or_default();
        let body = GenerateBody {
            model: &handle.model_id,
            prompt: &request.prompt,
            max_new_tokens: request.max_new_tokens,
            temperature: request.temperature,
            stop: &stop,
            seed: request.seed,
        };
        let resp = self.send(&url, || self.client.post(&url).json(&body))?;
        let reply: GenerateReply = Self::json(resp, &handle.model_id)?;
        let finish_reason = match reply.finish_reason.as_str() {
            "stop" => FinishReason::Stop,
            "length" => FinishReason::Length,
            "error" => FinishReason::Error,
            other => return Err(BackendError::Protocol(format!("unknown finish_reason `{other}`"))),
        };
        let token_count = if finish_reason == FinishReason::Length {
            request.max_new_tokens
        } else {
            WhitespaceTokenizer.count_tokens(&reply.text)
        };
        Ok(GenerationResult {
            text: reply.text,
            finish_reason,
            token_count,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn finetune(
        &self,
        handle: &ModelHandle,
        dataset: &[InstructionExample],
        params: &AdapterParams,
    ) -> Result<ModelHandle, BackendError> {
        let stage = check_finetune(self.id(), handle, dataset)?;
        let _guard = self.in_flight.acquire(&handle.model_id)?;
        let url = self.url("finetune");
        let body = json!({
            "base_model": handle.model_id,
            "dataset_url_or_inline": dataset,
            "hyperparams": params,
        });
        let resp = self.send(&url, || self.client.post(&url).json(&body))?;
        let job: JobReply = Self::json(resp, &handle.model_id)?;

        let deadline = Instant::now() + self.config.job_timeout;
        let status_url = self.url(&format!("jobs/{}", job.job_id));
        loop {
            let resp = self.send(&status_url, || self.client.get(&status_url))?;
            let status: JobStatus = Self::json(resp, &handle.model_id)?;
            match status.status.as_str() {
                "done" => {
                    let model = status
                        .model
                        .ok_or_else(|| BackendError::Protocol(format!("job {} done without model", job.job_id)))?;
                    return Ok(handle.extended(model, stage_descriptor(stage, dataset, params)));
                }
                "failed" => {
                    return Err(BackendError::JobFailed {
                        job_id: job.job_id,
                        message: status.error.unwrap_or_else(|| "failed".into()),
                    })
                }
                "running" | "queued" | "pending" => {}
                other => return Err(BackendError::Protocol(format!("unknown job status `{other}`"))),
            }
            if Instant::now() >= deadline {
                return Err(BackendError::JobFailed {
                    job_id: job.job_id,
                    message: "timed out waiting for job".into(),
                });
            }
            thread::sleep(self.config.poll_interval);
        }
    }
}
