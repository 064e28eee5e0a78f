//! Model backends. Generation and fine-tuning are opaque capabilities behind
//! [`Backend`]; handles are values and every fine-tune returns a new one.

mod mock;
mod remote;
mod replay;
mod toy;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::digest::jsonl_digest;
use crate::prompting::{InstructionExample, Tokenizer, WhitespaceTokenizer};

pub use mock::MockBackend;
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy};
pub use replay::ReplayBackend;
pub use toy::{LossMask, ToyBackend, ToyConfig, ToyModel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unreachable: {url} after {attempts} attempt(s): {message}")]
    Unreachable {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("model not found: {0}")]
    ModelNotFound(String),
    #[error("no recorded response for prompt {0}")]
    NotRecorded(String),
    #[error("http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("handle `{0}` is already being fine-tuned")]
    Busy(String),
    #[error("fine-tune job {job_id} failed: {message}")]
    JobFailed { job_id: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    /// Greedy request.
    pub fn new(prompt: impl Into<String>, max_new_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            temperature: 0.0,
            stop: None,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_count: usize,
    pub latency_ms: u64,
}

/// Training hyperparameters handed to a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Default for AdapterParams {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            extra: BTreeMap::new(),
        }
    }
}

/// One applied training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDescriptor {
    pub stage: u8,
    /// e.g. `injection:oReact`, `speaker-id`, `recognition`.
    pub task: String,
    pub examples: usize,
    pub dataset_digest: String,
    pub params: AdapterParams,
}

impl fmt::Display for StageDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}({})", self.stage, self.task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub backend_id: String,
    pub model_id: String,
    pub stage_lineage: Vec<StageDescriptor>,
    #[serde(default)]
    pub adapter_params: BTreeMap<String, serde_json::Value>,
}

impl ModelHandle {
    pub fn base(backend_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            model_id: model_id.into(),
            stage_lineage: Vec::new(),
            adapter_params: BTreeMap::new(),
        }
    }

    /// Copy with one more stage in its lineage.
    pub fn extended(&self, model_id: String, stage: StageDescriptor) -> Self {
        let mut next = self.clone();
        next.model_id = model_id;
        next.adapter_params = serde_json::to_value(&stage.params)
            .ok()
            .and_then(|v| v.as_object().cloned())
            .map(|m| m.into_iter().collect())
            .unwrap_or_default();
        next.stage_lineage.push(stage);
        next
    }

    pub fn last_stage(&self) -> Option<u8> {
        self.stage_lineage.last().map(|s| s.stage)
    }

    /// `stage1(injection:oReact) -> stage2(recognition)`
    pub fn lineage_summary(&self) -> String {
        self.stage_lineage
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" -> ")
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn base_handle(&self) -> ModelHandle;

    fn generate(&self, handle: &ModelHandle, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    fn finetune(
        &self,
        handle: &ModelHandle,
        dataset: &[InstructionExample],
        params: &AdapterParams,
    ) -> Result<ModelHandle, BackendError>;

    fn tokenizer(&self) -> &dyn Tokenizer {
        &WhitespaceTokenizer
    }
}

/// Checks shared by every backend's `finetune`; returns the dataset stage.
pub(crate) fn check_finetune(
    backend_id: &str,
    handle: &ModelHandle,
    dataset: &[InstructionExample],
) -> Result<u8, BackendError> {
    if handle.backend_id != backend_id {
        return Err(BackendError::InvalidRequest(format!(
            "handle belongs to backend `{}`, not `{backend_id}`",
            handle.backend_id
        )));
    }
    let first = dataset
        .first()
        .ok_or_else(|| BackendError::InvalidRequest("empty dataset".into()))?;
    let stage = first.stage;
    if dataset.iter().any(|e| e.stage != stage) {
        return Err(BackendError::InvalidRequest(
            "dataset mixes examples from different stages".into(),
        ));
    }
    if dataset.iter().any(|e| e.target_text.trim().is_empty()) {
        return Err(BackendError::InvalidRequest("example with empty target".into()));
    }
    if handle.stage_lineage.iter().any(|s| s.stage > stage) {
        return Err(BackendError::InvalidRequest(format!(
            "stage {stage} cannot follow {}",
            handle.lineage_summary()
        )));
    }
    Ok(stage)
}

pub(crate) fn stage_descriptor(stage: u8, dataset: &[InstructionExample], params: &AdapterParams) -> StageDescriptor {
    let first = &dataset[0].meta;
    let task = match (first.task.as_str(), first.key_element) {
        ("injection", Some(e)) => format!("injection:{e}"),
        (task, _) => task.to_string(),
    };
    StageDescriptor {
        stage,
        task,
        examples: dataset.len(),
        dataset_digest: jsonl_digest(dataset),
        params: params.clone(),
    }
}

/// Model ids currently being fine-tuned; a second concurrent fine-tune of
/// the same handle is rejected.
#[derive(Debug, Default)]
pub(crate) struct InFlight(Mutex<HashSet<String>>);

pub(crate) struct InFlightGuard<'a> {
    set: &'a InFlight,
    id: String,
}

impl InFlight {
    pub(crate) fn acquire(&self, model_id: &str) -> Result<InFlightGuard<'_>, BackendError> {
        let mut set = self.0.lock().expect("in-flight set poisoned");
        if !set.insert(model_id.to_string()) {
            return Err(BackendError::Busy(model_id.to_string()));
        }
        Ok(InFlightGuard {
            set: self,
            id: model_id.to_string(),
        })
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        if let Ok(mut set) = self.set.0.lock() {
            set.remove(&self.id);
        }
    }
}

/// Cuts `text` at the first stop sequence, if any.
pub(crate) fn apply_stop(text: &str, stop: Option<&[String]>) -> (String, bool) {
    let cut = stop
        .unwrap_or_default()
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => (text[..i].to_string(), true),
        None => (text.to_string(), false),
    }
}
