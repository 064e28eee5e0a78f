use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    check_finetune, stage_descriptor, AdapterParams, Backend, BackendError, FinishReason, GenerationRequest,
    GenerationResult, ModelHandle,
};
use crate::characteristics::CharacteristicStore;
use crate::digest::prompt_hash;
use crate::error::Result;
use crate::prompting::{InstructionExample, Tokenizer, WhitespaceTokenizer};

/// Serves generations recorded in a characteristic store, keyed by prompt
/// hash. Used for offline and fixture-driven runs.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
    calls: AtomicUsize,
}

impl ReplayBackend {
    pub fn from_store(store: &CharacteristicStore) -> Self {
        let responses = store.records().into_iter().map(|r| (r.prompt_hash, r.text)).collect();
        Self {
            responses,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_store(&CharacteristicStore::load(path)?))
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses.insert(prompt_hash(prompt), response.into());
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn base_handle(&self) -> ModelHandle {
        ModelHandle::base("replay", "recorded")
    }

    fn generate(&self, _handle: &ModelHandle, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt_hash(&request.prompt);
        let text = self
            .responses
            .get(&hash)
            .ok_or(BackendError::NotRecorded(hash))?
            .clone();
        Ok(GenerationResult {
            token_count: WhitespaceTokenizer.count_tokens(&text),
            text,
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        })
    }

    fn finetune(
        &self,
        handle: &ModelHandle,
        dataset: &[InstructionExample],
        params: &AdapterParams,
    ) -> Result<ModelHandle, BackendError> {
        let stage = check_finetune(self.id(), handle, dataset)?;
        let descriptor = stage_descriptor(stage, dataset, params);
        let model_id = format!("{}+s{stage}", handle.model_id);
        Ok(handle.extended(model_id, descriptor))
    }
}
