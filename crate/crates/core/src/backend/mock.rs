use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{
    apply_stop, check_finetune, stage_descriptor, AdapterParams, Backend, BackendError, FinishReason,
    GenerationRequest, GenerationResult, InFlight, ModelHandle,
};
use crate::digest::sha256_hex;
use crate::prompting::{InstructionExample, Tokenizer, WhitespaceTokenizer};

const LEXICON: [&str; 32] = [
    "listener",
    "speaker",
    "looks",
    "feels",
    "seems",
    "surprised",
    "curious",
    "calm",
    "upset",
    "excited",
    "eager",
    "worried",
    "relieved",
    "amused",
    "annoyed",
    "hopeful",
    "confused",
    "pleased",
    "tense",
    "about",
    "the",
    "news",
    "and",
    "quietly",
    "waits",
    "for",
    "details",
    "reacts",
    "warmly",
    "nervous",
    "glad",
    "thoughtful",
];

/// Deterministic backend: output is a 3–10 word string derived from a hash
/// of (seed, prompt). Fine-tuning only records lineage.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    input_budget: Option<usize>,
    calls: AtomicUsize,
    in_flight: InFlight,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            input_budget: None,
            calls: AtomicUsize::new(0),
            in_flight: InFlight::default(),
        }
    }

    /// Rejects prompts longer than `budget` whitespace tokens.
    pub fn with_input_budget(mut self, budget: usize) -> Self {
        self.input_budget = Some(budget);
        self
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn base_handle(&self) -> ModelHandle {
        ModelHandle::base("mock", "mock-base")
    }

    fn generate(&self, handle: &ModelHandle, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let started = Instant::now();
        request.validate()?;
        if handle.backend_id != "mock" {
            return Err(BackendError::ModelNotFound(handle.model_id.clone()));
        }
        if let Some(budget) = self.input_budget {
            let tokens = WhitespaceTokenizer.count_tokens(&request.prompt);
            if tokens > budget {
                return Err(BackendError::BudgetExceeded(format!(
                    "prompt has {tokens} tokens, budget {budget}"
                )));
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);

        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(request.prompt.as_bytes())
            .finalize();
        let wanted = 3 + digest[0] as usize % 8;
        let n = wanted.min(request.max_new_tokens);
        let mut words: Vec<String> = (0..n)
            .map(|i| LEXICON[digest[1 + i] as usize % LEXICON.len()].to_string())
            .collect();
        if let Some(first) = words.first_mut() {
            let mut c = first.chars();
            if let Some(h) = c.next() {
                *first = h.to_uppercase().chain(c).collect();
            }
        }
        let mut text = words.join(" ");
        if n == wanted {
            text.push('.');
        }
        let (text, stopped) = apply_stop(&text, request.stop.as_deref());
        let finish_reason = if n < wanted && !stopped {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        let token_count = if finish_reason == FinishReason::Length {
            request.max_new_tokens
        } else {
            WhitespaceTokenizer.count_tokens(&text)
        };
        Ok(GenerationResult {
            text,
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
        let descriptor = stage_descriptor(stage, dataset, params);
        let model_id = format!(
            "{}+s{stage}-{}",
            handle.model_id,
            &sha256_hex(format!("{}{}", descriptor.dataset_digest, params.seed))[..8]
        );
        Ok(handle.extended(model_id, descriptor))
    }
}
