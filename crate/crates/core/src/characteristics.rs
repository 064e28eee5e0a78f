//! Speaker-characteristic extraction and the replayable record store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenerationRequest, ModelHandle};
use crate::context::build_window;
use crate::corpus::Corpus;
use crate::digest::prompt_hash;
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::prompting::{truncate_to_budget, KeyElement, Prompter};

/// Word limit stated in the extraction templates.
pub const MAX_WORDS: usize = 10;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacteristicRecord {
    pub conversation_id: String,
    pub target_index: usize,
    pub key_element: KeyElement,
    pub variant_id: u8,
    pub backend_id: String,
    pub prompt_hash: String,
    pub text: String,
    pub word_count: usize,
    /// False when the raw generation broke the word limit and was truncated.
    #[serde(default = "yes")]
    pub valid: bool,
}

fn yes() -> bool {
    true
}

impl CharacteristicRecord {
    pub fn key(&self) -> RecordKey {
        (
            self.conversation_id.clone(),
            self.target_index,
            self.key_element,
            self.variant_id,
            self.backend_id.clone(),
        )
    }
}

/// `(conversation_id, target_index, key_element, variant_id, backend_id)`
pub type RecordKey = (String, usize, KeyElement, u8, String);

/// A generation that failed after the backend's retries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionFailure {
    pub conversation_id: String,
    pub target_index: usize,
    pub key_element: KeyElement,
    pub variant_id: u8,
    pub backend_id: String,
    pub message: String,
}

impl ExtractionFailure {
    fn key(&self) -> RecordKey {
        (
            self.conversation_id.clone(),
            self.target_index,
            self.key_element,
            self.variant_id,
            self.backend_id.clone(),
        )
    }
}

/// Thread-safe record store. Writers replace whole records under a lock,
/// so readers never see partial state.
#[derive(Debug, Default)]
pub struct CharacteristicStore {
    records: RwLock<BTreeMap<RecordKey, CharacteristicRecord>>,
    failures: RwLock<BTreeMap<RecordKey, ExtractionFailure>>,
}

impl Clone for CharacteristicStore {
    fn clone(&self) -> Self {
        Self {
            records: RwLock::new(self.records.read().expect("store poisoned").clone()),
            failures: RwLock::new(self.failures.read().expect("store poisoned").clone()),
        }
    }
}

impl CharacteristicStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = CharacteristicRecord>) -> Self {
        let store = Self::new();
        for r in records {
            store.upsert(r);
        }
        store
    }

    pub fn upsert(&self, record: CharacteristicRecord) {
        let key = record.key();
        self.failures.write().expect("store poisoned").remove(&key);
        self.records.write().expect("store poisoned").insert(key, record);
    }

    pub fn record_failure(&self, failure: ExtractionFailure) {
        self.failures
            .write()
            .expect("store poisoned")
            .insert(failure.key(), failure);
    }

    pub fn get(
        &self,
        conversation_id: &str,
        target_index: usize,
        element: KeyElement,
        variant_id: u8,
        backend_id: &str,
    ) -> Option<CharacteristicRecord> {
        let key = (
            conversation_id.to_string(),
            target_index,
            element,
            variant_id,
            backend_id.to_string(),
        );
        self.records.read().expect("store poisoned").get(&key).cloned()
    }

    /// Record for a position from any backend; the lexicographically first
    /// backend id wins when several exist.
    pub fn find(
        &self,
        conversation_id: &str,
        target_index: usize,
        element: KeyElement,
        variant_id: u8,
    ) -> Option<CharacteristicRecord> {
        self.records
            .read()
            .expect("store poisoned")
            .values()
            .find(|r| {
                r.conversation_id == conversation_id
                    && r.target_index == target_index
                    && r.key_element == element
                    && r.variant_id == variant_id
            })
            .cloned()
    }

    /// All records in persisted order.
    pub fn records(&self) -> Vec<CharacteristicRecord> {
        self.records.read().expect("store poisoned").values().cloned().collect()
    }

    pub fn failures(&self) -> Vec<ExtractionFailure> {
        self.failures
            .read()
            .expect("store poisoned")
            .values()
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `chars.jsonl` → `chars.errors.jsonl`.
    pub fn errors_path(path: &Path) -> PathBuf {
        let stem = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stem = stem.strip_suffix(".jsonl").unwrap_or(&stem);
        path.with_file_name(format!("{stem}.errors.jsonl"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = Self::new();
        for r in read_jsonl::<CharacteristicRecord>(path)? {
            if r.text.trim().is_empty() {
                return Err(Error::EmptyCharacteristic);
            }
            store.upsert(r);
        }
        let errors = Self::errors_path(path);
        if errors.exists() {
            for f in read_jsonl::<ExtractionFailure>(&errors)? {
                store.record_failure(f);
            }
        }
        Ok(store)
    }

    /// Loads `path` if it exists, else returns an empty store.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        if path.as_ref().exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    /// Writes records sorted by key, plus the failure sidecar when non-empty.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_jsonl(path, &self.records())?;
        let errors = Self::errors_path(path);
        let failures = self.failures();
        if failures.is_empty() {
            if errors.exists() {
                fs::remove_file(&errors).map_err(|e| Error::io(&errors, e))?;
            }
        } else {
            write_jsonl(&errors, &failures)?;
        }
        Ok(())
    }
}

/// Trims, collapses inner whitespace and strips surrounding quotes.
/// `ok` holds when the result is non-empty and at most ten words.
pub fn validate_characteristic(text: &str) -> (String, bool) {
    let mut s = text.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = ['"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}']
            .iter()
            .find_map(|q| s.strip_prefix(*q))
            .and_then(|inner| {
                ['"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}']
                    .iter()
                    .find_map(|q| inner.strip_suffix(*q))
            })
            .map(|inner| inner.trim().to_string());
        match stripped {
            Some(inner) => s = inner,
            None => break,
        }
    }
    let words = s.split_whitespace().count();
    let ok = words > 0 && words <= MAX_WORDS;
    (s, ok)
}

pub fn truncate_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionOptions {
    pub window_size: usize,
    pub parallelism: usize,
    pub max_new_tokens: usize,
    /// Prompts are truncated to this many backend tokens when set.
    pub input_budget: Option<usize>,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        Self {
            window_size: 12,
            parallelism: 4,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            input_budget: Some(1024),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub total: usize,
    pub cached: usize,
    pub generated: usize,
    pub failed: usize,
    /// Generated records over the word limit, kept in truncated form.
    pub flagged: usize,
}

struct Job {
    conversation_id: String,
    target_index: usize,
    prompt: String,
    hash: String,
}

/// Generates one characteristic per utterance of `corpus` into `store`.
/// Positions whose stored record already carries the same prompt hash are
/// skipped. Per-item backend failures go to the store's failure list and do
/// not abort the batch; an unreachable service or unknown model does.
pub fn extract_corpus_characteristics(
    corpus: &Corpus,
    element: KeyElement,
    prompter: &Prompter,
    backend: &dyn Backend,
    handle: &ModelHandle,
    store: &CharacteristicStore,
    options: &ExtractionOptions,
) -> Result<ExtractionSummary> {
    let variant_id = prompter.variant_id;
    let backend_id = handle.backend_id.clone();
    let mut summary = ExtractionSummary::default();
    let mut jobs = Vec::new();

    for (conversation, j) in corpus.positions() {
        let window = build_window(conversation, j, options.window_size)?;
        let mut prompt = prompter.extraction_prompt(&window, element)?.text;
        if let Some(budget) = options.input_budget {
            prompt = truncate_to_budget(&prompt, budget, backend.tokenizer())?;
        }
        let hash = prompt_hash(&prompt);
        summary.total += 1;
        let cached = store
            .get(&conversation.conversation_id, j, element, variant_id, &backend_id)
            .is_some_and(|r| r.prompt_hash == hash);
        if cached {
            summary.cached += 1;
        } else {
            jobs.push(Job {
                conversation_id: conversation.conversation_id.clone(),
                target_index: j,
                prompt,
                hash,
            });
        }
    }

    let next = AtomicUsize::new(0);
    let tally = Mutex::new((0usize, 0usize, 0usize));
    let fatal: Mutex<Option<BackendError>> = Mutex::new(None);
    let workers = options.parallelism.max(1).min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                if fatal.lock().expect("fatal poisoned").is_some() {
                    break;
                }
                let request = GenerationRequest::new(job.prompt.clone(), options.max_new_tokens);
                let outcome = backend
                    .generate(handle, &request)
                    .map_err(|e| {
                        if matches!(e, BackendError::Unreachable { .. } | BackendError::ModelNotFound(_)) {
                            fatal.lock().expect("fatal poisoned").get_or_insert(e.clone());
                        }
                        e.to_string()
                    })
                    .and_then(|r| {
                        let (text, ok) = validate_characteristic(&r.text);
                        if text.is_empty() {
                            Err("empty generation".to_string())
                        } else {
                            Ok((text, ok))
                        }
                    });
                match outcome {
                    Ok((text, ok)) => {
                        let text = if ok {
                            text
                        } else {
                            log::info!(
                                "{}#{}: truncating {}-word characteristic to {MAX_WORDS}",
                                job.conversation_id,
                                job.target_index,
                                text.split_whitespace().count()
                            );
                            truncate_words(&text, MAX_WORDS)
                        };
                        store.upsert(CharacteristicRecord {
                            conversation_id: job.conversation_id.clone(),
                            target_index: job.target_index,
                            key_element: element,
                            variant_id,
                            backend_id: backend_id.clone(),
                            prompt_hash: job.hash.clone(),
                            word_count: text.split_whitespace().count(),
                            text,
                            valid: ok,
                        });
                        let mut t = tally.lock().expect("tally poisoned");
                        t.0 += 1;
                        if !ok {
                            t.2 += 1;
                        }
                    }
                    Err(message) => {
                        log::warn!("{}#{}: {message}", job.conversation_id, job.target_index);
                        store.record_failure(ExtractionFailure {
                            conversation_id: job.conversation_id.clone(),
                            target_index: job.target_index,
                            key_element: element,
                            variant_id,
                            backend_id: backend_id.clone(),
                            message,
                        });
                        tally.lock().expect("tally poisoned").1 += 1;
                    }
                }
            });
        }
    });
    if let Some(e) = fatal.into_inner().expect("fatal poisoned") {
        return Err(Error::Backend(e));
    }
    let (generated, failed, flagged) = tally.into_inner().expect("tally poisoned");
    summary.generated = generated;
    summary.failed = failed;
    summary.flagged = flagged;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, ReplayBackend};
    use crate::corpus::LabelSpace;
    use crate::corpus::{Conversation, Split, Utterance};

    fn corpus(n: usize) -> Corpus {
        let utterances = (0..n)
            .map(|i| Utterance {
                index: i,
                speaker: format!("Speaker{}", i % 2),
                text: format!("utterance number {i}"),
                label: "neutral".into(),
            })
            .collect();
        Corpus::new(
            "iemocap",
            Split::Train,
            vec![Conversation::new("iemocap/c0", utterances).unwrap()],
            LabelSpace::builtin("iemocap").unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn validation_examples() {
        let (s, ok) = validate_characteristic("Expecting explanation or clarification");
        assert!(ok);
        assert_eq!(s.split_whitespace().count(), 4);
        assert_eq!(validate_characteristic("  Surprised.  "), ("Surprised.".into(), true));
        assert_eq!(
            validate_characteristic("\"Calm  and\n curious\""),
            ("Calm and curious".into(), true)
        );
        let long = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen";
        assert!(!validate_characteristic(long).1);
        assert!(!validate_characteristic("   ").1);
        assert!(!validate_characteristic("\"\"").1);
    }

    #[test]
    fn normalization_is_a_fixpoint() {
        for s in ["  'x  y' ", "\"\"a\"\"", "plain", "  "] {
            let (once, _) = validate_characteristic(s);
            assert_eq!(validate_characteristic(&once).0, once);
        }
    }

    #[test]
    fn extraction_covers_and_caches() {
        let c = corpus(4);
        let backend = MockBackend::new(1);
        let store = CharacteristicStore::new();
        let opts = ExtractionOptions::default();
        let s = extract_corpus_characteristics(
            &c,
            KeyElement::OReact,
            &Prompter::default(),
            &backend,
            &backend.base_handle(),
            &store,
            &opts,
        )
        .unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(s.generated, 4);
        assert_eq!(backend.calls(), 4);

        let s = extract_corpus_characteristics(
            &c,
            KeyElement::OReact,
            &Prompter::default(),
            &backend,
            &backend.base_handle(),
            &store,
            &opts,
        )
        .unwrap();
        assert_eq!(backend.calls(), 4);
        assert_eq!(s.cached, 4);
        for r in store.records() {
            assert_eq!(r.word_count, r.text.split_whitespace().count());
            assert!(r.word_count <= MAX_WORDS);
        }
    }

    #[test]
    fn template_change_invalidates_cache() {
        let c = corpus(3);
        let backend = MockBackend::new(1);
        let store = CharacteristicStore::new();
        let opts = ExtractionOptions::default();
        let h = backend.base_handle();
        extract_corpus_characteristics(
            &c,
            KeyElement::OReact,
            &Prompter::default(),
            &backend,
            &h,
            &store,
            &opts,
        )
        .unwrap();
        let p = Prompter {
            target_in_block: false,
            ..Default::default()
        };
        let s = extract_corpus_characteristics(&c, KeyElement::OReact, &p, &backend, &h, &store, &opts).unwrap();
        assert_eq!(s.generated, 3);
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn failures_go_to_sidecar() {
        let c = corpus(3);
        let replay = ReplayBackend::default();
        let store = CharacteristicStore::new();
        let s = extract_corpus_characteristics(
            &c,
            KeyElement::OReact,
            &Prompter::default(),
            &replay,
            &replay.base_handle(),
            &store,
            &ExtractionOptions::default(),
        )
        .unwrap();
        assert_eq!((s.generated, s.failed), (0, 3));
        assert_eq!(store.failures().len(), 3);
        assert!(store.failures()[0].message.starts_with("no recorded response"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chars.jsonl");
        store.save(&path).unwrap();
        assert!(dir.path().join("chars.errors.jsonl").exists());
        assert_eq!(CharacteristicStore::load(&path).unwrap().failures().len(), 3);
    }

    #[test]
    fn save_is_sorted_and_stable() {
        let c = corpus(12);
        let backend = MockBackend::new(5);
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for parallelism in [1, 4] {
            let store = CharacteristicStore::new();
            let opts = ExtractionOptions {
                parallelism,
                ..Default::default()
            };
            extract_corpus_characteristics(
                &c,
                KeyElement::XIntent,
                &Prompter::default(),
                &backend,
                &backend.base_handle(),
                &store,
                &opts,
            )
            .unwrap();
            let path = dir.path().join(format!("s{parallelism}.jsonl"));
            store.save(&path).unwrap();
            bytes.push(fs::read(&path).unwrap());
            let loaded = CharacteristicStore::load(&path).unwrap();
            let idx: Vec<usize> = loaded.records().iter().map(|r| r.target_index).collect();
            let mut sorted = idx.clone();
            sorted.sort();
            assert_eq!(idx, sorted);
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn over_length_is_truncated_and_flagged() {
        struct Verbose;
        impl Backend for Verbose {
            fn id(&self) -> &str {
                "verbose"
            }
            fn base_handle(&self) -> ModelHandle {
                ModelHandle::base("verbose", "v")
            }
            fn generate(
                &self,
                _: &ModelHandle,
                _: &GenerationRequest,
            ) -> std::result::Result<crate::backend::GenerationResult, BackendError> {
                Ok(crate::backend::GenerationResult {
                    text: "a b c d e f g h i j k l".into(),
                    finish_reason: crate::backend::FinishReason::Stop,
                    token_count: 12,
                    latency_ms: 0,
                })
            }
            fn finetune(
                &self,
                _: &ModelHandle,
                _: &[crate::prompting::InstructionExample],
                _: &crate::backend::AdapterParams,
            ) -> std::result::Result<ModelHandle, BackendError> {
                unimplemented!()
            }
        }
        let store = CharacteristicStore::new();
        let s = extract_corpus_characteristics(
            &corpus(2),
            KeyElement::OReact,
            &Prompter::default(),
            &Verbose,
            &Verbose.base_handle(),
            &store,
            &ExtractionOptions::default(),
        )
        .unwrap();
        assert_eq!(s.flagged, 2);
        let r = &store.records()[0];
        assert!(!r.valid);
        assert_eq!(r.word_count, 10);
    }

    #[test]
    fn unreachable_backend_aborts() {
        struct Down(AtomicUsize);
        impl Backend for Down {
            fn id(&self) -> &str {
                "down"
            }
            fn base_handle(&self) -> ModelHandle {
                ModelHandle::base("down", "d")
            }
            fn generate(
                &self,
                _: &ModelHandle,
                _: &GenerationRequest,
            ) -> std::result::Result<crate::backend::GenerationResult, BackendError> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Err(BackendError::Unreachable {
                    url: "http://x".into(),
                    attempts: 3,
                    message: "refused".into(),
                })
            }
            fn finetune(
                &self,
                _: &ModelHandle,
                _: &[crate::prompting::InstructionExample],
                _: &crate::backend::AdapterParams,
            ) -> std::result::Result<ModelHandle, BackendError> {
                unimplemented!()
            }
        }
        let down = Down(AtomicUsize::new(0));
        let err = extract_corpus_characteristics(
            &corpus(8),
            KeyElement::OReact,
            &Prompter::default(),
            &down,
            &down.base_handle(),
            &CharacteristicStore::new(),
            &ExtractionOptions {
                parallelism: 1,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Backend(BackendError::Unreachable { .. })));
        assert_eq!(down.0.load(Ordering::SeqCst), 1);
    }
}
