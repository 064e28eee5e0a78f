//! Stage datasets, ablation modes and two-stage training orchestration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{AdapterParams, Backend, ModelHandle};
use crate::characteristics::{truncate_words, validate_characteristic, CharacteristicStore, MAX_WORDS};
use crate::context::build_window;
use crate::corpus::Corpus;
use crate::digest::jsonl_digest;
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::prompting::{truncate_to_budget, InstructionExample, KeyElement, Prompter, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    /// Stage 2 only.
    #[serde(rename = "woS")]
    WoS,
    /// Stage 2 only, characteristics appended to the input.
    #[serde(rename = "wM")]
    WM,
    /// Speaker identification, then stage 2.
    #[serde(rename = "wR")]
    WR,
    /// Characteristic injection, then stage 2.
    #[serde(rename = "wS")]
    WS,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::WoS, AblationMode::WM, AblationMode::WR, AblationMode::WS];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::WoS => "woS",
            AblationMode::WM => "wM",
            AblationMode::WR => "wR",
            AblationMode::WS => "wS",
        }
    }

    pub fn has_stage1(self) -> bool {
        matches!(self, AblationMode::WR | AblationMode::WS)
    }

    /// Whether the mode reads the characteristic store.
    pub fn needs_store(self) -> bool {
        matches!(self, AblationMode::WM | AblationMode::WS)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name().replace('o', "/o").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected woS, wM, wR or wS)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub window_size: usize,
    pub input_budget: usize,
    pub seeds: Vec<u64>,
    pub key_element: KeyElement,
    pub template_variant: u8,
    /// Restricts store lookups to one backend's records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store_backend: Option<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size_stage1: 8,
            batch_size_stage2: 16,
            epochs_stage1: 3,
            epochs_stage2: 3,
            window_size: 12,
            input_budget: 1024,
            seeds: vec![0, 1, 2, 3, 4],
            key_element: KeyElement::OReact,
            template_variant: crate::prompting::DEFAULT_VARIANT,
            store_backend: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size_stage1", self.batch_size_stage1),
            ("batch_size_stage2", self.batch_size_stage2),
            ("epochs_stage1", self.epochs_stage1),
            ("epochs_stage2", self.epochs_stage2),
            ("window_size", self.window_size),
            ("input_budget", self.input_budget),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn stage_params(&self, stage: u8, seed: u64) -> AdapterParams {
        AdapterParams {
            learning_rate: self.learning_rate,
            batch_size: if stage == 1 {
                self.batch_size_stage1
            } else {
                self.batch_size_stage2
            },
            epochs: if stage == 1 {
                self.epochs_stage1
            } else {
                self.epochs_stage2
            },
            seed,
            ..AdapterParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub corpus_id: String,
    /// `injection`, `speaker-id` or `recognition`.
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<AblationMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_element: Option<KeyElement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_id: Option<u8>,
    pub window_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDataset {
    pub stage: u8,
    pub examples: Vec<InstructionExample>,
    pub source: DatasetSource,
    /// Positions dropped because their characteristic was unusable.
    pub excluded: Vec<(String, usize)>,
    /// Characteristics cut to the word limit.
    pub repaired: usize,
}

impl StageDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn digest(&self) -> String {
        jsonl_digest(&self.examples)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.examples)
    }

    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            stage: self.stage,
            examples: self.len(),
            digest: self.digest(),
            source: self.source.clone(),
            excluded: self.excluded.len(),
            repaired: self.repaired,
        }
    }
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<InstructionExample>> {
    read_jsonl(path.as_ref())
}

fn fit_budget(example: &mut InstructionExample, budget: usize, tokenizer: &dyn Tokenizer) -> Result<()> {
    let fitted = truncate_to_budget(&example.input_text, budget, tokenizer)?;
    if fitted != example.input_text {
        *example = InstructionExample::new(
            fitted,
            std::mem::take(&mut example.target_text),
            example.stage,
            std::mem::take(&mut example.meta),
        );
    }
    Ok(())
}

fn lookup(store: &CharacteristicStore, config: &TrainingConfig, conversation_id: &str, index: usize) -> Option<String> {
    let record = match &config.store_backend {
        Some(b) => store.get(conversation_id, index, config.key_element, config.template_variant, b),
        None => store.find(conversation_id, index, config.key_element, config.template_variant),
    };
    record.map(|r| r.text)
}

/// One injection example per utterance: the extraction prompt as input and
/// the stored characteristic as target.
pub fn build_stage1_dataset(
    corpus: &Corpus,
    store: &CharacteristicStore,
    config: &TrainingConfig,
    prompter: &Prompter,
    tokenizer: &dyn Tokenizer,
) -> Result<StageDataset> {
    let prompter = prompter.clone().with_variant(config.template_variant);
    let mut examples = Vec::with_capacity(corpus.utterance_count());
    let mut gaps = Vec::new();
    let mut excluded = Vec::new();
    let mut repaired = 0;

    for (conversation, j) in corpus.positions() {
        let id = &conversation.conversation_id;
        let Some(text) = lookup(store, config, id, j) else {
            gaps.push((id.clone(), j));
            continue;
        };
        let (mut text, ok) = validate_characteristic(&text);
        if !ok {
            if text.is_empty() {
                excluded.push((id.clone(), j));
                continue;
            }
            text = truncate_words(&text, MAX_WORDS);
            repaired += 1;
        }
        let window = build_window(conversation, j, config.window_size)?;
        let mut ex = prompter.injection_example(&window, config.key_element, &text)?;
        fit_budget(&mut ex, config.input_budget, tokenizer)?;
        examples.push(ex);
    }
    if !gaps.is_empty() {
        return Err(Error::MissingRecords(gaps));
    }
    if !excluded.is_empty() {
        log::warn!("stage 1: excluded {} unusable characteristics", excluded.len());
    }
    Ok(StageDataset {
        stage: 1,
        examples,
        source: DatasetSource {
            corpus_id: corpus.corpus_id(),
            task: "injection".into(),
            mode: Some(AblationMode::WS),
            key_element: Some(config.key_element),
            variant_id: Some(config.template_variant),
            window_size: config.window_size,
        },
        excluded,
        repaired,
    })
}

/// One recognition example per utterance with the gold label as target.
/// Characteristics are appended to the input only in mode `wM`.
pub fn build_stage2_dataset(
    corpus: &Corpus,
    mode: AblationMode,
    store: Option<&CharacteristicStore>,
    config: &TrainingConfig,
    prompter: &Prompter,
    tokenizer: &dyn Tokenizer,
) -> Result<StageDataset> {
    let store = match (mode, store) {
        (AblationMode::WM, None) => return Err(Error::Config("mode wM requires a characteristic store".into())),
        (AblationMode::WM, Some(s)) => Some(s),
        _ => None,
    };
    let mut examples = Vec::with_capacity(corpus.utterance_count());
    let mut gaps = Vec::new();
    for (conversation, j) in corpus.positions() {
        let id = &conversation.conversation_id;
        let characteristics = match store {
            Some(s) => match lookup(s, config, id, j) {
                Some(text) => Some(vec![validate_characteristic(&text).0]),
                None => {
                    gaps.push((id.clone(), j));
                    continue;
                }
            },
            None => None,
        };
        let window = build_window(conversation, j, config.window_size)?;
        let gold = &conversation.utterances[j].label;
        let mut ex =
            prompter.recognition_example(&window, &corpus.label_space, characteristics.as_deref(), Some(gold))?;
        fit_budget(&mut ex, config.input_budget, tokenizer)?;
        examples.push(ex);
    }
    if !gaps.is_empty() {
        return Err(Error::MissingRecords(gaps));
    }
    Ok(StageDataset {
        stage: 2,
        examples,
        source: DatasetSource {
            corpus_id: corpus.corpus_id(),
            task: "recognition".into(),
            mode: Some(mode),
            key_element: store.map(|_| config.key_element),
            variant_id: None,
            window_size: config.window_size,
        },
        excluded: Vec::new(),
        repaired: 0,
    })
}

pub fn build_speaker_id_dataset(
    corpus: &Corpus,
    config: &TrainingConfig,
    prompter: &Prompter,
    tokenizer: &dyn Tokenizer,
) -> Result<StageDataset> {
    let mut examples = Vec::with_capacity(corpus.utterance_count());
    for (conversation, j) in corpus.positions() {
        let window = build_window(conversation, j, config.window_size)?;
        let mut ex = prompter.speaker_id_example(conversation, &window)?;
        fit_budget(&mut ex, config.input_budget, tokenizer)?;
        examples.push(ex);
    }
    Ok(StageDataset {
        stage: 1,
        examples,
        source: DatasetSource {
            corpus_id: corpus.corpus_id(),
            task: "speaker-id".into(),
            mode: Some(AblationMode::WR),
            key_element: None,
            variant_id: None,
            window_size: config.window_size,
        },
        excluded: Vec::new(),
        repaired: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub stage: u8,
    pub examples: usize,
    pub digest: String,
    pub source: DatasetSource,
    pub excluded: usize,
    pub repaired: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub handle: Option<ModelHandle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

/// Everything needed to regenerate a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: AblationMode,
    pub backend_id: String,
    pub corpus_id: String,
    pub config: TrainingConfig,
    pub datasets: Vec<DatasetInfo>,
    pub runs: Vec<SeedRun>,
    pub elapsed_ms: u64,
}

impl RunManifest {
    /// Handles of seeds that completed, in seed order.
    pub fn handles(&self) -> Vec<(u64, ModelHandle)> {
        self.runs
            .iter()
            .filter_map(|r| r.handle.clone().map(|h| (r.seed, h)))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.runs.iter().all(|r| r.handle.is_some())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// The datasets a mode trains on, in stage order.
pub fn build_mode_datasets(
    corpus: &Corpus,
    mode: AblationMode,
    store: Option<&CharacteristicStore>,
    config: &TrainingConfig,
    prompter: &Prompter,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<StageDataset>> {
    let mut datasets = Vec::with_capacity(2);
    match mode {
        AblationMode::WS => {
            let store = store.ok_or_else(|| Error::Config("mode wS requires a characteristic store".into()))?;
            datasets.push(build_stage1_dataset(corpus, store, config, prompter, tokenizer)?);
        }
        AblationMode::WR => datasets.push(build_speaker_id_dataset(corpus, config, prompter, tokenizer)?),
        AblationMode::WoS | AblationMode::WM => {}
    }
    datasets.push(build_stage2_dataset(corpus, mode, store, config, prompter, tokenizer)?);
    Ok(datasets)
}

/// Trains one model per seed, stages in order. Seeds run one after another
/// because every seed starts from the same base handle, which a backend
/// fine-tunes exclusively. A failing seed is recorded in the manifest and
/// does not stop the others.
pub fn run_training(
    corpus: &Corpus,
    mode: AblationMode,
    backend: &dyn Backend,
    store: Option<&CharacteristicStore>,
    config: &TrainingConfig,
    prompter: &Prompter,
) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let datasets = build_mode_datasets(corpus, mode, store, config, prompter, backend.tokenizer())?;
    let base = backend.base_handle();

    let train_seed = |seed: u64| -> SeedRun {
        let t = Instant::now();
        let mut handle = base.clone();
        let mut error = None;
        for ds in &datasets {
            match backend.finetune(&handle, &ds.examples, &config.stage_params(ds.stage, seed)) {
                Ok(h) => handle = h,
                Err(e) => {
                    log::error!("seed {seed}: stage {} failed: {e}", ds.stage);
                    error = Some(format!("stage {}: {e}", ds.stage));
                    break;
                }
            }
        }
        SeedRun {
            seed,
            handle: error.is_none().then_some(handle),
            error,
            elapsed_ms: t.elapsed().as_millis() as u64,
        }
    };

    let runs: Vec<SeedRun> = config.seeds.iter().map(|&seed| train_seed(seed)).collect();

    Ok(RunManifest {
        mode,
        backend_id: backend.id().to_string(),
        corpus_id: corpus.corpus_id(),
        config: config.clone(),
        datasets: datasets.iter().map(StageDataset::info).collect(),
        runs,
        elapsed_ms: started.elapsed().as_millis() as u64,
    })
}
