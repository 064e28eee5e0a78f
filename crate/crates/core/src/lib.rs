//! Emotion recognition in conversation via speaker-characteristic injection.
//!
//! The crate covers the whole experiment loop: loading and mixing
//! conversation corpora, rendering prompts over a context window, extracting
//! commonsense characteristics with a generation backend, building stage-1
//! and stage-2 instruction datasets, training through a [`backend::Backend`],
//! and scoring predictions with weighted-F1 and paired t-tests.

pub mod backend;
pub mod characteristics;
pub mod context;
pub mod corpus;
pub mod digest;
mod error;
pub mod evaluation;
mod jsonl;
pub mod pipeline;
pub mod prompting;
pub mod synthetic;

pub use backend::{Backend, BackendError, GenerationRequest, GenerationResult, ModelHandle};
pub use characteristics::{CharacteristicRecord, CharacteristicStore};
pub use context::{build_window, DialogueWindow};
pub use corpus::{Conversation, Corpus, LabelSpace, SampleRatio, Split, UnifiedLabelMap, Utterance};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, Prediction, PredictionSet};
pub use pipeline::{AblationMode, RunManifest, StageDataset, TrainingConfig};
pub use prompting::{InstructionExample, KeyElement, Prompter, TemplateRegistry};
