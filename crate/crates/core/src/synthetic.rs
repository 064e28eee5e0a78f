//! Synthetic corpora with label-bearing cue words, plus a matching
//! characteristic store whose texts open with a label-correlated keyword.
//! Used for toy-scale end-to-end checks and benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::characteristics::{CharacteristicRecord, CharacteristicStore};
use crate::context::build_window;
use crate::corpus::{Conversation, Corpus, LabelSpace, Split, Utterance};
use crate::digest::prompt_hash;
use crate::error::Result;
use crate::prompting::{KeyElement, Prompter};

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "va", "ze", "bo", "di", "fu", "ga", "he", "ju",
];

/// Deterministic pseudo-word for index `i` within namespace `ns`.
fn word(ns: usize, i: usize) -> String {
    let mut n = ns * 1000 + i;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dataset_id: String,
    pub labels: Vec<String>,
    pub conversations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub cues_per_label: usize,
    pub filler_vocab: usize,
    pub fillers_per_utterance: (usize, usize),
    /// Probability that an utterance keeps the previous utterance's label.
    pub persistence: f64,
    pub keywords_per_label: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dataset_id: "synthetic".into(),
            labels: ["neutral", "happy", "sad", "angry"].map(String::from).to_vec(),
            conversations: 100,
            min_len: 4,
            max_len: 8,
            cues_per_label: 4,
            filler_vocab: 60,
            fillers_per_utterance: (3, 7),
            persistence: 0.5,
            keywords_per_label: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.labels.iter().cloned())
    }

    pub fn cue_words(&self, label_index: usize) -> Vec<String> {
        (0..self.cues_per_label).map(|k| word(1 + label_index, k)).collect()
    }

    /// Words that open characteristic texts for utterances of this label.
    pub fn keywords(&self, label_index: usize) -> Vec<String> {
        (0..self.keywords_per_label)
            .map(|k| word(100 + label_index, k))
            .collect()
    }

    pub fn generate(&self, split: Split, seed: u64) -> Result<Corpus> {
        let space = self.label_space()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fillers: Vec<String> = (0..self.filler_vocab).map(|i| word(0, i)).collect();
        let cues: Vec<Vec<String>> = (0..self.labels.len()).map(|l| self.cue_words(l)).collect();
        let mut conversations = Vec::with_capacity(self.conversations);
        for c in 0..self.conversations {
            let len = rng.random_range(self.min_len..=self.max_len);
            let mut label = rng.random_range(0..self.labels.len());
            let mut utterances = Vec::with_capacity(len);
            for i in 0..len {
                if i > 0 && !rng.random_bool(self.persistence) {
                    label = rng.random_range(0..self.labels.len());
                }
                let n = rng.random_range(self.fillers_per_utterance.0..=self.fillers_per_utterance.1);
                let mut words: Vec<&str> = (0..n)
                    .map(|_| fillers.choose(&mut rng).expect("filler vocab").as_str())
                    .collect();
                let at = rng.random_range(0..=words.len());
                words.insert(at, cues[label].choose(&mut rng).expect("cue words"));
                let mut text = words.join(" ");
                text.push('.');
                utterances.push(Utterance {
                    index: i,
                    speaker: format!("Speaker{}", i % 2),
                    text,
                    label: self.labels[label].clone(),
                });
            }
            conversations.push(Conversation::new(
                format!("{}/{}-{c:04}", self.dataset_id, split),
                utterances,
            )?);
        }
        Corpus::new(self.dataset_id.clone(), split, conversations, space)
    }

    /// One record per utterance whose text starts with a keyword of the
    /// utterance's gold label. Prompt hashes match what `prompter` renders.
    pub fn characteristic_store(
        &self,
        corpus: &Corpus,
        prompter: &Prompter,
        element: KeyElement,
        window_size: usize,
        seed: u64,
    ) -> Result<CharacteristicStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keywords: Vec<Vec<String>> = (0..self.labels.len()).map(|l| self.keywords(l)).collect();
        let store = CharacteristicStore::new();
        for (conversation, j) in corpus.positions() {
            let window = build_window(conversation, j, window_size)?;
            let prompt = prompter.extraction_prompt(&window, element)?;
            let label = corpus
                .label_space
                .index_of(&conversation.utterances[j].label)
                .expect("generated labels are in the space");
            let keyword = keywords[label].choose(&mut rng).expect("keywords");
            let text = format!("{keyword} listener reacts to the news.");
            store.upsert(CharacteristicRecord {
                conversation_id: conversation.conversation_id.clone(),
                target_index: j,
                key_element: element,
                variant_id: prompter.variant_id,
                backend_id: "synthetic".into(),
                prompt_hash: prompt_hash(&prompt.text),
                word_count: text.split_whitespace().count(),
                text,
                valid: true,
            });
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let spec = SyntheticSpec::default();
        let a = spec.generate(Split::Train, 3).unwrap();
        let b = spec.generate(Split::Train, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.conversations.len(), 100);
        assert!(a.utterance_count() >= 400);
        assert_ne!(a, spec.generate(Split::Train, 4).unwrap());
    }

    #[test]
    fn every_utterance_has_its_cue() {
        let spec = SyntheticSpec::default();
        let c = spec.generate(Split::Test, 1).unwrap();
        for (conv, j) in c.positions() {
            let u = &conv.utterances[j];
            let l = c.label_space.index_of(&u.label).unwrap();
            assert!(spec.cue_words(l).iter().any(|w| u.text.contains(w.as_str())));
        }
    }

    #[test]
    fn store_covers_corpus() {
        let spec = SyntheticSpec {
            conversations: 5,
            ..Default::default()
        };
        let c = spec.generate(Split::Train, 0).unwrap();
        let s = spec
            .characteristic_store(&c, &Prompter::default(), KeyElement::OReact, 12, 0)
            .unwrap();
        assert_eq!(s.len(), c.utterance_count());
        assert!(s.records().iter().all(|r| r.word_count <= 10));
    }
}
