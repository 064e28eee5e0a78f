use std::path::PathBuf;

use ercforge_core::backend::ReplayBackend;
use ercforge_core::characteristics::{extract_corpus_characteristics, ExtractionOptions};
use ercforge_core::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn big_news() -> Corpus {
    let utterances = vec![
        Utterance {
            index: 0,
            speaker: "Speaker1".into(),
            text: "Okay, so big news.".into(),
            label: "neutral".into(),
        },
        Utterance {
            index: 1,
            speaker: "Speaker0".into(),
            text: "What?".into(),
            label: "surprise".into(),
        },
    ];
    Corpus::new(
        "reference",
        Split::Test,
        vec![Conversation::new("reference/big-news", utterances).unwrap()],
        LabelSpace::new(["neutral", "surprise"]).unwrap(),
    )
    .unwrap()
}

#[test]
fn replayed_extraction_reproduces_recorded_characteristics() {
    let recorded = CharacteristicStore::load(fixture("reference_store.jsonl")).unwrap();
    let backend = ReplayBackend::from_store(&recorded);
    let corpus = big_news();
    let store = CharacteristicStore::new();
    let options = ExtractionOptions::default();
    for element in KeyElement::ALL {
        // The first utterance has no recorded prompt; only index 1 is replayed.
        let summary = extract_corpus_characteristics(
            &corpus,
            element,
            &Prompter::default(),
            &backend,
            &backend.base_handle(),
            &store,
            &options,
        )
        .unwrap();
        assert_eq!(summary.failed, 1, "{element}");
        let got = store.find("reference/big-news", 1, element, 4).unwrap();
        let want = recorded.find("reference/big-news", 1, element, 4).unwrap();
        assert_eq!(got.text, want.text);
        assert_eq!(got.prompt_hash, want.prompt_hash);
        assert!(got.valid);
    }
    let o_react = store.find("reference/big-news", 1, KeyElement::OReact, 4).unwrap();
    assert_eq!(o_react.text, "Listener looks surprised and excited.");
}

#[test]
fn store_round_trip_is_byte_identical() {
    let path = fixture("reference_store.jsonl");
    let store = CharacteristicStore::load(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("store.jsonl");
    store.save(&out).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&path).unwrap());
    assert!(!CharacteristicStore::errors_path(&out).exists());
}

#[test]
fn recognition_prompt_carries_injected_characteristic() {
    let recorded = CharacteristicStore::load(fixture("reference_store.jsonl")).unwrap();
    let corpus = big_news();
    let conv = &corpus.conversations[0];
    let window = build_window(conv, 1, 12).unwrap();
    let record = recorded.find("reference/big-news", 1, KeyElement::OReact, 4).unwrap();
    let example = Prompter::default()
        .recognition_example(
            &window,
            &corpus.label_space,
            Some(std::slice::from_ref(&record.text)),
            Some("surprise"),
        )
        .unwrap();
    assert!(example.input_text.contains("Listener looks surprised and excited."));
    assert!(example.input_text.contains("Okay, so big news."));
    assert_eq!(example.target_text, "surprise");
}
