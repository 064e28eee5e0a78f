//! Prompt templates for characteristic extraction, emotion recognition and
//! speaker identification, plus the instruction-example type shared by both
//! training stages.

mod budget;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{render_history, render_utterance, DialogueWindow};
use crate::corpus::{Conversation, LabelSpace};
use crate::error::{Error, Result};

pub use budget::{truncate_to_budget, Tokenizer, WhitespaceTokenizer};
pub use template::{Purpose, Template, TemplateEntry, TemplateRegistry, TemplateVariant};

/// The variant chosen by default for extraction and injection.
pub const DEFAULT_VARIANT: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    MentalState,
    Event,
    Persona,
}

/// Commonsense relation used to query a characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeyElement {
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "oWant")]
    OWant,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xAttr")]
    XAttr,
}

impl KeyElement {
    pub const ALL: [KeyElement; 9] = [
        KeyElement::XIntent,
        KeyElement::XReact,
        KeyElement::OReact,
        KeyElement::XWant,
        KeyElement::OWant,
        KeyElement::XEffect,
        KeyElement::OEffect,
        KeyElement::XNeed,
        KeyElement::XAttr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KeyElement::XIntent => "xIntent",
            KeyElement::XReact => "xReact",
            KeyElement::OReact => "oReact",
            KeyElement::XWant => "xWant",
            KeyElement::OWant => "oWant",
            KeyElement::XEffect => "xEffect",
            KeyElement::OEffect => "oEffect",
            KeyElement::XNeed => "xNeed",
            KeyElement::XAttr => "xAttr",
        }
    }

    pub fn category(self) -> Category {
        match self {
            KeyElement::XIntent | KeyElement::XReact | KeyElement::OReact => Category::MentalState,
            KeyElement::XAttr => Category::Persona,
            _ => Category::Event,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            KeyElement::XIntent => "why the speaker would cause the event",
            KeyElement::XReact => "the speaker's reaction to the event",
            KeyElement::OReact => "the listeners' reaction to the event",
            KeyElement::XWant => "what the speaker may want to do after the event",
            KeyElement::OWant => "what the listener may want to do after the event",
            KeyElement::XEffect => "the effect of the event on the speaker",
            KeyElement::OEffect => "the effect of the event on the listener",
            KeyElement::XNeed => "what the speaker might need to do before the event",
            KeyElement::XAttr => "how the speaker might be described given the event",
        }
    }
}

impl fmt::Display for KeyElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KeyElement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        KeyElement::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownElement(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptProvenance {
    pub conversation_id: String,
    pub target_index: usize,
    pub key_element: KeyElement,
    pub variant_id: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub token_estimate: usize,
    pub provenance: PromptProvenance,
}

/// Provenance attached to every instruction example.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub conversation_id: String,
    pub target_index: usize,
    /// `injection`, `speaker-id` or `recognition`.
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_element: Option<KeyElement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_id: Option<u8>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

/// One (input, target) pair. Loss is only taken over the target, which
/// starts at `mask_boundary` (a char offset) in `input_text‖target_text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "ExampleRecord", into = "ExampleRecord")]
pub struct InstructionExample {
    pub input_text: String,
    pub target_text: String,
    pub mask_boundary: usize,
    pub stage: u8,
    pub meta: ExampleMeta,
}

impl InstructionExample {
    pub fn new(input_text: String, target_text: String, stage: u8, meta: ExampleMeta) -> Self {
        Self {
            mask_boundary: input_text.chars().count(),
            input_text,
            target_text,
            stage,
            meta,
        }
    }

    /// `input_text‖target_text`.
    pub fn full_text(&self) -> String {
        let mut s = String::with_capacity(self.input_text.len() + self.target_text.len());
        s.push_str(&self.input_text);
        s.push_str(&self.target_text);
        s
    }
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    input: String,
    target: String,
    stage: u8,
    meta: ExampleMeta,
}

impl From<ExampleRecord> for InstructionExample {
    fn from(r: ExampleRecord) -> Self {
        InstructionExample::new(r.input, r.target, r.stage, r.meta)
    }
}

impl From<InstructionExample> for ExampleRecord {
    fn from(e: InstructionExample) -> Self {
        ExampleRecord {
            input: e.input_text,
            target: e.target_text,
            stage: e.stage,
            meta: e.meta,
        }
    }
}

/// Renders prompts from a template registry.
#[derive(Debug, Clone)]
pub struct Prompter {
    pub registry: TemplateRegistry,
    /// Variant used for extraction and stage-1 injection.
    pub variant_id: u8,
    /// Whether the target utterance also closes the `### ###` block of
    /// extraction prompts.
    pub target_in_block: bool,
}

impl Default for Prompter {
    fn default() -> Self {
        Self {
            registry: TemplateRegistry::builtin(),
            variant_id: DEFAULT_VARIANT,
            target_in_block: true,
        }
    }
}

impl Prompter {
    pub fn new(registry: TemplateRegistry) -> Self {
        Self {
            registry,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant_id: u8) -> Self {
        self.variant_id = variant_id;
        self
    }

    pub fn variant(&self) -> Result<&TemplateVariant> {
        self.registry.variant(self.variant_id)
    }

    pub fn extraction_prompt(&self, window: &DialogueWindow, element: KeyElement) -> Result<RenderedPrompt> {
        render_extraction_prompt(&self.registry, window, element, self.variant()?, self.target_in_block)
    }

    /// Stage-1 example: the extraction prompt as input, the characteristic as target.
    pub fn injection_example(
        &self,
        window: &DialogueWindow,
        element: KeyElement,
        characteristic: &str,
    ) -> Result<InstructionExample> {
        if characteristic.trim().is_empty() {
            return Err(Error::EmptyCharacteristic);
        }
        let prompt = self.extraction_prompt(window, element)?;
        Ok(InstructionExample::new(
            prompt.text,
            characteristic.to_string(),
            1,
            ExampleMeta {
                conversation_id: window.conversation_id.clone(),
                target_index: window.target_index(),
                task: "injection".into(),
                key_element: Some(element),
                variant_id: Some(self.variant_id),
                extra: BTreeMap::new(),
            },
        ))
    }

    /// Stage-2 example. Without `gold` the result is an inference prompt
    /// with an empty target.
    pub fn recognition_example(
        &self,
        window: &DialogueWindow,
        label_space: &LabelSpace,
        characteristics: Option<&[String]>,
        gold: Option<&str>,
    ) -> Result<InstructionExample> {
        if let Some(gold) = gold {
            if !label_space.contains(gold) {
                return Err(Error::LabelOutsideSpace {
                    dataset: window.conversation_id.clone(),
                    label: gold.to_string(),
                });
            }
        }
        let characteristic_lines: String = characteristics
            .unwrap_or_default()
            .iter()
            .map(|c| format!("The listener's reaction: {c}\n"))
            .collect();
        let history = render_history(window, true);
        let target = window.render_target();
        let labels = label_space.joined();
        let text = self.registry.template(Purpose::Recognition, None, None)?.render(&[
            ("history", history.as_str()),
            ("target", target.as_str()),
            ("labels", labels.as_str()),
            ("characteristics", characteristic_lines.as_str()),
        ])?;
        Ok(InstructionExample::new(
            text,
            gold.unwrap_or_default().to_string(),
            2,
            ExampleMeta {
                conversation_id: window.conversation_id.clone(),
                target_index: window.target_index(),
                task: "recognition".into(),
                ..ExampleMeta::default()
            },
        ))
    }

    /// Stage-1 example asking which speaker produced the target. The target
    /// slot carries only the quoted text so the answer is not leaked.
    pub fn speaker_id_example(
        &self,
        conversation: &Conversation,
        window: &DialogueWindow,
    ) -> Result<InstructionExample> {
        let history = render_history(window, false);
        let target = format!("\"{}\"", window.target.text);
        let labels = conversation.speakers().join(", ");
        let text = self.registry.template(Purpose::SpeakerId, None, None)?.render(&[
            ("history", history.as_str()),
            ("target", target.as_str()),
            ("labels", labels.as_str()),
        ])?;
        Ok(InstructionExample::new(
            text,
            window.target.speaker.clone(),
            1,
            ExampleMeta {
                conversation_id: window.conversation_id.clone(),
                target_index: window.target_index(),
                task: "speaker-id".into(),
                ..ExampleMeta::default()
            },
        ))
    }
}

pub fn render_extraction_prompt(
    registry: &TemplateRegistry,
    window: &DialogueWindow,
    element: KeyElement,
    variant: &TemplateVariant,
    target_in_block: bool,
) -> Result<RenderedPrompt> {
    let phrase = variant.phrase(element)?;
    let history = render_history(window, target_in_block);
    let target = render_utterance(&window.target);
    let lead = if variant.includes_history_preamble {
        "Based on the above historical utterances, please "
    } else {
        "Please "
    };
    let constraint = if variant.includes_length_constraint {
        " in no more than ten words of output"
    } else {
        ""
    };
    let text = registry
        .template(Purpose::Extraction, Some(variant.variant_id), Some(element))?
        .render(&[
            ("history", history.as_str()),
            ("target", target.as_str()),
            ("phrase", phrase),
            ("lead", lead),
            ("constraint", constraint),
        ])?;
    Ok(RenderedPrompt {
        token_estimate: WhitespaceTokenizer.count_tokens(&text),
        text,
        provenance: PromptProvenance {
            conversation_id: window.conversation_id.clone(),
            target_index: window.target_index(),
            key_element: element,
            variant_id: variant.variant_id,
        },
    })
}

/// Checks the prompt has one history block line and one target slot on its
/// question line.
pub fn has_prompt_structure(text: &str) -> bool {
    let lines: Vec<&str> = text.lines().collect();
    let blocks = lines
        .iter()
        .filter(|l| l.starts_with("### ") && l.ends_with(" ###") && l.len() >= 8)
        .count();
    let Some(question) = lines.last() else {
        return false;
    };
    blocks == 1 && question.matches(" <").count() >= 1 && question.trim_end().ends_with(':')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::build_window;
    use crate::corpus::Utterance;

    fn window() -> DialogueWindow {
        let conv = Conversation::new(
            "friends",
            vec![
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
                    label: "sad".into(),
                },
            ],
        )
        .unwrap();
        build_window(&conv, 1, 12).unwrap()
    }

    #[test]
    fn element_categories() {
        use Category::*;
        let expected = [
            MentalState,
            MentalState,
            MentalState,
            Event,
            Event,
            Event,
            Event,
            Event,
            Persona,
        ];
        for (e, c) in KeyElement::ALL.iter().zip(expected) {
            assert_eq!(e.category(), c, "{e}");
        }
        assert_eq!("xwant".parse::<KeyElement>().unwrap(), KeyElement::XWant);
        assert!("oFeel".parse::<KeyElement>().is_err());
    }

    #[test]
    fn oreact_variant_four() {
        let p = Prompter::default()
            .extraction_prompt(&window(), KeyElement::OReact)
            .unwrap();
        assert!(p.text.ends_with(
            r#"infer the reaction of potential listeners in <Speaker0:"What?"> in no more than ten words of output :"#
        ));
        assert!(has_prompt_structure(&p.text));
        assert_eq!(p.provenance.variant_id, 4);
    }

    #[test]
    fn xintent_phrase() {
        let p = Prompter::default()
            .extraction_prompt(&window(), KeyElement::XIntent)
            .unwrap();
        assert!(p.text.contains(r#"infer the intention of <Speaker0:"What?">"#));
    }

    #[test]
    fn oreact_variant_three() {
        let p = Prompter::default()
            .with_variant(3)
            .extraction_prompt(&window(), KeyElement::OReact)
            .unwrap();
        assert!(p.text.contains("infer the oReact of listeners in <"));
    }

    #[test]
    fn unknown_variant() {
        let err = Prompter::default()
            .with_variant(9)
            .extraction_prompt(&window(), KeyElement::OReact)
            .unwrap_err();
        assert!(matches!(err, Error::UnknownVariant(_)));
    }

    #[test]
    fn variant_without_constraint_or_preamble() {
        let mut registry = TemplateRegistry::builtin();
        let mut v = registry.variant(4).unwrap().clone();
        v.variant_id = 5;
        v.includes_length_constraint = false;
        v.includes_history_preamble = false;
        registry.insert_variant(v);
        let p = Prompter::new(registry)
            .with_variant(5)
            .extraction_prompt(&window(), KeyElement::OReact)
            .unwrap();
        assert!(p.text.ends_with(
            r#"Please use common sense to infer the reaction of potential listeners in <Speaker0:"What?"> :"#
        ));
    }

    #[test]
    fn injection_example() {
        let ex = Prompter::default()
            .injection_example(&window(), KeyElement::OReact, "Listener looks surprised and excited.")
            .unwrap();
        assert_eq!(ex.target_text, "Listener looks surprised and excited.");
        assert_eq!(ex.stage, 1);
        assert_eq!(ex.mask_boundary, ex.input_text.chars().count());
        assert!(matches!(
            Prompter::default().injection_example(&window(), KeyElement::OReact, " "),
            Err(Error::EmptyCharacteristic)
        ));
    }

    #[test]
    fn recognition_example() {
        let space = LabelSpace::builtin("iemocap").unwrap();
        let ex = Prompter::default()
            .recognition_example(&window(), &space, None, Some("sad"))
            .unwrap();
        assert_eq!(ex.target_text, "sad");
        assert_eq!(ex.stage, 2);
        assert_eq!(
            ex.input_text,
            "Now you are an assistant skilled in sentiment and emotion analysis.\n\
             The following conversation noted between '### ###' involves several speakers.\n\
             ### Speaker1:\"Okay, so big news.\" Speaker0:\"What?\" ###\n\
             Please select the emotional label of <Speaker0:\"What?\"> from <neutral, happy, sad, excited, angry, frustrated> :"
        );
        assert!(!ex.input_text.contains("reaction:"));

        let with = Prompter::default()
            .recognition_example(&window(), &space, Some(&["Listener smiles.".to_string()]), Some("sad"))
            .unwrap();
        assert!(with
            .input_text
            .contains("###\nThe listener's reaction: Listener smiles.\nPlease select"));

        assert!(Prompter::default()
            .recognition_example(&window(), &space, None, Some("bored"))
            .is_err());
    }

    #[test]
    fn speaker_id_example_hides_speaker() {
        let w = window();
        let conv = Conversation::new("friends", {
            let mut h = w.history.clone();
            h.push(w.target.clone());
            h
        })
        .unwrap();
        let ex = Prompter::default().speaker_id_example(&conv, &w).unwrap();
        assert_eq!(ex.target_text, "Speaker0");
        assert!(ex.input_text.contains("<\"What?\">"));
        assert!(ex.input_text.ends_with("from <Speaker1, Speaker0> :"));
    }

    #[test]
    fn example_jsonl_schema() {
        let ex = Prompter::default()
            .injection_example(&window(), KeyElement::OReact, "Surprised.")
            .unwrap();
        let json: serde_json::Value = serde_json::to_value(&ex).unwrap();
        assert_eq!(json["target"], "Surprised.");
        assert_eq!(json["stage"], 1);
        assert_eq!(json["meta"]["key_element"], "oReact");
        let back: InstructionExample = serde_json::from_value(json).unwrap();
        assert_eq!(back, ex);
    }
}
