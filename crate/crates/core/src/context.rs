//! Historical context windows and their textual rendering.

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Utterance};
use crate::error::{Error, Result};

/// The target utterance plus up to `window_size` utterances preceding it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueWindow {
    pub conversation_id: String,
    pub target: Utterance,
    /// Oldest first.
    pub history: Vec<Utterance>,
    pub window_size: usize,
}

pub fn build_window(conversation: &Conversation, target_index: usize, window_size: usize) -> Result<DialogueWindow> {
    let len = conversation.len();
    if target_index >= len {
        return Err(Error::TargetOutOfRange {
            conversation_id: conversation.conversation_id.clone(),
            index: target_index,
            len,
        });
    }
    let start = target_index.saturating_sub(window_size);
    Ok(DialogueWindow {
        conversation_id: conversation.conversation_id.clone(),
        target: conversation.utterances[target_index].clone(),
        history: conversation.utterances[start..target_index].to_vec(),
        window_size,
    })
}

/// `Speaker0:"text"`; quotes inside the text are kept verbatim.
pub fn render_utterance(u: &Utterance) -> String {
    format!("{}:\"{}\"", u.speaker, u.text)
}

pub fn render_history(window: &DialogueWindow, include_target: bool) -> String {
    let mut parts: Vec<String> = window.history.iter().map(render_utterance).collect();
    if include_target {
        parts.push(render_utterance(&window.target));
    }
    parts.join(" ")
}

impl DialogueWindow {
    /// Standalone target form used inside `<...>` slots.
    pub fn render_target(&self) -> String {
        render_utterance(&self.target)
    }

    pub fn target_index(&self) -> usize {
        self.target.index
    }

    /// Window with the `n` oldest history utterances removed.
    pub fn without_oldest(&self, n: usize) -> DialogueWindow {
        DialogueWindow {
            history: self.history[n.min(self.history.len())..].to_vec(),
            ..self.clone()
        }
    }
}
