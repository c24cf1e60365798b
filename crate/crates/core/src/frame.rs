use serde::{Deserialize, Serialize};

use crate::ontology::{AspectValue, IntentKey};

/// Where a frame came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Parsed from a language-model completion.
    #[default]
    Lm,
    /// Produced by the keyword fallback after the provider failed.
    Fallback,
    /// Built directly, e.g. by the simulator.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionedSlot {
    pub slot_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect: Option<AspectValue>,
}

/// Structured form of a complex request: topic, intent, mentioned slots and
/// the current completion score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFrame {
    pub topic_id: String,
    pub intent_id: String,
    pub mentioned_slots: Vec<MentionedSlot>,
    pub ics: f64,
    #[serde(default)]
    pub location: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
    /// Generated slot labels that matched nothing in the ontology.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub new_candidates: Vec<String>,
}

impl SemanticFrame {
    pub fn new(key: &IntentKey) -> Self {
        Self {
            topic_id: key.topic_id.clone(),
            intent_id: key.intent_id.clone(),
            mentioned_slots: Vec::new(),
            ics: 0.0,
            location: None,
            provenance: Provenance::Synthetic,
            new_candidates: Vec::new(),
        }
    }

    pub fn key(&self) -> IntentKey {
        IntentKey::new(&self.topic_id, &self.intent_id)
    }

    /// Adds a mention unless the slot is already present.
    pub fn mention(&mut self, slot_id: impl Into<String>, aspect: Option<AspectValue>) {
        let slot_id = slot_id.into();
        if !self.mentions(&slot_id) {
            self.mentioned_slots.push(MentionedSlot { slot_id, aspect });
        }
    }

    pub fn mentions(&self, slot_id: &str) -> bool {
        self.mentioned_slots.iter().any(|m| m.slot_id == slot_id)
    }

    pub fn mentioned_ids(&self) -> Vec<String> {
        self.mentioned_slots.iter().map(|m| m.slot_id.clone()).collect()
    }
}
