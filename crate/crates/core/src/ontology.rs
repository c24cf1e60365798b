//! The static intent ontology: topics, the intents under each topic and the
//! slots describing each intent.
//!
//! The ontology is a three level containment graph. Every slot belongs to
//! exactly one (topic, intent) pair, and every intent to exactly one topic.
//! Slot ids are unique across the whole ontology so that a slot id alone is
//! enough to address an arm, a profile counter or a log entry.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub id: String,
    pub topic_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub id: String,
    pub topic_id: String,
    pub intent_id: String,
    /// Canonical label, e.g. "access to parking".
    pub label: String,
    /// Set once a human has reviewed the slot.
    #[serde(default)]
    pub curated: bool,
}

/// A concrete restriction on a slot as it appeared in a request. The
/// normalized form is lowercased with whitespace collapsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectValue {
    pub slot_id: String,
    pub raw_span: String,
    pub normalized: String,
}

impl AspectValue {
    pub fn new(slot_id: impl Into<String>, raw_span: impl Into<String>) -> Result<Self> {
        let raw_span = raw_span.into();
        let normalized = raw_span.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if normalized.is_empty() {
            return Err(Error::validation("aspect value span is empty"));
        }
        Ok(Self {
            slot_id: slot_id.into(),
            raw_span,
            normalized,
        })
    }
}

/// Addresses one (topic, intent) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IntentKey {
    pub topic_id: String,
    pub intent_id: String,
}

impl IntentKey {
    pub fn new(topic_id: impl Into<String>, intent_id: impl Into<String>) -> Self {
        Self {
            topic_id: topic_id.into(),
            intent_id: intent_id.into(),
        }
    }
}

impl fmt::Display for IntentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.topic_id, self.intent_id)
    }
}

#[derive(Debug, Default, Clone)]
struct Index {
    topics: HashMap<String, usize>,
    intents: HashMap<IntentKey, usize>,
    slots: HashMap<String, usize>,
    slots_by_intent: HashMap<IntentKey, Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IntentOntology {
    pub topics: Vec<Topic>,
    pub intents: Vec<Intent>,
    pub slots: Vec<Slot>,
    #[serde(skip)]
    version: u64,
    #[serde(skip)]
    index: Index,
}

impl PartialEq for IntentOntology {
    fn eq(&self, other: &Self) -> bool {
        self.topics == other.topics && self.intents == other.intents && self.slots == other.slots
    }
}

fn check_id(kind: &str, id: &str) -> Result<()> {
    if id.trim().is_empty() || id.contains('/') {
        return Err(Error::validation(format!(
            "{kind} id {id:?} must be non-empty and must not contain '/'"
        )));
    }
    Ok(())
}

impl IntentOntology {
    /// Builds and validates an ontology from its three collections.
    pub fn new(topics: Vec<Topic>, intents: Vec<Intent>, slots: Vec<Slot>) -> Result<Self> {
        let mut ontology = Self {
            topics,
            intents,
            slots,
            version: 0,
            index: Index::default(),
        };
        ontology.reindex()?;
        Ok(ontology)
    }

    fn reindex(&mut self) -> Result<()> {
        let mut index = Index::default();
        for (i, topic) in self.topics.iter().enumerate() {
            check_id("topic", &topic.id)?;
            if index.topics.insert(topic.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate topic id {:?}", topic.id)));
            }
        }
        for (i, intent) in self.intents.iter().enumerate() {
            check_id("intent", &intent.id)?;
            if !index.topics.contains_key(&intent.topic_id) {
                return Err(Error::Reference(format!(
                    "intent {:?} refers to unknown topic {:?}",
                    intent.id, intent.topic_id
                )));
            }
            let key = IntentKey::new(&intent.topic_id, &intent.id);
            if index.intents.insert(key.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate intent {key}")));
            }
            index.slots_by_intent.insert(key, Vec::new());
        }
        let mut labels = HashSet::new();
        for (i, slot) in self.slots.iter().enumerate() {
            check_id("slot", &slot.id)?;
            let key = IntentKey::new(&slot.topic_id, &slot.intent_id);
            let Some(members) = index.slots_by_intent.get_mut(&key) else {
                return Err(Error::Reference(format!(
                    "slot {:?} refers to unknown intent {key}",
                    slot.id
                )));
            };
            let label = slot.label.trim().to_lowercase();
            if label.is_empty() {
                return Err(Error::validation(format!("slot {:?} has an empty label", slot.id)));
            }
            if !labels.insert((key.clone(), label)) {
                return Err(Error::validation(format!(
                    "duplicate slot label {:?} under {key}",
                    slot.label
                )));
            }
            if index.slots.insert(slot.id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate slot id {:?}", slot.id)));
            }
            members.push(i);
        }
        self.index = index;
        Ok(())
    }

    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let mut ontology: IntentOntology =
            serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
        ontology.reindex()?;
        Ok(ontology)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("ontology serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Monotonic counter bumped by every mutation through [`Self::with_slot`].
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Returns a new ontology version containing `slot`.
    pub fn with_slot(&self, slot: Slot) -> Result<Self> {
        let mut next = Self {
            topics: self.topics.clone(),
            intents: self.intents.clone(),
            slots: self.slots.clone(),
            version: self.version + 1,
            index: Index::default(),
        };
        next.slots.push(slot);
        next.reindex()?;
        Ok(next)
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn topic(&self, id: &str) -> Option<&Topic> {
        self.index.topics.get(id).map(|&i| &self.topics[i])
    }

    pub fn intent(&self, key: &IntentKey) -> Option<&Intent> {
        self.index.intents.get(key).map(|&i| &self.intents[i])
    }

    pub fn require_intent(&self, key: &IntentKey) -> Result<&Intent> {
        self.intent(key)
            .ok_or_else(|| Error::Reference(format!("unknown intent {key}")))
    }

    pub fn slot(&self, id: &str) -> Option<&Slot> {
        self.index.slots.get(id).map(|&i| &self.slots[i])
    }

    /// Looks up `slot_id` and checks that it belongs to `key`.
    pub fn slot_of(&self, key: &IntentKey, slot_id: &str) -> Result<&Slot> {
        match self.slot(slot_id) {
            Some(slot) if slot.topic_id == key.topic_id && slot.intent_id == key.intent_id => {
                Ok(slot)
            }
            _ => Err(Error::Reference(format!("unknown slot {slot_id:?} under {key}"))),
        }
    }

    /// The slots of one intent, in file order.
    pub fn slots_for(&self, key: &IntentKey) -> impl Iterator<Item = &Slot> + '_ {
        self.index
            .slots_by_intent
            .get(key)
            .into_iter()
            .flatten()
            .map(|&i| &self.slots[i])
    }

    pub fn slot_ids_for(&self, key: &IntentKey) -> Vec<String> {
        self.slots_for(key).map(|s| s.id.clone()).collect()
    }

    pub fn intent_keys(&self) -> impl Iterator<Item = IntentKey> + '_ {
        self.intents
            .iter()
            .map(|i| IntentKey::new(&i.topic_id, &i.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::hiking;

    #[test]
    fn round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ontology.json");
        let ontology = hiking();
        ontology.save(&path).unwrap();
        let loaded = IntentOntology::load(&path).unwrap();
        assert_eq!(loaded, ontology);
        assert_eq!(loaded.slot_ids_for(&IntentKey::new("activity", "hike")).len(), 2);
    }

    #[test]
    fn malformed_file_reports_line() {
        let err = IntentOntology::from_json_str("{\n\"topics\": [\n}", "bad.json").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_ontology_is_valid() {
        let ontology =
            IntentOntology::from_json_str(r#"{"topics":[],"intents":[],"slots":[]}"#, "x").unwrap();
        assert!(ontology.is_empty());
        assert_eq!(ontology.intent_keys().count(), 0);
    }

    #[test]
    fn dangling_slot_reference_is_rejected() {
        let mut ontology = hiking();
        ontology.slots[0].intent_id = "camp".into();
        let err = IntentOntology::new(ontology.topics, ontology.intents, ontology.slots);
        assert!(matches!(err, Err(Error::Reference(_))));
    }

    #[test]
    fn duplicate_labels_under_one_intent_are_rejected() {
        let ontology = hiking();
        let dup = Slot {
            id: "parking2".into(),
            label: "Access to Parking".into(),
            ..ontology.slots[0].clone()
        };
        assert!(matches!(ontology.with_slot(dup), Err(Error::Validation(_))));
    }

    #[test]
    fn mutation_bumps_version() {
        let ontology = hiking();
        let next = ontology
            .with_slot(Slot {
                id: "length".into(),
                topic_id: "activity".into(),
                intent_id: "hike".into(),
                label: "trail length".into(),
                curated: false,
            })
            .unwrap();
        assert_eq!(next.version(), ontology.version() + 1);
        assert!(next.slot("length").is_some());
        assert!(ontology.slot("length").is_none());
    }

    #[test]
    fn slot_of_checks_membership() {
        let ontology = hiking();
        let key = IntentKey::new("activity", "hike");
        assert!(ontology.slot_of(&key, "parking").is_ok());
        assert!(ontology.slot_of(&IntentKey::new("activity", "camp"), "parking").is_err());
    }
}
