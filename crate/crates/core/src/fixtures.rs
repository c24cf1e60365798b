//! Small ontologies shared by unit tests.

use crate::ontology::{IntentOntology, Intent, Slot, Topic};

fn topic(id: &str) -> Topic {
    Topic {
        id: id.into(),
        label: id.into(),
    }
}

fn intent(topic: &str, id: &str, label: &str) -> Intent {
    Intent {
        id: id.into(),
        topic_id: topic.into(),
        label: label.into(),
    }
}

pub fn slot(topic: &str, intent: &str, id: &str, label: &str) -> Slot {
    Slot {
        id: id.into(),
        topic_id: topic.into(),
        intent_id: intent.into(),
        label: label.into(),
        curated: true,
    }
}

pub fn hiking() -> IntentOntology {
    IntentOntology::new(
        vec![topic("activity")],
        vec![intent("activity", "hike", "hike")],
        vec![
            slot("activity", "hike", "parking", "access to parking"),
            slot("activity", "hike", "scenery", "scenery"),
        ],
    )
    .unwrap()
}

pub fn four_slots() -> IntentOntology {
    IntentOntology::new(
        vec![topic("t")],
        vec![intent("t", "i", "intent")],
        ["a", "b", "c", "d"]
            .iter()
            .map(|s| slot("t", "i", s, &format!("slot {s}")))
            .collect(),
    )
    .unwrap()
}

pub fn single_slot() -> IntentOntology {
    IntentOntology::new(
        vec![topic("t")],
        vec![intent("t", "solo", "solo"), intent("t", "empty", "empty")],
        vec![slot("t", "solo", "only", "only slot")],
    )
    .unwrap()
}
