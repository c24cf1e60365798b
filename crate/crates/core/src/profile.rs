//! Dynamic intent profile: per-slot interaction counts, the slot conditional
//! probabilities derived from them, the Intent Completion Score and the
//! threshold that stops the refinement loop.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SemanticFrame;
use crate::ontology::{IntentKey, IntentOntology};

/// Hard cap on refinement steps in one session.
pub const DEFAULT_MAX_STEPS: u32 = 6;

/// Laplace pseudo-count used while an intent still has unseen slots.
pub const LAPLACE_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, u64>", try_from = "BTreeMap<String, u64>")]
pub struct IntentProfile {
    counts: BTreeMap<IntentKey, BTreeMap<String, u64>>,
}

impl IntentProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, key: &IntentKey, slot_id: &str) -> u64 {
        self.counts
            .get(key)
            .and_then(|m| m.get(slot_id))
            .copied()
            .unwrap_or(0)
    }

    /// Increments each listed slot by one. Nothing is applied unless every
    /// slot resolves under `key`.
    pub fn record_interaction(
        &mut self,
        ontology: &IntentOntology,
        key: &IntentKey,
        slot_ids: &[String],
    ) -> Result<()> {
        ontology.require_intent(key)?;
        for slot_id in slot_ids {
            ontology.slot_of(key, slot_id)?;
        }
        let counts = self.counts.entry(key.clone()).or_default();
        for slot_id in slot_ids {
            *counts.entry(slot_id.clone()).or_default() += 1;
        }
        Ok(())
    }

    /// Drops all counts of one intent.
    /// A copy holding only the counts of `key`.
    pub fn restricted_to(&self, key: &IntentKey) -> Self {
        let mut out = Self::new();
        if let Some(c) = self.counts.get(key) {
            out.counts.insert(key.clone(), c.clone());
        }
        out
    }

    pub fn reset(&mut self, key: &IntentKey) {
        self.counts.remove(key);
    }

    /// `P(slot | intent, topic)` for every slot of `key`, in ontology order.
    ///
    /// Relative frequencies are used once every slot has been seen; while any
    /// slot still has a zero count, add-one smoothing keeps the distribution
    /// defined (uniform at cold start).
    pub fn distribution(&self, ontology: &IntentOntology, key: &IntentKey) -> Result<Vec<(String, f64)>> {
        ontology.require_intent(key)?;
        let counts: Vec<(String, u64)> = ontology
            .slots_for(key)
            .map(|s| (s.id.clone(), self.count(key, &s.id)))
            .collect();
        if counts.is_empty() {
            return Ok(Vec::new());
        }
        let total: u64 = counts.iter().map(|(_, c)| c).sum();
        let smooth = counts.iter().any(|(_, c)| *c == 0);
        let (alpha, denom) = if smooth {
            (LAPLACE_ALPHA, total as f64 + LAPLACE_ALPHA * counts.len() as f64)
        } else {
            (0.0, total as f64)
        };
        Ok(counts
            .into_iter()
            .map(|(id, c)| (id, (c as f64 + alpha) / denom))
            .collect())
    }

    pub fn slot_probability(
        &self,
        ontology: &IntentOntology,
        key: &IntentKey,
        slot_id: &str,
    ) -> Result<f64> {
        ontology.slot_of(key, slot_id)?;
        let dist = self.distribution(ontology, key)?;
        Ok(dist
            .into_iter()
            .find(|(id, _)| id == slot_id)
            .map(|(_, p)| p)
            .unwrap_or(0.0))
    }

    /// Sum of slot probabilities over the mentioned and the selected slots.
    ///
    /// Duplicates within either list are counted once. The two sets must be
    /// disjoint. The result is clamped to `[0, 1]`.
    pub fn intent_completion_score(
        &self,
        ontology: &IntentOntology,
        frame: &SemanticFrame,
        selected: &[String],
    ) -> Result<f64> {
        let key = frame.key();
        let mentioned: BTreeSet<&str> = frame
            .mentioned_slots
            .iter()
            .map(|m| m.slot_id.as_str())
            .collect();
        let selected: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
        if let Some(overlap) = mentioned.intersection(&selected).next() {
            return Err(Error::validation(format!(
                "slot {overlap:?} is both mentioned and selected"
            )));
        }
        for id in mentioned.iter().chain(selected.iter()) {
            ontology.slot_of(&key, id)?;
        }
        let dist = self.distribution(ontology, &key)?;
        let score: f64 = dist
            .iter()
            .filter(|(id, _)| mentioned.contains(id.as_str()) || selected.contains(id.as_str()))
            .map(|(_, p)| p)
            .sum();
        if !(0.0..=1.0).contains(&score) {
            log::warn!("completion score {score} for {key} clamped to [0, 1]");
        }
        Ok(score.clamp(0.0, 1.0))
    }

    /// Mean plus population standard deviation of the slot distribution.
    pub fn stopping_threshold(&self, ontology: &IntentOntology, key: &IntentKey) -> Result<f64> {
        let dist = self.distribution(ontology, key)?;
        if dist.is_empty() {
            return Err(Error::Reference(format!("intent {key} has no slots")));
        }
        let n = dist.len() as f64;
        // The probabilities sum to one, so the mean is exactly 1/n.
        let mean = 1.0 / n;
        let var = dist.iter().map(|(_, p)| (p - mean).powi(2)).sum::<f64>() / n;
        Ok(mean + var.sqrt())
    }

    /// Checks every stored count against the ontology.
    pub fn validate(&self, ontology: &IntentOntology) -> Result<()> {
        for (key, counts) in &self.counts {
            for slot_id in counts.keys() {
                ontology.slot_of(key, slot_id)?;
            }
        }
        Ok(())
    }

    // ── persistence ─────────────────────────────────────────────────────

    fn to_flat(&self) -> BTreeMap<String, u64> {
        self.counts
            .iter()
            .flat_map(|(key, m)| {
                m.iter()
                    .map(move |(slot, c)| (format!("{}/{}/{}", key.topic_id, key.intent_id, slot), *c))
            })
            .collect()
    }

    fn from_flat(flat: BTreeMap<String, u64>, context: &str) -> Result<Self> {
        let mut profile = Self::new();
        for (path, count) in flat {
            let parts: Vec<&str> = path.split('/').collect();
            let [topic, intent, slot] = parts[..] else {
                return Err(Error::validation(format!(
                    "{context}: profile key {path:?} is not <topic>/<intent>/<slot>"
                )));
            };
            profile
                .counts
                .entry(IntentKey::new(topic, intent))
                .or_default()
                .insert(slot.to_string(), count);
        }
        Ok(profile)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("profile serializes")
    }

    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        let flat: BTreeMap<String, u64> =
            serde_json::from_str(text).map_err(|e| Error::json(context, &e))?;
        Self::from_flat(flat, context)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string() + "\n").map_err(|e| Error::io(path, e))
    }
}

impl From<IntentProfile> for BTreeMap<String, u64> {
    fn from(p: IntentProfile) -> Self {
        p.to_flat()
    }
}

impl TryFrom<BTreeMap<String, u64>> for IntentProfile {
    type Error = Error;

    fn try_from(flat: BTreeMap<String, u64>) -> Result<Self> {
        Self::from_flat(flat, "profile")
    }
}

pub fn should_continue(ics: f64, threshold: f64, step: u32, max_steps: u32) -> bool {
    ics <= threshold && step < max_steps
}

/// A profile shared between sessions. Writers hold the lock for one whole
/// update, so readers always see a normalized state.
#[derive(Debug, Default)]
pub struct SharedProfile {
    inner: RwLock<IntentProfile>,
}

impl SharedProfile {
    pub fn new(profile: IntentProfile) -> Self {
        Self {
            inner: RwLock::new(profile),
        }
    }

    pub fn snapshot(&self) -> IntentProfile {
        self.inner.read().clone()
    }

    pub fn read<R>(&self, f: impl FnOnce(&IntentProfile) -> R) -> R {
        f(&self.inner.read())
    }

    pub fn record_interaction(
        &self,
        ontology: &IntentOntology,
        key: &IntentKey,
        slot_ids: &[String],
    ) -> Result<()> {
        self.inner.write().record_interaction(ontology, key, slot_ids)
    }
}
