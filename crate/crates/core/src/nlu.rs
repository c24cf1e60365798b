//! Request understanding: few-shot prompting of a completion provider, a
//! keyword fallback, and canonicalization of generated slot labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{cosine_distance, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::frame::{Provenance, SemanticFrame};
use crate::http::{self, RetryPolicy};
use crate::ontology::{AspectValue, IntentKey, IntentOntology};
use crate::profile::IntentProfile;
use crate::text::tokenize;

/// Largest accepted cosine distance between a generated label and a slot.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.35;
pub const MAX_FEW_SHOT_EXAMPLES: usize = 16;

const PROMPT_HEADER: &str =
    "Extract the topic, the intent, the slots and their aspect values of each request as JSON.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexRequest {
    pub text: String,
    #[serde(default)]
    pub location: Option<String>,
    pub received_at: DateTime<Utc>,
}

impl ComplexRequest {
    pub fn new(
        text: impl Into<String>,
        location: Option<String>,
        received_at: DateTime<Utc>,
    ) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("request text is empty"));
        }
        Ok(Self {
            text,
            location: location.filter(|l| !l.trim().is_empty()),
            received_at,
        })
    }
}

/// The JSON object a completion must contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionFrame {
    pub topic: String,
    pub intent: String,
    #[serde(default)]
    pub slots: Vec<CompletionSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSlot {
    pub label: String,
    #[serde(default)]
    pub aspect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub request_text: String,
    pub frame: CompletionFrame,
}

impl FewShotExample {
    /// Checks that topic, intent and slot labels exist in `ontology`.
    pub fn validate(&self, ontology: &IntentOntology) -> Result<()> {
        let key = IntentKey::new(&self.frame.topic, &self.frame.intent);
        ontology.require_intent(&key)?;
        for slot in &self.frame.slots {
            let found = ontology
                .slots_for(&key)
                .any(|s| s.label.eq_ignore_ascii_case(slot.label.trim()));
            if !found {
                return Err(Error::Reference(format!(
                    "example slot {:?} is not a label under {key}",
                    slot.label
                )));
            }
        }
        Ok(())
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Serializes the examples followed by the target request with an empty
/// `FRAME:` for the model to fill in.
pub fn build_few_shot_prompt(examples: &[FewShotExample], request: &ComplexRequest) -> Result<String> {
    if examples.is_empty() {
        return Err(Error::validation("a few-shot prompt needs at least one example"));
    }
    let mut prompt = String::from(PROMPT_HEADER);
    prompt.push_str("\n\n");
    for ex in examples {
        prompt.push_str("REQUEST: ");
        prompt.push_str(&one_line(&ex.request_text));
        prompt.push_str("\nFRAME: ");
        prompt.push_str(&serde_json::to_string(&ex.frame).expect("frame serializes"));
        prompt.push_str("\n\n");
    }
    prompt.push_str("REQUEST: ");
    prompt.push_str(&one_line(&request.text));
    prompt.push_str("\nFRAME:");
    Ok(prompt)
}

/// Picks at most `max` examples, cycling over intents so every intent is
/// represented before any intent gets a second example.
pub fn select_few_shot_pool(examples: &[FewShotExample], max: usize) -> Vec<FewShotExample> {
    let mut groups: Vec<(String, Vec<&FewShotExample>)> = Vec::new();
    for ex in examples {
        let key = format!("{}/{}", ex.frame.topic, ex.frame.intent);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(ex),
            None => groups.push((key, vec![ex])),
        }
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < max {
        let mut took = false;
        for (_, g) in &groups {
            if let Some(ex) = g.get(round) {
                if out.len() == max {
                    break;
                }
                out.push((*ex).clone());
                took = true;
            }
        }
        if !took {
            break;
        }
        round += 1;
    }
    out
}

/// Target request text of a prompt built by [`build_few_shot_prompt`].
pub fn prompt_target(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("REQUEST: "))
}

// ── completion providers ────────────────────────────────────────────────

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompletionConfig {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 256,
        }
    }
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

/// Client for `POST /complete`.
pub struct HttpCompletion {
    endpoint: String,
    config: CompletionConfig,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpCompletion {
    pub fn new(base_url: &str, config: CompletionConfig) -> Self {
        Self {
            endpoint: format!("{}/complete", base_url.trim_end_matches('/')),
            config,
            client: http::client(Duration::from_secs(60)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl CompletionProvider for HttpCompletion {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = CompleteRequest {
            prompt,
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let resp: CompleteResponse = self
            .retry
            .run(|| http::post_json(&self.client, &self.endpoint, &body))?;
        Ok(resp.text)
    }
}

/// Offline provider answering from a map of request-text hash to completion.
#[derive(Debug, Clone, Default)]
pub struct FixtureCompletion {
    completions: HashMap<String, String>,
}

impl FixtureCompletion {
    /// Hex SHA-256 of the whitespace-normalized request text.
    pub fn key(request_text: &str) -> String {
        hex::encode(Sha256::digest(one_line(request_text).as_bytes()))
    }

    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, request_text: &str, completion: impl Into<String>) {
        self.completions
            .insert(Self::key(request_text), completion.into());
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let completions: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), &e))?;
        Ok(Self { completions })
    }

    pub fn to_json_string(&self) -> String {
        let sorted: BTreeMap<_, _> = self.completions.iter().collect();
        serde_json::to_string_pretty(&sorted).expect("fixture serializes")
    }
}

impl CompletionProvider for FixtureCompletion {
    fn complete(&self, prompt: &str) -> Result<String> {
        let target = prompt_target(prompt).unwrap_or(prompt);
        self.completions
            .get(&Self::key(target))
            .cloned()
            .ok_or_else(|| Error::Transport {
                attempts: 1,
                message: "no fixture completion for request".into(),
            })
    }
}

// ── canonicalization ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum Canonical {
    Match { slot_id: String, distance: f64 },
    /// No slot within the threshold. Carries the closest slot, if any, for
    /// curation.
    NewCandidate {
        label: String,
        nearest: Option<(String, f64)>,
    },
}

/// Maps a generated label onto the closest slot of `key` by cosine distance.
pub fn canonicalize_slot(
    label: &str,
    key: &IntentKey,
    ontology: &IntentOntology,
    embedder: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<Canonical> {
    ontology.require_intent(key)?;
    let wanted = label.trim();
    if let Some(slot) = ontology
        .slots_for(key)
        .find(|s| s.label.trim().eq_ignore_ascii_case(wanted))
    {
        return Ok(Canonical::Match {
            slot_id: slot.id.clone(),
            distance: 0.0,
        });
    }
    let slots: Vec<_> = ontology.slots_for(key).collect();
    let labels: Vec<String> = slots.iter().map(|s| s.label.clone()).collect();
    let query = embedder.embed(wanted)?;
    let vectors = embedder.embed_batch(&labels)?;
    let mut best: Option<(String, f64)> = None;
    for (slot, v) in slots.iter().zip(&vectors) {
        let d = cosine_distance(&query, v)?;
        let better = match &best {
            None => true,
            Some((id, bd)) => d < *bd || (d == *bd && slot.id < *id),
        };
        if better {
            best = Some((slot.id.clone(), d));
        }
    }
    Ok(match best {
        Some((slot_id, distance)) if distance <= threshold => Canonical::Match { slot_id, distance },
        nearest => Canonical::NewCandidate {
            label: wanted.to_string(),
            nearest,
        },
    })
}

/// Pulls the first JSON object out of a completion.
pub fn parse_completion(text: &str) -> Option<CompletionFrame> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&text[start..=end]).ok()
}

fn resolve_intent(ontology: &IntentOntology, topic: &str, intent: &str) -> Option<IntentKey> {
    let topic = topic.trim();
    let intent = intent.trim();
    let topic_matches = |id: &str| {
        ontology
            .topic(id)
            .is_some_and(|t| t.id.eq_ignore_ascii_case(topic) || t.label.eq_ignore_ascii_case(topic))
    };
    let candidates: Vec<IntentKey> = ontology
        .intents
        .iter()
        .filter(|i| i.id.eq_ignore_ascii_case(intent) || i.label.eq_ignore_ascii_case(intent))
        .map(|i| IntentKey::new(&i.topic_id, &i.id))
        .collect();
    if let Some(k) = candidates.iter().find(|k| topic_matches(&k.topic_id)) {
        return Some(k.clone());
    }
    match candidates.as_slice() {
        [only] => Some(only.clone()),
        _ => None,
    }
}

/// Keyword extraction used when no usable completion is available: the
/// intent whose label shares most tokens with the request, and every slot of
/// that intent whose label occurs verbatim in the request.
pub fn rule_based_frame(request: &ComplexRequest, ontology: &IntentOntology) -> Result<SemanticFrame> {
    let tokens: HashSet<String> = tokenize(&request.text).into_iter().collect();
    let mut best: Option<(usize, IntentKey)> = None;
    for intent in &ontology.intents {
        let overlap = tokenize(&intent.label)
            .into_iter()
            .collect::<HashSet<_>>()
            .intersection(&tokens)
            .count();
        if overlap > 0 && best.as_ref().is_none_or(|(b, _)| overlap > *b) {
            best = Some((overlap, IntentKey::new(&intent.topic_id, &intent.id)));
        }
    }
    let Some((_, key)) = best else {
        return Err(Error::UnknownIntent {
            raw: request.text.clone(),
        });
    };
    let lowered = request.text.to_lowercase();
    let mut frame = SemanticFrame::new(&key);
    frame.provenance = Provenance::Fallback;
    frame.location = request.location.clone();
    for slot in ontology.slots_for(&key) {
        let label = slot.label.trim().to_lowercase();
        if let Some(pos) = lowered.find(&label) {
            let span = request.text.get(pos..pos + label.len()).unwrap_or(&label);
            frame.mention(&slot.id, AspectValue::new(&slot.id, span).ok());
        }
    }
    Ok(frame)
}

/// The request understanding unit.
pub struct Nlu {
    examples: Vec<FewShotExample>,
    completion: Arc<dyn CompletionProvider>,
    embedder: Arc<dyn EmbeddingProvider>,
    match_threshold: f64,
}

impl Nlu {
    pub fn new(
        examples: Vec<FewShotExample>,
        completion: Arc<dyn CompletionProvider>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Self {
        Self {
            examples: select_few_shot_pool(&examples, MAX_FEW_SHOT_EXAMPLES),
            completion,
            embedder,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
        }
    }

    pub fn with_match_threshold(mut self, threshold: f64) -> Self {
        self.match_threshold = threshold;
        self
    }

    pub fn examples(&self) -> &[FewShotExample] {
        &self.examples
    }

    /// Produces a frame for `request` with its initial completion score.
    pub fn parse_frame(
        &self,
        request: &ComplexRequest,
        ontology: &IntentOntology,
        profile: &IntentProfile,
    ) -> Result<SemanticFrame> {
        if ontology.is_empty() {
            return Err(Error::validation("cannot parse requests against an empty ontology"));
        }
        let mut frame = match self.lm_frame(request, ontology)? {
            Some(frame) => frame,
            None => rule_based_frame(request, ontology)?,
        };
        frame.ics = profile.intent_completion_score(ontology, &frame, &[])?;
        Ok(frame)
    }

    fn lm_frame(
        &self,
        request: &ComplexRequest,
        ontology: &IntentOntology,
    ) -> Result<Option<SemanticFrame>> {
        if self.examples.is_empty() {
            return Ok(None);
        }
        let prompt = build_few_shot_prompt(&self.examples, request)?;
        let raw = match self.completion.complete(&prompt) {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!("completion failed, using keyword fallback: {e}");
                return Ok(None);
            }
        };
        let Some(parsed) = parse_completion(&raw) else {
            log::warn!("completion is not a frame object, using keyword fallback");
            return Ok(None);
        };
        let key = resolve_intent(ontology, &parsed.topic, &parsed.intent)
            .ok_or(Error::UnknownIntent { raw: raw.clone() })?;
        let mut frame = SemanticFrame::new(&key);
        frame.provenance = Provenance::Lm;
        frame.location = request
            .location
            .clone()
            .or(parsed.location.filter(|l| !l.trim().is_empty()));
        for slot in &parsed.slots {
            match canonicalize_slot(&slot.label, &key, ontology, self.embedder.as_ref(), self.match_threshold)? {
                Canonical::Match { slot_id, .. } => {
                    let aspect = slot
                        .aspect
                        .as_deref()
                        .and_then(|a| AspectValue::new(&slot_id, a).ok());
                    frame.mention(slot_id, aspect);
                }
                Canonical::NewCandidate { label, .. } => {
                    if !frame.new_candidates.contains(&label) {
                        frame.new_candidates.push(label);
                    }
                }
            }
        }
        Ok(Some(frame))
    }
}
