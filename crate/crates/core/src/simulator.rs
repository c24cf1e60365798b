//! Synthetic users, a synthetic web, and a driver that runs the refinement
//! loop against them.
//!
//! Each intent gets a user with Dirichlet slot preferences and a sparse,
//! symmetric coupling graph between slots. Given the active slots `A` of a
//! session, the user selects a shown slot `j` with probability
//! `(1 - noise) * q_j + noise / 2`, where `q_j` is proportional to
//! `p_j * exp(coupling * |partners(j) ∩ A|)` over the slots not yet active.
//! With zero coupling the context carries no information and the most popular
//! slots are optimal.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::bandit::{ContextScheme, PolicyConfig, PolicyKind};
use crate::embedding::HashEmbedding;
use crate::error::{Error, Result};
use crate::frame::{Provenance, SemanticFrame};
use crate::nlu::{ComplexRequest, FixtureCompletion, Nlu};
use crate::ontology::{Intent, IntentKey, IntentOntology, Slot, Topic};
use crate::ope::{Environment, LoggedDecision};
use crate::profile::{SharedProfile, IntentProfile};
use crate::qpp::{breadth_of, QppRequest};
use crate::retrieval::{
    build_corpus, read_corpus, CorpusConfig, CorpusEntry, Document, LexicalRanker, SearchProvider,
};
use crate::rng::{derived_rng, fnv1a};
use crate::session::{Clock, Engine, EngineConfig, IdSource, InteractionRecord, Providers, SessionState};
use crate::text::tokenize;

const STREAM_ONTOLOGY: u64 = 1;
const STREAM_USERS: u64 = 2;
const STREAM_REQUEST: u64 = 3;
const STREAM_FEEDBACK: u64 = 4;
const STREAM_SEARCH: u64 = 5;
const STREAM_LEXICON: u64 = 6;

const WORDS_PER_SLOT: usize = 3;
const WORDS_PER_INTENT: usize = 5;
const FILLER_WORDS: usize = 400;
const SNIPPET_WORDS: usize = 16;
const EMBED_DIM: usize = 16;

/// Coupling strength of the strongly context-dependent setting.
pub const COUPLING_HIGH: f64 = 6.0;

/// Intents of the two default topics with their share of requests.
const DEFAULT_INTENTS: &[(&str, &str, f64)] = &[
    ("service", "restaurants", 12.0),
    ("service", "electrician", 11.0),
    ("service", "landscaping", 13.0),
    ("service", "appliance", 2.0),
    ("service", "hotel", 16.0),
    ("service", "handyman", 2.0),
    ("service", "cleaners", 4.0),
    ("service", "remodeling", 3.0),
    ("activity", "hike", 10.0),
    ("activity", "general", 8.0),
    ("activity", "spring break", 5.0),
    ("activity", "campground", 6.0),
    ("activity", "daytrip", 2.0),
    ("activity", "summercamp", 6.0),
];

const DEFAULT_LOCATIONS: &[&str] = &["San Francisco", "Seattle", "Austin", "Denver"];

const TEMPLATES: &[&str] = &[
    "looking for a {intent} near {loc} with {slots}",
    "{intent} in {loc} that has {slots}",
    "need a good {intent} around {loc}, ideally {slots}",
    "any {intent} close to {loc} offering {slots}",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "kl"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "x"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_intents: usize,
    pub n_slots_per_intent: usize,
    /// Upper bound on simulated requests.
    pub n_requests: usize,
    /// Stop once this many feedback rounds have been simulated.
    pub max_interactions: Option<usize>,
    pub coupling: f64,
    pub noise: f64,
    pub slate_size: usize,
    pub dirichlet_alpha: f64,
    /// Coupling partners drawn per slot.
    pub partners: usize,
    pub min_mentions: usize,
    pub max_mentions: usize,
    pub policy: PolicyKind,
    pub scheme: ContextScheme,
    pub locations: Vec<String>,
    /// Documents the synthetic search engine returns per query.
    pub docs_per_query: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_intents: DEFAULT_INTENTS.len(),
            n_slots_per_intent: 20,
            n_requests: 1000,
            max_interactions: None,
            coupling: COUPLING_HIGH,
            noise: 0.05,
            slate_size: 3,
            dirichlet_alpha: 0.3,
            partners: 2,
            min_mentions: 1,
            max_mentions: 5,
            policy: PolicyKind::AdaptiveActiveGreedy,
            scheme: ContextScheme::Method1,
            locations: DEFAULT_LOCATIONS.iter().map(|s| s.to_string()).collect(),
            docs_per_query: 20,
        }
    }
}

impl SimConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("{key}: cannot parse {value:?}")))
        }
        match key.trim() {
            "seed" => self.seed = num(key, value)?,
            "n_intents" => self.n_intents = num(key, value)?,
            "n_slots_per_intent" => self.n_slots_per_intent = num(key, value)?,
            "n_requests" => self.n_requests = num(key, value)?,
            "max_interactions" => self.max_interactions = Some(num(key, value)?),
            "coupling" => self.coupling = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "slate_size" => self.slate_size = num(key, value)?,
            "dirichlet_alpha" => self.dirichlet_alpha = num(key, value)?,
            "partners" => self.partners = num(key, value)?,
            "min_mentions" => self.min_mentions = num(key, value)?,
            "max_mentions" => self.max_mentions = num(key, value)?,
            "docs_per_query" => self.docs_per_query = num(key, value)?,
            "policy" => {
                self.policy = PolicyKind::parse(value.trim())
                    .ok_or_else(|| Error::validation(format!("unknown policy {value:?}")))?
            }
            "scheme" => {
                self.scheme = ContextScheme::parse(value.trim())
                    .ok_or_else(|| Error::validation(format!("unknown context scheme {value:?}")))?
            }
            "locations" => {
                self.locations = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            other => return Err(Error::validation(format!("unknown simulator key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: "simulator overrides".into(),
                line: n + 1,
                column: 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(m.to_string()));
        if self.n_intents == 0 || self.n_slots_per_intent == 0 {
            return fail("need at least one intent and one slot");
        }
        if self.slate_size == 0 {
            return fail("slate size must be positive");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail("noise must lie in [0, 1)");
        }
        if self.dirichlet_alpha.is_nan() || self.dirichlet_alpha <= 0.0 || !self.coupling.is_finite() {
            return fail("dirichlet_alpha must be positive and coupling finite");
        }
        if self.min_mentions == 0 || self.min_mentions > self.max_mentions {
            return fail("need 1 <= min_mentions <= max_mentions");
        }
        if self.locations.is_empty() {
            return fail("need at least one location");
        }
        Ok(())
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for i in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("non-empty"));
        w.push_str(VOWELS.choose(rng).expect("non-empty"));
        if i + 1 == syllables {
            w.push_str(CODAS.choose(rng).expect("non-empty"));
        }
    }
    w
}

/// Draws words not seen before.
struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn next(&mut self) -> String {
        loop {
            let w = pseudo_word(&mut self.rng);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn slug(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join("_")
}

/// The synthetic ontology: the default intents first, then generated ones,
/// each with `n_slots_per_intent` single-word pseudo-word slots.
pub fn generate_ontology(config: &SimConfig) -> Result<IntentOntology> {
    let mut words = WordSource {
        rng: derived_rng(config.seed, &[STREAM_ONTOLOGY]),
        used: reserved_words(),
    };
    let mut topics: Vec<Topic> = Vec::new();
    let mut intents = Vec::new();
    let mut slots = Vec::new();
    for i in 0..config.n_intents {
        let (topic, label) = match DEFAULT_INTENTS.get(i) {
            Some((t, l, _)) => (t.to_string(), l.to_string()),
            None => {
                let t = if i % 2 == 0 { "service" } else { "activity" };
                (t.to_string(), words.next())
            }
        };
        if !topics.iter().any(|t| t.id == topic) {
            topics.push(Topic {
                id: topic.clone(),
                label: topic.clone(),
            });
        }
        let intent_id = slug(&label);
        for j in 0..config.n_slots_per_intent {
            slots.push(Slot {
                id: format!("{intent_id}.s{j:02}"),
                topic_id: topic.clone(),
                intent_id: intent_id.clone(),
                label: words.next(),
                curated: true,
            });
        }
        intents.push(Intent {
            id: intent_id,
            topic_id: topic,
            label,
        });
    }
    IntentOntology::new(topics, intents, slots)
}

/// Words the generator must not produce: template words, intent labels and
/// locations.
fn reserved_words() -> HashSet<String> {
    let mut set: HashSet<String> = TEMPLATES.iter().flat_map(|t| tokenize(t)).collect();
    set.extend(DEFAULT_INTENTS.iter().flat_map(|(t, l, _)| tokenize(t).into_iter().chain(tokenize(l))));
    set.extend(DEFAULT_LOCATIONS.iter().flat_map(|l| tokenize(l)));
    set.extend(["and", "near", "with", "in"].map(String::from));
    set
}

/// A user population for one intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub key: IntentKey,
    pub slots: Vec<String>,
    pub preferences: Vec<f64>,
    /// Symmetric coupling graph over slot positions.
    pub partners: Vec<Vec<usize>>,
    pub coupling: f64,
    pub noise: f64,
}

impl SyntheticUser {
    pub fn generate(key: IntentKey, slots: Vec<String>, config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = slots.len();
        let gamma = Gamma::new(config.dirichlet_alpha, 1.0)
            .map_err(|e| Error::validation(format!("dirichlet alpha: {e}")))?;
        let mut preferences: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-12)).collect();
        let total: f64 = preferences.iter().sum();
        preferences.iter_mut().for_each(|p| *p /= total);
        let mut partners = vec![Vec::new(); n];
        if n > 1 {
            for a in 0..n {
                for _ in 0..config.partners {
                    let mut b = rng.random_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    if !partners[a].contains(&b) {
                        partners[a].push(b);
                        partners[b].push(a);
                    }
                }
            }
        }
        for p in &mut partners {
            p.sort_unstable();
        }
        Ok(Self {
            key,
            slots,
            preferences,
            partners,
            coupling: config.coupling,
            noise: config.noise,
        })
    }

    pub fn position(&self, slot_id: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == slot_id)
    }

    fn positions(&self, ids: &[String]) -> Vec<usize> {
        ids.iter().filter_map(|s| self.position(s)).collect()
    }

    /// Unnormalized appeal of every slot outside `active`.
    fn appeal(&self, active: &[usize]) -> Vec<f64> {
        (0..self.slots.len())
            .map(|j| {
                if active.contains(&j) {
                    0.0
                } else {
                    let links = self.partners[j].iter().filter(|b| active.contains(b)).count();
                    self.preferences[j] * (self.coupling * links as f64).exp()
                }
            })
            .collect()
    }

    /// Probability that the user selects `slot` when shown it while the
    /// slots in `active` are already part of the request.
    pub fn selection_probability(&self, slot: &str, active: &[String]) -> f64 {
        let Some(j) = self.position(slot) else {
            return 0.0;
        };
        let active = self.positions(active);
        if active.contains(&j) {
            return 0.0;
        }
        let appeal = self.appeal(&active);
        let total: f64 = appeal.iter().sum();
        let q = if total > 0.0 { appeal[j] / total } else { 0.0 };
        (1.0 - self.noise) * q + self.noise / 2.0
    }

    /// Draws `count` distinct mentioned slots, each from the coupled
    /// preferences given the ones drawn before.
    pub fn draw_mentions(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut active: Vec<usize> = Vec::new();
        while active.len() < count.min(self.slots.len()) {
            let appeal = self.appeal(&active);
            let mut draw = rng.random::<f64>() * appeal.iter().sum::<f64>();
            let mut pick = appeal.iter().rposition(|a| *a > 0.0).expect("a slot remains");
            for (j, a) in appeal.iter().enumerate() {
                if *a > 0.0 && draw < *a {
                    pick = j;
                    break;
                }
                draw -= a;
            }
            active.push(pick);
        }
        active.into_iter().map(|j| self.slots[j].clone()).collect()
    }

    /// Bernoulli feedback on a slate.
    pub fn respond(&self, shown: &[String], active: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
        shown
            .iter()
            .filter(|s| rng.random::<f64>() < self.selection_probability(s, active))
            .cloned()
            .collect()
    }

    /// The `k` slots of `eligible` the user is most likely to select.
    pub fn best_slate(&self, eligible: &[String], active: &[String], k: usize) -> Vec<String> {
        let mut scored: Vec<(f64, &String)> = eligible
            .iter()
            .map(|s| (self.selection_probability(s, active), s))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(k).map(|(_, s)| s.clone()).collect()
    }
}

/// Words the synthetic web uses for each intent and slot.
#[derive(Debug, Clone, Default)]
struct Lexicon {
    intent_words: HashMap<String, Vec<String>>,
    slot_words: HashMap<String, Vec<String>>,
    /// Words shared by coupled slots; they appear in every title of both.
    edge_words: HashMap<String, Vec<String>>,
    /// Slot label or intent label token to its id.
    by_token: HashMap<String, Term>,
    filler: Vec<String>,
}

#[derive(Debug, Clone)]
enum Term {
    Intent(String),
    Slot(String, String),
}

impl Lexicon {
    fn build(ontology: &IntentOntology, users: &BTreeMap<IntentKey, SyntheticUser>, seed: u64) -> Self {
        let mut used = reserved_words();
        used.extend(ontology.slots.iter().map(|s| s.label.clone()));
        let mut words = WordSource {
            rng: derived_rng(seed, &[STREAM_LEXICON]),
            used,
        };
        let mut lex = Lexicon::default();
        for intent in &ontology.intents {
            let ws = (0..WORDS_PER_INTENT).map(|_| words.next()).collect();
            lex.intent_words.insert(intent.id.clone(), ws);
            for t in tokenize(&intent.label) {
                lex.by_token.insert(t, Term::Intent(intent.id.clone()));
            }
        }
        for slot in &ontology.slots {
            let ws = (0..WORDS_PER_SLOT).map(|_| words.next()).collect();
            lex.slot_words.insert(slot.id.clone(), ws);
            lex.by_token
                .insert(slot.label.clone(), Term::Slot(slot.intent_id.clone(), slot.id.clone()));
        }
        lex.filler = (0..FILLER_WORDS).map(|_| words.next()).collect();
        // Coupled slots share a word, so their neighbourhoods overlap.
        for user in users.values() {
            for (j, ps) in user.partners.iter().enumerate() {
                for &p in ps.iter().filter(|p| **p > j) {
                    let shared = words.next();
                    for id in [&user.slots[j], &user.slots[p]] {
                        lex.edge_words.entry(id.clone()).or_default().push(shared.clone());
                    }
                }
            }
        }
        lex
    }
}

/// A deterministic search engine over the synthetic vocabulary. Documents
/// for a query talk about the intents and slots it names, using their
/// associated words, mixed with filler.
pub struct SyntheticSearch {
    lexicon: Lexicon,
    ontology: Arc<IntentOntology>,
    docs_per_query: usize,
    seed: u64,
}

impl SyntheticSearch {
    fn document(&self, query: &str, i: usize) -> Document {
        let mut rng = derived_rng(self.seed, &[STREAM_SEARCH, fnv1a(query.as_bytes()), i as u64]);
        let tokens = tokenize(query);
        let mut intents = Vec::new();
        let mut slots = Vec::new();
        for t in &tokens {
            match self.lexicon.by_token.get(t) {
                Some(Term::Intent(id)) if !intents.contains(id) => intents.push(id.clone()),
                Some(Term::Slot(intent, id)) => {
                    if !intents.contains(intent) {
                        intents.push(intent.clone());
                    }
                    slots.push(id.clone());
                }
                _ => {}
            }
        }
        let label = |id: &str| self.ontology.slot(id).map(|s| s.label.clone()).unwrap_or_default();
        let intent_label = |id: &str| {
            self.ontology
                .intents
                .iter()
                .find(|x| x.id == id)
                .map(|x| x.label.clone())
                .unwrap_or_default()
        };
        let mut title: Vec<String> = slots.iter().map(|s| label(s)).collect();
        for s in &slots {
            title.extend(self.lexicon.edge_words.get(s).cloned().unwrap_or_default());
        }
        title.extend(intents.iter().map(|s| intent_label(s)));
        let mut snippet = Vec::with_capacity(SNIPPET_WORDS);
        for _ in 0..SNIPPET_WORDS {
            let r = rng.random::<f64>();
            let word = if r < 0.4 && !slots.is_empty() {
                let s = slots.choose(&mut rng).expect("non-empty");
                if rng.random::<f64>() < 0.3 {
                    label(s)
                } else {
                    self.lexicon.slot_words[s].choose(&mut rng).expect("non-empty").clone()
                }
            } else if r < 0.65 && !intents.is_empty() {
                let id = intents.choose(&mut rng).expect("non-empty");
                self.lexicon.intent_words[id].choose(&mut rng).expect("non-empty").clone()
            } else {
                self.lexicon.filler.choose(&mut rng).expect("non-empty").clone()
            };
            snippet.push(word);
        }
        Document {
            title: if title.is_empty() { query.to_string() } else { title.join(" ") },
            url: format!("https://sim.example/{:016x}/{i}", fnv1a(query.as_bytes())),
            snippet: snippet.join(" "),
        }
    }
}

impl SearchProvider for SyntheticSearch {
    fn search_raw(&self, query: &str, count: usize) -> Result<Vec<Document>> {
        Ok((0..count.min(self.docs_per_query)).map(|i| self.document(query, i)).collect())
    }
}

/// Ontology, users and synthetic web of one simulated world.
pub struct SimWorld {
    pub config: SimConfig,
    pub ontology: Arc<IntentOntology>,
    pub users: BTreeMap<IntentKey, SyntheticUser>,
    intent_weights: Vec<(IntentKey, f64)>,
    lexicon: Lexicon,
}

impl SimWorld {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let ontology = Arc::new(generate_ontology(&config)?);
        let mut rng = derived_rng(config.seed, &[STREAM_USERS]);
        let mut users = BTreeMap::new();
        let mut intent_weights = Vec::new();
        for (i, intent) in ontology.intents.iter().enumerate() {
            let key = IntentKey::new(&intent.topic_id, &intent.id);
            let user = SyntheticUser::generate(key.clone(), ontology.slot_ids_for(&key), &config, &mut rng)?;
            users.insert(key.clone(), user);
            intent_weights.push((key, DEFAULT_INTENTS.get(i).map_or(1.0, |d| d.2)));
        }
        let lexicon = Lexicon::build(&ontology, &users, config.seed);
        Ok(Self {
            config,
            ontology,
            users,
            intent_weights,
            lexicon,
        })
    }

    pub fn user(&self, key: &IntentKey) -> Result<&SyntheticUser> {
        self.users
            .get(key)
            .ok_or_else(|| Error::Reference(format!("no simulated user for {key}")))
    }

    pub fn search_provider(&self) -> SyntheticSearch {
        SyntheticSearch {
            lexicon: self.lexicon.clone(),
            ontology: self.ontology.clone(),
            docs_per_query: self.config.docs_per_query,
            seed: self.config.seed,
        }
    }

    /// An engine over this world with a fresh profile, a manual clock and
    /// sequential session ids.
    pub fn engine(&self, policy: PolicyConfig) -> Engine {
        let embedder = Arc::new(HashEmbedding::new(EMBED_DIM, self.config.seed));
        let providers = Providers {
            nlu: Nlu::new(Vec::new(), Arc::new(FixtureCompletion::new()), embedder.clone()),
            embedder,
            search: Arc::new(self.search_provider()),
            ranker: Arc::new(LexicalRanker),
            predictor: None,
        };
        let config = EngineConfig {
            slate_size: self.config.slate_size,
            scheme: self.config.scheme,
            ..EngineConfig::default()
        };
        let start = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date");
        Engine::new(
            self.ontology.clone(),
            Arc::new(SharedProfile::new(IntentProfile::new())),
            policy,
            providers,
            config,
        )
        .with_clock(Clock::manual(start))
        .with_ids(IdSource::sequential("sim-"))
    }

    /// The engine for the configured policy, seeded with the world seed.
    pub fn default_engine(&self) -> Engine {
        self.engine(PolicyConfig::new(self.config.policy).with_seed(self.config.seed))
    }

    /// Builds a corpus of `top_n` results per (location, intent, slot).
    pub fn corpus(&self, top_n: usize) -> Result<Vec<CorpusEntry>> {
        let mut buf = Vec::new();
        build_corpus(
            &self.ontology,
            &self.config.locations,
            &self.search_provider(),
            &mut buf,
            CorpusConfig {
                top_n,
                ..CorpusConfig::default()
            },
        )?;
        read_corpus(&String::from_utf8(buf).expect("corpus is utf-8"), "synthetic corpus")
    }

    /// Request number `i` of the stream: intent, mentions, location, text.
    pub fn request(&self, i: usize) -> Result<SimRequest> {
        let mut rng = derived_rng(self.config.seed, &[STREAM_REQUEST, i as u64]);
        let total: f64 = self.intent_weights.iter().map(|w| w.1).sum();
        let mut draw = rng.random::<f64>() * total;
        let mut key = self.intent_weights.last().expect("intents exist").0.clone();
        for (k, w) in &self.intent_weights {
            if draw < *w {
                key = k.clone();
                break;
            }
            draw -= w;
        }
        let user = self.user(&key)?;
        let count = rng.random_range(self.config.min_mentions..=self.config.max_mentions);
        let mentioned = user.draw_mentions(count, &mut rng);
        let location = self.config.locations.choose(&mut rng).expect("validated").clone();
        let template = TEMPLATES.choose(&mut rng).expect("non-empty");
        let labels = self.labels(&mentioned);
        let text = template
            .replace("{intent}", &self.ontology.require_intent(&key)?.label)
            .replace("{loc}", &location)
            .replace("{slots}", &join_labels(&labels));
        Ok(SimRequest {
            key,
            mentioned,
            location,
            text,
        })
    }

    fn labels(&self, ids: &[String]) -> Vec<String> {
        ids.iter()
            .map(|id| self.ontology.slot(id).map(|s| s.label.clone()).unwrap_or_else(|| id.clone()))
            .collect()
    }

    /// Runs requests through `engine` until `n_requests` are done or the
    /// interaction budget is used.
    pub fn run(&self, engine: &Engine, driver: Driver) -> Result<SimOutcome> {
        let mut out = SimOutcome::default();
        let budget = self.config.max_interactions.unwrap_or(usize::MAX);
        for i in 0..self.config.n_requests {
            if out.rewards.len() >= budget {
                break;
            }
            let req = self.request(i)?;
            let user = self.user(&req.key)?;
            let mut rng = derived_rng(self.config.seed, &[STREAM_FEEDBACK, i as u64]);
            engine.clock().advance(Duration::seconds(60));
            let request = ComplexRequest::new(&req.text, Some(req.location.clone()), engine.clock().now())?;
            let mut frame = SemanticFrame::new(&req.key);
            frame.provenance = Provenance::Synthetic;
            frame.location = Some(req.location.clone());
            for m in &req.mentioned {
                frame.mention(m.clone(), None);
            }
            let mut session = engine.start_with_frame(request, frame, self.config.scheme)?;
            while session.state == SessionState::Refining {
                if out.rewards.len() >= budget {
                    engine.abandon(&mut session, "interaction budget reached")?;
                    break;
                }
                let active = session.active_slots();
                if driver == Driver::Oracle {
                    let slate = user.best_slate(&session.eligible, &active, self.config.slate_size);
                    engine.replace_suggestions(&mut session, slate)?;
                }
                let shown = session.suggestions.clone();
                let selected = user.respond(&shown, &active, &mut rng);
                let rejected: Vec<String> = shown.iter().filter(|s| !selected.contains(s)).cloned().collect();
                engine.clock().advance(Duration::seconds(5));
                engine.apply_feedback(&mut session, &selected, &rejected)?;
                out.rewards.push(selected.len() as f64 / shown.len() as f64);
                out.expected_rewards.push(
                    shown.iter().map(|s| user.selection_probability(s, &active)).sum::<f64>() / shown.len() as f64,
                );
            }
            out.sessions.push(SimSession {
                id: session.id.clone(),
                key: req.key.clone(),
                request_text: req.text.clone(),
                location: req.location,
                mentioned: req.mentioned,
                selected: session.selected.clone(),
                steps: session.step,
            });
            out.records.append(&mut session.records);
        }
        Ok(out)
    }

    /// Original and refined request texts of simulated sessions. The refined
    /// text appends the labels of the selected slots.
    pub fn refine_request_corpus(&self, sessions: &[SimSession]) -> Result<(Vec<QppRequest>, Vec<QppRequest>)> {
        let mut originals = Vec::with_capacity(sessions.len());
        let mut refineds = Vec::with_capacity(sessions.len());
        for s in sessions {
            let intent = self.ontology.require_intent(&s.key)?.label.clone();
            let breadth = Some(breadth_of(s.mentioned.len()));
            let mut refined = s.request_text.clone();
            for label in self.labels(&s.selected) {
                refined.push(' ');
                refined.push_str(&label);
            }
            originals.push(QppRequest {
                text: s.request_text.clone(),
                intent: Some(intent.clone()),
                breadth,
            });
            refineds.push(QppRequest {
                text: refined,
                intent: Some(intent),
                breadth,
            });
        }
        Ok((originals, refineds))
    }

    /// A single-step environment over one intent for off-policy checks.
    pub fn environment(&self, key: &IntentKey, seed: u64) -> Result<SimEnvironment> {
        Ok(SimEnvironment {
            user: self.user(key)?.clone(),
            rng: derived_rng(seed, &[fnv1a(key.to_string().as_bytes())]),
            min_mentions: self.config.min_mentions,
            max_mentions: self.config.max_mentions,
            active: Vec::new(),
        })
    }
}

fn join_labels(labels: &[String]) -> String {
    match labels {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Who picks the slates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    /// The engine's bandit policy.
    Engine,
    /// The slots the simulated user is most likely to select.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRequest {
    pub key: IntentKey,
    pub mentioned: Vec<String>,
    pub location: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSession {
    pub id: String,
    pub key: IntentKey,
    pub request_text: String,
    pub location: String,
    pub mentioned: Vec<String>,
    pub selected: Vec<String>,
    pub steps: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub sessions: Vec<SimSession>,
    pub records: Vec<InteractionRecord>,
    /// Fraction of the slate selected, per feedback round.
    pub rewards: Vec<f64>,
    /// The user's probability of selecting each shown slot, averaged over
    /// the slate: the expectation of the matching entry of `rewards`.
    pub expected_rewards: Vec<f64>,
}

impl SimOutcome {
    /// Mean reward over the last `fraction` of the rounds.
    pub fn tail_mean(&self, fraction: f64) -> f64 {
        tail(&self.rewards, fraction)
    }

    /// Mean expected reward over the last `fraction` of the rounds.
    pub fn tail_expected(&self, fraction: f64) -> f64 {
        tail(&self.expected_rewards, fraction)
    }
}

fn tail(xs: &[f64], fraction: f64) -> f64 {
    let n = xs.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
    crate::stats::mean(&xs[n - take..])
}

/// One-slot decisions for a single intent: the context is the one-hot of
/// freshly drawn mentions, the arms are the other slots.
pub struct SimEnvironment {
    user: SyntheticUser,
    rng: ChaCha8Rng,
    min_mentions: usize,
    max_mentions: usize,
    active: Vec<String>,
}

impl SimEnvironment {
    /// `n` decisions logged by a uniformly random policy.
    pub fn uniform_logs(&mut self, n: usize) -> Vec<LoggedDecision> {
        (0..n)
            .map(|_| {
                let (context, eligible) = self.observe();
                let pick = self.rng.random_range(0..eligible.len());
                let action = eligible[pick].clone();
                LoggedDecision {
                    context,
                    reward: self.reward(&action),
                    propensity: 1.0 / eligible.len() as f64,
                    action,
                    eligible,
                }
            })
            .collect()
    }

    pub fn slots(&self) -> &[String] {
        &self.user.slots
    }
}

impl Environment for SimEnvironment {
    fn observe(&mut self) -> (Vec<f64>, Vec<String>) {
        let count = self.rng.random_range(self.min_mentions..=self.max_mentions);
        self.active = self.user.draw_mentions(count, &mut self.rng);
        let context = self
            .user
            .slots
            .iter()
            .map(|s| if self.active.contains(s) { 1.0 } else { 0.0 })
            .collect();
        let eligible = self.user.slots.iter().filter(|s| !self.active.contains(s)).cloned().collect();
        (context, eligible)
    }

    fn reward(&mut self, action: &str) -> f64 {
        let p = self.user.selection_probability(action, &self.active);
        if self.rng.random::<f64>() < p { 1.0 } else { 0.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_intents: 3,
            n_slots_per_intent: 8,
            n_requests: 40,
            ..SimConfig::default()
        }
    }

    #[test]
    fn ontology_is_deterministic_and_sized() {
        let a = generate_ontology(&SimConfig::default()).unwrap();
        let b = generate_ontology(&SimConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.topics.len(), 2);
        assert_eq!(a.intents.len(), 14);
        assert_eq!(a.slots.len(), 14 * 20);
        let c = generate_ontology(&SimConfig { seed: 9, ..SimConfig::default() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn more_intents_than_defaults() {
        let o = generate_ontology(&SimConfig { n_intents: 16, ..small() }).unwrap();
        assert_eq!(o.intents.len(), 16);
    }

    #[test]
    fn selection_probabilities_form_a_distribution_without_noise() {
        let world = SimWorld::new(SimConfig { noise: 0.0, ..small() }).unwrap();
        let user = world.users.values().next().unwrap();
        let active = vec![user.slots[0].clone()];
        let total: f64 = user.slots.iter().map(|s| user.selection_probability(s, &active)).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(user.selection_probability(&user.slots[0], &active), 0.0);
    }

    #[test]
    fn coupling_raises_partner_appeal() {
        let world = SimWorld::new(small()).unwrap();
        let user = world.users.values().next().unwrap();
        let (a, b) = (0..user.slots.len())
            .find_map(|a| user.partners[a].first().map(|b| (a, *b)))
            .unwrap();
        let with = user.selection_probability(&user.slots[b], &[user.slots[a].clone()]);
        let unrelated = (0..user.slots.len()).find(|c| *c != a && *c != b && !user.partners[*c].contains(&b));
        if let Some(c) = unrelated {
            let without = user.selection_probability(&user.slots[b], &[user.slots[c].clone()]);
            assert!(with > without);
        }
    }

    #[test]
    fn forced_choice_user_always_selects() {
        let user = SyntheticUser {
            key: IntentKey::new("t", "i"),
            slots: vec!["a".into(), "b".into(), "c".into()],
            preferences: vec![0.0, 1.0, 0.0],
            partners: vec![vec![], vec![], vec![]],
            coupling: COUPLING_HIGH,
            noise: 0.0,
        };
        let mut rng = derived_rng(0, &[]);
        let shown: Vec<String> = vec!["a".into(), "b".into()];
        for _ in 0..100 {
            assert_eq!(user.respond(&shown, &["c".into()], &mut rng), vec!["b".to_string()]);
        }
    }

    #[test]
    fn single_slot_ontology_is_valid() {
        let o = generate_ontology(&SimConfig { n_slots_per_intent: 1, ..small() }).unwrap();
        assert_eq!(o.slots.len(), 3);
    }

    #[test]
    fn noise_must_stay_below_one() {
        assert!(SimWorld::new(SimConfig { noise: 1.0, ..small() }).is_err());
    }

    #[test]
    fn requests_are_reproducible() {
        let world = SimWorld::new(small()).unwrap();
        let a = world.request(5).unwrap();
        assert_eq!(a, world.request(5).unwrap());
        assert!((1..=5).contains(&a.mentioned.len()));
        assert!(a.text.contains(&a.location));
    }

    #[test]
    fn same_seed_same_logs() {
        let run = || {
            let world = SimWorld::new(small()).unwrap();
            let engine = world.default_engine();
            world.run(&engine, Driver::Engine).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(!a.rewards.is_empty());
        assert_eq!(a.rewards.len(), a.records.len());
    }

    #[test]
    fn oracle_slates_are_logged() {
        let world = SimWorld::new(small()).unwrap();
        let engine = world.default_engine();
        let out = world.run(&engine, Driver::Oracle).unwrap();
        assert!(out.records.iter().all(|r| r.propensities.iter().all(|p| *p == 1.0)));
    }

    #[test]
    fn budget_stops_the_run() {
        let world = SimWorld::new(SimConfig { max_interactions: Some(10), n_requests: 1000, ..small() }).unwrap();
        let out = world.run(&world.default_engine(), Driver::Engine).unwrap();
        assert_eq!(out.rewards.len(), 10);
    }

    #[test]
    fn synthetic_search_is_deterministic() {
        let world = SimWorld::new(small()).unwrap();
        let s = world.search_provider();
        let slot = &world.ontology.slots[0];
        let q = format!("restaurants near Austin with {}", slot.label);
        let docs = s.search_raw(&q, 5).unwrap();
        assert_eq!(docs.len(), 5);
        assert_eq!(docs, s.search_raw(&q, 5).unwrap());
        assert!(docs[0].title.contains(&slot.label));
    }

    #[test]
    fn refined_text_appends_selections() {
        let world = SimWorld::new(small()).unwrap();
        let slot = world.ontology.slots[1].clone();
        let s = SimSession {
            id: "x".into(),
            key: IntentKey::new(&slot.topic_id, &slot.intent_id),
            request_text: "hello".into(),
            location: "Austin".into(),
            mentioned: vec![world.ontology.slots[0].id.clone()],
            selected: vec![slot.id.clone()],
            steps: 1,
        };
        let (o, r) = world.refine_request_corpus(&[s]).unwrap();
        assert_eq!(o[0].text, "hello");
        assert_eq!(r[0].text, format!("hello {}", slot.label));
    }

    #[test]
    fn config_overrides() {
        let mut c = SimConfig::default();
        c.apply_overrides("coupling = 0 # off\nn_requests=7\npolicy = softmax_explorer").unwrap();
        assert_eq!((c.coupling, c.n_requests, c.policy), (0.0, 7, PolicyKind::SoftmaxExplorer));
        assert!(c.apply_overrides("bogus = 1").is_err());
        assert!(c.apply_overrides("no equals").is_err());
    }

    #[test]
    fn uniform_logs_have_uniform_propensities() {
        let world = SimWorld::new(small()).unwrap();
        let key = world.users.keys().next().unwrap().clone();
        let mut env = world.environment(&key, 3).unwrap();
        for d in env.uniform_logs(50) {
            assert!((d.propensity - 1.0 / d.eligible.len() as f64).abs() < 1e-12);
            d.validate().unwrap();
        }
    }
}
