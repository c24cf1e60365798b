//! The refinement loop: parse a request, suggest slots until the completion
//! score crosses the stopping threshold, then retrieve.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bandit::context::{active_slots, context_method1, context_method2, context_method3};
use crate::bandit::{
    popularity_suggest, BanditRegistry, ContextScheme, ContextVector, PolicyConfig, PolicyKind,
    SlotPredictorModel, TrainingExample,
};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::frame::SemanticFrame;
use crate::nlu::{ComplexRequest, Nlu};
use crate::ontology::{IntentKey, IntentOntology};
use crate::profile::{should_continue, IntentProfile, SharedProfile, DEFAULT_MAX_STEPS};
use crate::retrieval::{
    generate_subqueries, merge_results, rank_suggestions, search, RankingTarget, Ranker,
    SearchProvider, Suggestion, DEFAULT_TOP_K,
};

pub const DEFAULT_SLATE_SIZE: usize = 3;
pub const DEFAULT_TTL_SECS: i64 = 30 * 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Refining,
    Ready,
    Retrieved,
    Abandoned,
}

impl SessionState {
    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Refining, Ready) | (Ready, Retrieved) | (Refining | Ready | Retrieved, Abandoned)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Refining => "refining",
            Self::Ready => "ready",
            Self::Retrieved => "retrieved",
            Self::Abandoned => "abandoned",
        }
    }
}

/// One feedback round, in interaction-log form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub session_id: String,
    pub step: u32,
    pub topic: String,
    pub intent: String,
    pub context_scheme: ContextScheme,
    pub shown: Vec<String>,
    pub selected: Vec<String>,
    pub rejected: Vec<String>,
    pub ics_before: f64,
    pub ics_after: f64,
    pub timestamp: DateTime<Utc>,
    pub request_text: String,
    /// Mentioned and previously selected slots when the slate was drawn.
    pub active_slots: Vec<String>,
    /// Context the slate was drawn for.
    pub context: Vec<f64>,
    /// Arms that could have been shown.
    pub eligible: Vec<String>,
    /// Probability of each shown slot being chosen at its slate position.
    pub propensities: Vec<f64>,
}

impl InteractionRecord {
    pub fn key(&self) -> IntentKey {
        IntentKey::new(&self.topic, &self.intent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub request: ComplexRequest,
    pub frame: Option<SemanticFrame>,
    pub scheme: ContextScheme,
    pub context: Option<ContextVector>,
    pub step: u32,
    pub max_steps: u32,
    pub selected: Vec<String>,
    pub rejected: Vec<String>,
    /// Every slot shown so far, in display order.
    pub shown: Vec<String>,
    /// The current slate.
    pub suggestions: Vec<String>,
    pub eligible: Vec<String>,
    pub propensities: Vec<f64>,
    pub ics: f64,
    pub threshold: f64,
    pub state: SessionState,
    pub diagnostic: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Profile counts of this intent as seen by this session.
    pub profile_view: IntentProfile,
    pub records: Vec<InteractionRecord>,
    pub results: Vec<Suggestion>,
}

impl Session {
    pub fn key(&self) -> Option<IntentKey> {
        self.frame.as_ref().map(SemanticFrame::key)
    }

    fn transition(&mut self, next: SessionState) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(Error::State(format!(
                "session {} cannot go from {} to {}",
                self.id,
                self.state.name(),
                next.name()
            )));
        }
        self.state = next;
        Ok(())
    }

    fn frame(&self) -> Result<&SemanticFrame> {
        self.frame
            .as_ref()
            .ok_or_else(|| Error::State(format!("session {} has no frame", self.id)))
    }

    pub fn active_slots(&self) -> Vec<String> {
        self.frame
            .as_ref()
            .map(|f| active_slots(f, &self.selected))
            .unwrap_or_default()
    }
}

/// Wall clock, or a manually driven one for simulation and tests.
#[derive(Debug, Default)]
pub struct Clock {
    manual: Option<Mutex<DateTime<Utc>>>,
}

impl Clock {
    pub fn system() -> Self {
        Self { manual: None }
    }

    pub fn manual(start: DateTime<Utc>) -> Self {
        Self {
            manual: Some(Mutex::new(start)),
        }
    }

    pub fn now(&self) -> DateTime<Utc> {
        match &self.manual {
            Some(t) => *t.lock(),
            None => Utc::now(),
        }
    }

    /// Moves a manual clock forward; no effect on the system clock.
    pub fn advance(&self, by: Duration) {
        if let Some(t) = &self.manual {
            let mut t = t.lock();
            *t += by;
        }
    }
}

/// Source of session ids.
#[derive(Debug)]
pub enum IdSource {
    Random,
    Sequential { prefix: String, next: AtomicU64 },
}

impl IdSource {
    pub fn sequential(prefix: impl Into<String>) -> Self {
        Self::Sequential {
            prefix: prefix.into(),
            next: AtomicU64::new(0),
        }
    }

    pub fn next_id(&self) -> String {
        match self {
            Self::Random => uuid::Uuid::new_v4().simple().to_string(),
            Self::Sequential { prefix, next } => {
                format!("{prefix}{:06}", next.fetch_add(1, Ordering::Relaxed))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_steps: u32,
    pub slate_size: usize,
    pub scheme: ContextScheme,
    pub ttl_secs: i64,
    /// Documents fetched per sub-query.
    pub search_k: usize,
    /// Ranked suggestions returned by retrieval.
    pub result_k: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            slate_size: DEFAULT_SLATE_SIZE,
            scheme: ContextScheme::Method1,
            ttl_secs: DEFAULT_TTL_SECS,
            search_k: DEFAULT_TOP_K,
            result_k: DEFAULT_TOP_K,
        }
    }
}

pub struct Providers {
    pub nlu: Nlu,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub search: Arc<dyn SearchProvider>,
    pub ranker: Arc<dyn Ranker>,
    pub predictor: Option<Arc<SlotPredictorModel>>,
}

/// Everything a session needs: ontology, shared profile, one bandit registry
/// per context scheme, and the external providers.
pub struct Engine {
    ontology: Arc<IntentOntology>,
    profile: Arc<SharedProfile>,
    registries: BTreeMap<ContextScheme, Arc<BanditRegistry>>,
    providers: Providers,
    config: EngineConfig,
    clock: Clock,
    ids: IdSource,
}

impl Engine {
    pub fn new(
        ontology: Arc<IntentOntology>,
        profile: Arc<SharedProfile>,
        policy: PolicyConfig,
        providers: Providers,
        config: EngineConfig,
    ) -> Self {
        let registries = [ContextScheme::Method1, ContextScheme::Method2, ContextScheme::Method3]
            .into_iter()
            .map(|s| (s, Arc::new(BanditRegistry::new(policy))))
            .collect();
        Self {
            ontology,
            profile,
            registries,
            providers,
            config,
            clock: Clock::system(),
            ids: IdSource::Random,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: IdSource) -> Self {
        self.ids = ids;
        self
    }

    pub fn with_registry(mut self, scheme: ContextScheme, registry: Arc<BanditRegistry>) -> Self {
        self.registries.insert(scheme, registry);
        self
    }

    pub fn ontology(&self) -> &Arc<IntentOntology> {
        &self.ontology
    }

    pub fn profile(&self) -> &Arc<SharedProfile> {
        &self.profile
    }

    pub fn registry(&self, scheme: ContextScheme) -> &Arc<BanditRegistry> {
        &self.registries[&scheme]
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn policy_kind(&self) -> PolicyKind {
        self.registries[&self.config.scheme].config().kind
    }

    /// Context dimension of `key` under `scheme`.
    pub fn context_dim(&self, scheme: ContextScheme, key: &IntentKey) -> Result<usize> {
        let n = self.ontology.slot_ids_for(key).len();
        let embed = self.providers.embedder.dim();
        Ok(match scheme {
            ContextScheme::Method1 => n,
            ContextScheme::Method2 => n + embed,
            ContextScheme::Method3 => self.predictor()?.slot_embedding_dim() + embed,
        })
    }

    fn predictor(&self) -> Result<&SlotPredictorModel> {
        self.providers
            .predictor
            .as_deref()
            .ok_or_else(|| Error::State("context method3 needs a trained slot predictor".into()))
    }

    fn build_context(
        &self,
        scheme: ContextScheme,
        frame: &SemanticFrame,
        selected: &[String],
        request_text: &str,
        step: u32,
    ) -> Result<ContextVector> {
        let universe = self.ontology.slot_ids_for(&frame.key());
        match scheme {
            ContextScheme::Method1 => context_method1(frame, selected, &universe, step),
            ContextScheme::Method2 => context_method2(
                frame,
                selected,
                &universe,
                request_text,
                self.providers.embedder.as_ref(),
                step,
            ),
            ContextScheme::Method3 => context_method3(
                frame,
                selected,
                self.predictor()?,
                request_text,
                self.providers.embedder.as_ref(),
                step,
            ),
        }
    }

    /// Parses `text` and opens a session. A request whose intent cannot be
    /// resolved yields an abandoned session carrying the diagnostic.
    pub fn start_session(&self, text: &str, location: Option<String>) -> Result<Session> {
        self.start_session_with(text, location, self.config.scheme)
    }

    pub fn start_session_with(
        &self,
        text: &str,
        location: Option<String>,
        scheme: ContextScheme,
    ) -> Result<Session> {
        let request = ComplexRequest::new(text, location, self.clock.now())?;
        let profile = self.profile.snapshot();
        match self.providers.nlu.parse_frame(&request, &self.ontology, &profile) {
            Ok(frame) => self.start_with_frame(request, frame, scheme),
            Err(Error::UnknownIntent { raw }) => {
                let now = self.clock.now();
                Ok(Session {
                    id: self.ids.next_id(),
                    request,
                    frame: None,
                    scheme,
                    context: None,
                    step: 0,
                    max_steps: self.config.max_steps,
                    selected: Vec::new(),
                    rejected: Vec::new(),
                    shown: Vec::new(),
                    suggestions: Vec::new(),
                    eligible: Vec::new(),
                    propensities: Vec::new(),
                    ics: 0.0,
                    threshold: 0.0,
                    state: SessionState::Abandoned,
                    diagnostic: Some(format!("unknown intent in {raw:?}")),
                    created_at: now,
                    updated_at: now,
                    profile_view: IntentProfile::new(),
                    records: Vec::new(),
                    results: Vec::new(),
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Opens a session for an already structured request.
    pub fn start_with_frame(
        &self,
        request: ComplexRequest,
        mut frame: SemanticFrame,
        scheme: ContextScheme,
    ) -> Result<Session> {
        let key = frame.key();
        self.ontology.require_intent(&key)?;
        let mentioned = frame.mentioned_ids();
        for id in &mentioned {
            self.ontology.slot_of(&key, id)?;
        }
        let profile_view = self.profile.read(|p| p.restricted_to(&key));
        let ics = profile_view.intent_completion_score(&self.ontology, &frame, &[])?;
        let threshold = profile_view.stopping_threshold(&self.ontology, &key)?;
        frame.ics = ics;
        if frame.location.is_none() {
            frame.location = request.location.clone();
        }
        let context = self.build_context(scheme, &frame, &[], &request.text, 0)?;
        let now = self.clock.now();
        let mut session = Session {
            id: self.ids.next_id(),
            request,
            frame: Some(frame),
            scheme,
            context: Some(context),
            step: 0,
            max_steps: self.config.max_steps,
            selected: Vec::new(),
            rejected: Vec::new(),
            shown: Vec::new(),
            suggestions: Vec::new(),
            eligible: Vec::new(),
            propensities: Vec::new(),
            ics,
            threshold,
            state: SessionState::Refining,
            diagnostic: None,
            created_at: now,
            updated_at: now,
            profile_view,
            records: Vec::new(),
            results: Vec::new(),
        };
        if should_continue(ics, threshold, 0, session.max_steps) {
            self.draw_suggestions(&mut session)?;
        } else {
            session.transition(SessionState::Ready)?;
        }
        Ok(session)
    }

    /// Draws the next slate, or marks the session ready when nothing is left
    /// to suggest.
    fn draw_suggestions(&self, session: &mut Session) -> Result<()> {
        let frame = session.frame()?.clone();
        let key = frame.key();
        let context = session
            .context
            .clone()
            .ok_or_else(|| Error::State(format!("session {} has no context", session.id)))?;
        let excluded: HashSet<String> = frame
            .mentioned_ids()
            .into_iter()
            .chain(session.selected.iter().cloned())
            .chain(session.rejected.iter().cloned())
            .chain(session.shown.iter().cloned())
            .collect();
        let eligible: Vec<String> = self
            .ontology
            .slot_ids_for(&key)
            .into_iter()
            .filter(|s| !excluded.contains(s))
            .collect();
        let k = self.config.slate_size;
        let registry = self.registry(session.scheme);
        let (slate, propensities) = if registry.config().kind == PolicyKind::PopularityBaseline {
            let slate = self
                .profile
                .read(|p| popularity_suggest(p, &self.ontology, &key, &excluded, k))?;
            let props = vec![1.0; slate.len()];
            (slate, props)
        } else {
            let dim = self.context_dim(session.scheme, &key)?;
            let model = registry.get_or_create(&self.ontology, &key, dim)?;
            let mut model = model.lock();
            let slate = model.suggest(&context.values, &excluded, k)?;
            let mut remaining = eligible.clone();
            let mut props = Vec::with_capacity(slate.len());
            for s in &slate {
                let probs = model.action_probabilities(&context.values, &remaining)?;
                let pos = remaining.iter().position(|r| r == s).expect("slate is eligible");
                props.push(probs[pos]);
                remaining.remove(pos);
            }
            (slate, props)
        };
        session.shown.extend(slate.iter().cloned());
        session.suggestions = slate;
        session.eligible = eligible;
        session.propensities = propensities;
        if session.suggestions.is_empty() {
            session.transition(SessionState::Ready)?;
        }
        Ok(())
    }

    /// Replaces the current slate with one chosen outside the engine, for
    /// example by an oracle. The new slots must be eligible; they are logged
    /// with propensity 1.
    pub fn replace_suggestions(&self, session: &mut Session, slate: Vec<String>) -> Result<()> {
        if session.state != SessionState::Refining {
            return Err(Error::State(format!(
                "session {} is {}, only a refining slate can be replaced",
                session.id,
                session.state.name()
            )));
        }
        let mut seen = HashSet::new();
        for s in &slate {
            if !session.eligible.contains(s) {
                return Err(Error::validation(format!("slot {s:?} is not eligible")));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::validation(format!("slot {s:?} given twice")));
            }
        }
        if slate.is_empty() {
            return Err(Error::validation("replacement slate is empty"));
        }
        let keep = session.shown.len() - session.suggestions.len();
        session.shown.truncate(keep);
        session.shown.extend(slate.iter().cloned());
        session.propensities = vec![1.0; slate.len()];
        session.suggestions = slate;
        Ok(())
    }

    /// Marks an idle session abandoned. Returns whether it expired.
    pub fn expire_if_idle(&self, session: &mut Session) -> bool {
        let idle = self.clock.now() - session.updated_at;
        if matches!(session.state, SessionState::Refining | SessionState::Ready)
            && idle > Duration::seconds(self.config.ttl_secs)
        {
            session.state = SessionState::Abandoned;
            session.diagnostic = Some(format!("idle for {}s", idle.num_seconds()));
            session.suggestions.clear();
            return true;
        }
        false
    }

    pub fn abandon(&self, session: &mut Session, reason: &str) -> Result<()> {
        session.transition(SessionState::Abandoned)?;
        session.diagnostic = Some(reason.to_string());
        session.suggestions.clear();
        session.updated_at = self.clock.now();
        Ok(())
    }

    /// Applies one round of feedback on the current slate.
    pub fn apply_feedback(&self, session: &mut Session, selected: &[String], rejected: &[String]) -> Result<()> {
        if self.expire_if_idle(session) {
            return Err(Error::State(format!("session {} expired", session.id)));
        }
        if session.state != SessionState::Refining {
            return Err(Error::State(format!(
                "session {} is {}, feedback needs refining",
                session.id,
                session.state.name()
            )));
        }
        if session.step >= session.max_steps {
            return Err(Error::State(format!("session {} used all its steps", session.id)));
        }
        let shown: HashSet<&str> = session.suggestions.iter().map(String::as_str).collect();
        let mut seen = HashSet::new();
        for s in selected.iter().chain(rejected) {
            if !shown.contains(s.as_str()) {
                return Err(Error::validation(format!("slot {s:?} was not in the last suggestions")));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::validation(format!("slot {s:?} given twice in feedback")));
            }
        }

        let frame = session.frame()?.clone();
        let key = frame.key();
        let context = session.context.clone().expect("refining sessions have a context");
        let ics_before = session.ics;
        let active_before = session.active_slots();

        if !selected.is_empty() {
            self.profile.record_interaction(&self.ontology, &key, selected)?;
            session
                .profile_view
                .record_interaction(&self.ontology, &key, selected)?;
        }
        let registry = self.registry(session.scheme);
        let dim = self.context_dim(session.scheme, &key)?;
        registry
            .get_or_create(&self.ontology, &key, dim)?
            .lock()
            .update(&context.values, &session.suggestions, selected)?;

        session.selected.extend(selected.iter().cloned());
        session.rejected.extend(rejected.iter().cloned());
        session.step += 1;
        session.context = Some(self.build_context(
            session.scheme,
            &frame,
            &session.selected,
            &session.request.text,
            session.step,
        )?);
        session.ics = session
            .profile_view
            .intent_completion_score(&self.ontology, &frame, &session.selected)?;
        session.threshold = session.profile_view.stopping_threshold(&self.ontology, &key)?;
        if let Some(f) = session.frame.as_mut() {
            f.ics = session.ics;
        }
        let now = self.clock.now();
        session.records.push(InteractionRecord {
            session_id: session.id.clone(),
            step: session.step - 1,
            topic: key.topic_id.clone(),
            intent: key.intent_id.clone(),
            context_scheme: session.scheme,
            shown: session.suggestions.clone(),
            selected: selected.to_vec(),
            rejected: rejected.to_vec(),
            ics_before,
            ics_after: session.ics,
            timestamp: now,
            request_text: session.request.text.clone(),
            active_slots: active_before,
            context: context.values,
            eligible: session.eligible.clone(),
            propensities: session.propensities.clone(),
        });
        session.updated_at = now;
        session.suggestions.clear();
        if should_continue(session.ics, session.threshold, session.step, session.max_steps) {
            self.draw_suggestions(session)?;
        } else {
            session.transition(SessionState::Ready)?;
        }
        Ok(())
    }

    /// Issues the sub-queries of a ready session and ranks the union of
    /// their results.
    pub fn retrieve(&self, session: &mut Session) -> Result<Vec<Suggestion>> {
        if self.expire_if_idle(session) {
            return Err(Error::State(format!("session {} expired", session.id)));
        }
        if session.state != SessionState::Ready {
            return Err(Error::State(format!(
                "session {} is {}, retrieval needs ready",
                session.id,
                session.state.name()
            )));
        }
        let frame = session.frame()?.clone();
        let location = frame.location.clone().or(session.request.location.clone());
        let queries = generate_subqueries(&self.ontology, &frame, &session.selected, location.as_deref())?;
        let mut lists = Vec::with_capacity(queries.len());
        for q in &queries {
            lists.push(search(self.providers.search.as_ref(), q, self.config.search_k)?);
        }
        let candidates = merge_results(lists);
        let results = if candidates.is_empty() {
            Vec::new()
        } else {
            let target = RankingTarget::from_frame(&self.ontology, &frame, &session.selected, &session.request.text)?;
            rank_suggestions(&candidates, &target, self.providers.ranker.as_ref(), self.config.result_k)?
        };
        session.transition(SessionState::Retrieved)?;
        session.results = results.clone();
        session.updated_at = self.clock.now();
        Ok(results)
    }
}

/// Writes records as JSONL, one object per line.
pub fn export_log<'a>(records: impl IntoIterator<Item = &'a InteractionRecord>, out: &mut dyn Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io("interaction log", e))?;
    }
    Ok(())
}

pub fn export_sessions(sessions: &[Session], out: &mut dyn Write) -> Result<()> {
    export_log(sessions.iter().flat_map(|s| &s.records), out)
}

pub fn read_log(text: &str, context: &str) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            context: context.into(),
            line: n + 1,
            column: e.column(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_log(&text, &path.display().to_string())
}

/// `<dir>/<date>/<session_id>.jsonl`
pub fn session_log_path(dir: &Path, session: &Session) -> PathBuf {
    dir.join(session.created_at.format("%Y-%m-%d").to_string())
        .join(format!("{}.jsonl", session.id))
}

pub fn write_session_log(dir: &Path, session: &Session) -> Result<PathBuf> {
    let path = session_log_path(dir, session);
    let parent = path.parent().expect("log path has a parent");
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut buf = Vec::new();
    export_log(&session.records, &mut buf)?;
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Rebuilds bandit models by feeding logged feedback through the update
/// rule in log order.
pub fn replay_log(
    records: &[InteractionRecord],
    ontology: &IntentOntology,
    policy: PolicyConfig,
) -> Result<BanditRegistry> {
    let registry = BanditRegistry::new(policy);
    for r in records {
        let model = registry.get_or_create(ontology, &r.key(), r.context.len())?;
        let mut model = model.lock();
        if model.context_dim() != r.context.len() {
            return Err(Error::validation(format!(
                "session {} step {} has context dimension {} but {} uses {}",
                r.session_id,
                r.step,
                r.context.len(),
                r.key(),
                model.context_dim()
            )));
        }
        model.update(&r.context, &r.shown, &r.selected)?;
    }
    Ok(registry)
}

/// Predictor training rows from logs: per session, the slots active at the
/// first step map to everything selected afterwards. Sessions without
/// selections are skipped.
pub fn training_examples(records: &[InteractionRecord]) -> Vec<TrainingExample> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_session: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        let entry = by_session.entry(&r.session_id).or_default();
        if entry.is_empty() {
            order.push(&r.session_id);
        }
        entry.push(r);
    }
    order
        .into_iter()
        .filter_map(|id| {
            let rs = &by_session[id];
            let first = rs.iter().min_by_key(|r| r.step)?;
            let inputs: BTreeSet<&String> = first.active_slots.iter().collect();
            let mut targets = Vec::new();
            for r in rs {
                for s in &r.selected {
                    if !inputs.contains(s) && !targets.contains(s) {
                        targets.push(s.clone());
                    }
                }
            }
            (!targets.is_empty()).then(|| TrainingExample {
                request_text: first.request_text.clone(),
                input_slots: first.active_slots.clone(),
                target_slots: targets,
            })
        })
        .collect()
}
