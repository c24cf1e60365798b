//! Per-intent contextual bandits over slots.
//!
//! Every (topic, intent) pair owns one [`BanditModel`] whose arms are the
//! intent's slots. Each arm scores a context with an online ridge model (or
//! an ensemble of bootstrapped ones); the policy kind decides how scores turn
//! into a slate of suggestions.
//!
//! All randomness is drawn from generators derived from the model seed and
//! its update/suggestion counters, so a model is fully described by its
//! serialized state and replaying the same update stream rebuilds it exactly.

pub mod context;
pub mod linear;
pub mod predictor;

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{IntentKey, IntentOntology};
use crate::profile::IntentProfile;
use crate::rng::{derive_seed, derived_rng, fnv1a};
use crate::stats::percentile;

pub use context::{ContextScheme, ContextVector};
pub use linear::OnlineRidge;
pub use predictor::{train_slot_predictor, PredictorConfig, SlotPredictorModel, TrainingExample};

pub const CHECKPOINT_VERSION: u32 = 1;

const STREAM_EXPLORE: u64 = 0xE1;
const STREAM_UPDATE: u64 = 0xA2;
const STREAM_TS_PROBS: u64 = 0x75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    EpsilonGreedy,
    AdaptiveGreedy,
    AdaptiveActiveGreedy,
    SoftmaxExplorer,
    BootstrappedUcb,
    BootstrappedTs,
    PopularityBaseline,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::EpsilonGreedy,
        PolicyKind::AdaptiveGreedy,
        PolicyKind::AdaptiveActiveGreedy,
        PolicyKind::SoftmaxExplorer,
        PolicyKind::BootstrappedUcb,
        PolicyKind::BootstrappedTs,
        PolicyKind::PopularityBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::EpsilonGreedy => "epsilon_greedy",
            Self::AdaptiveGreedy => "adaptive_greedy",
            Self::AdaptiveActiveGreedy => "adaptive_active_greedy",
            Self::SoftmaxExplorer => "softmax_explorer",
            Self::BootstrappedUcb => "bootstrapped_ucb",
            Self::BootstrappedTs => "bootstrapped_ts",
            Self::PopularityBaseline => "popularity_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn is_bootstrapped(self) -> bool {
        matches!(self, Self::BootstrappedUcb | Self::BootstrappedTs)
    }

    fn is_adaptive(self) -> bool {
        matches!(self, Self::AdaptiveGreedy | Self::AdaptiveActiveGreedy)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub epsilon: f64,
    /// Multiplicative decay of epsilon per update.
    pub epsilon_decay: f64,
    /// Percentile of recent predicted rewards used as the adaptive threshold.
    pub percentile: f64,
    /// Number of recent predicted rewards kept for that percentile.
    pub window: usize,
    pub temperature: f64,
    pub bootstrap_samples: usize,
    pub ucb_percentile: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            epsilon: 0.1,
            epsilon_decay: 0.9997,
            percentile: 80.0,
            window: 500,
            temperature: 1.0,
            bootstrap_samples: 10,
            ucb_percentile: 80.0,
            ridge_lambda: 1.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Applies `key = value` lines. Lines under a `[policy_name]` header only
    /// apply to that policy; `#` starts a comment.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            if section.as_deref().is_some_and(|s| s != self.kind.name()) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: "policy config".into(),
                line: n + 1,
                column: 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let value = value.trim();
            let num = || -> Result<f64> {
                value.parse::<f64>().map_err(|_| Error::Parse {
                    context: "policy config".into(),
                    line: n + 1,
                    column: 1,
                    message: format!("{value:?} is not a number"),
                })
            };
            match key.trim() {
                "epsilon" => self.epsilon = num()?,
                "epsilon_decay" => self.epsilon_decay = num()?,
                "percentile" => self.percentile = num()?,
                "window" => self.window = num()? as usize,
                "temperature" => self.temperature = num()?,
                "bootstrap_samples" => self.bootstrap_samples = num()? as usize,
                "ucb_percentile" => self.ucb_percentile = num()?,
                "ridge_lambda" => self.ridge_lambda = num()?,
                "seed" => self.seed = num()? as u64,
                other => {
                    return Err(Error::validation(format!(
                        "unknown policy setting {other:?} on line {}",
                        n + 1
                    )))
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub slot_id: String,
    replicas: Vec<OnlineRidge>,
    /// Times the arm was shown.
    pub observations: u64,
    /// Times the arm was selected.
    pub selections: u64,
}

impl Arm {
    fn mean_prediction(&self, x: &[f64]) -> f64 {
        if self.replicas.is_empty() {
            return 0.0;
        }
        self.replicas.iter().map(|r| r.predict(x)).sum::<f64>() / self.replicas.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BanditModel {
    format_version: u32,
    key: IntentKey,
    config: PolicyConfig,
    context_dim: usize,
    arms: Vec<Arm>,
    updates: u64,
    /// Exploration cursor: suggestion calls since the last update. It only
    /// keeps repeated calls from reusing random draws and is not part of the
    /// learned state, so it is neither persisted nor compared.
    #[serde(skip)]
    suggestions_since_update: u64,
    recent_scores: VecDeque<f64>,
}

impl PartialEq for BanditModel {
    fn eq(&self, other: &Self) -> bool {
        self.format_version == other.format_version
            && self.key == other.key
            && self.config == other.config
            && self.context_dim == other.context_dim
            && self.arms == other.arms
            && self.updates == other.updates
            && self.recent_scores == other.recent_scores
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-3, 1.0 - 1e-3);
    (p / (1.0 - p)).ln()
}

/// Index into `candidates` with the highest score; ties drawn at random.
fn argmax_random_ties(candidates: &[usize], scores: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let best = candidates
        .iter()
        .map(|&i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..candidates.len())
        .filter(|&j| scores[candidates[j]] == best)
        .collect();
    tied[rng.random_range(0..tied.len())]
}

impl BanditModel {
    pub fn new(key: IntentKey, slot_ids: Vec<String>, context_dim: usize, config: PolicyConfig) -> Self {
        let replicas = match config.kind {
            PolicyKind::PopularityBaseline => 0,
            k if k.is_bootstrapped() => config.bootstrap_samples.max(1),
            _ => 1,
        };
        let arms = slot_ids
            .into_iter()
            .map(|slot_id| Arm {
                slot_id,
                replicas: vec![OnlineRidge::new(context_dim, config.ridge_lambda); replicas],
                observations: 0,
                selections: 0,
            })
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            key,
            config,
            context_dim,
            arms,
            updates: 0,
            suggestions_since_update: 0,
            recent_scores: VecDeque::new(),
        }
    }

    pub fn key(&self) -> &IntentKey {
        &self.key
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn arm(&self, slot_id: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.slot_id == slot_id)
    }

    fn model_seed(&self) -> u64 {
        derive_seed(self.config.seed, &[fnv1a(self.key.to_string().as_bytes())])
    }

    /// Current exploration rate of the epsilon-greedy policy.
    pub fn current_epsilon(&self) -> f64 {
        self.config.epsilon * self.config.epsilon_decay.powf(self.updates as f64)
    }

    fn adaptive_threshold(&self) -> Option<f64> {
        let scores: Vec<f64> = self.recent_scores.iter().copied().collect();
        percentile(&scores, self.config.percentile)
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.context_dim {
            return Err(Error::validation(format!(
                "context has dimension {} but the {} model expects {}",
                context.len(),
                self.key,
                self.context_dim
            )));
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("context contains non-finite values"));
        }
        Ok(())
    }

    fn arm_index(&self, slot_id: &str) -> Result<usize> {
        self.arms
            .iter()
            .position(|a| a.slot_id == slot_id)
            .ok_or_else(|| Error::Reference(format!("slot {slot_id:?} is not an arm of {}", self.key)))
    }

    /// Policy scores for every arm.
    fn scores(&self, x: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.arms
            .iter()
            .map(|arm| match self.config.kind {
                PolicyKind::PopularityBaseline => arm.selections as f64,
                PolicyKind::BootstrappedUcb => {
                    let preds: Vec<f64> = arm.replicas.iter().map(|r| r.predict(x)).collect();
                    percentile(&preds, self.config.ucb_percentile).unwrap_or(0.0)
                }
                PolicyKind::BootstrappedTs => {
                    let pick = rng.random_range(0..arm.replicas.len());
                    arm.replicas[pick].predict(x)
                }
                _ => arm.mean_prediction(x),
            })
            .collect()
    }

    /// Ranked slate of at most `k` arms not in `exclude`.
    pub fn suggest(&mut self, context: &[f64], exclude: &HashSet<String>, k: usize) -> Result<Vec<String>> {
        self.check_context(context)?;
        let mut remaining: Vec<usize> = (0..self.arms.len())
            .filter(|&i| !exclude.contains(&self.arms[i].slot_id))
            .collect();
        let mut rng = derived_rng(
            self.model_seed(),
            &[STREAM_EXPLORE, self.updates, self.suggestions_since_update],
        );
        self.suggestions_since_update += 1;
        let scores = self.scores(context, &mut rng);
        let threshold = self.adaptive_threshold();
        let mut slate = Vec::new();
        while slate.len() < k && !remaining.is_empty() {
            let pos = match self.config.kind {
                PolicyKind::EpsilonGreedy => {
                    if rng.random::<f64>() < self.current_epsilon() {
                        rng.random_range(0..remaining.len())
                    } else {
                        argmax_random_ties(&remaining, &scores, &mut rng)
                    }
                }
                PolicyKind::AdaptiveGreedy | PolicyKind::AdaptiveActiveGreedy => {
                    let best = argmax_random_ties(&remaining, &scores, &mut rng);
                    match threshold {
                        Some(t) if scores[remaining[best]] < t => self.explore(&remaining, &mut rng),
                        _ => best,
                    }
                }
                PolicyKind::SoftmaxExplorer => {
                    let weights: Vec<f64> = remaining
                        .iter()
                        .map(|&i| logit(scores[i]) / self.config.temperature)
                        .collect();
                    let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exp: Vec<f64> = weights.iter().map(|w| (w - top).exp()).collect();
                    let mut draw = rng.random::<f64>() * exp.iter().sum::<f64>();
                    let mut chosen = exp.len() - 1;
                    for (j, e) in exp.iter().enumerate() {
                        if draw < *e {
                            chosen = j;
                            break;
                        }
                        draw -= e;
                    }
                    chosen
                }
                PolicyKind::BootstrappedUcb | PolicyKind::BootstrappedTs => {
                    argmax_random_ties(&remaining, &scores, &mut rng)
                }
                PolicyKind::PopularityBaseline => {
                    let mut best = 0;
                    for j in 1..remaining.len() {
                        let (a, b) = (remaining[j], remaining[best]);
                        if scores[a] > scores[b]
                            || (scores[a] == scores[b] && self.arms[a].slot_id < self.arms[b].slot_id)
                        {
                            best = j;
                        }
                    }
                    best
                }
            };
            slate.push(self.arms[remaining.remove(pos)].slot_id.clone());
        }
        Ok(slate)
    }

    /// Exploration move of the adaptive policies: a random arm, or for the
    /// active variant the least observed one.
    fn explore(&self, remaining: &[usize], rng: &mut ChaCha8Rng) -> usize {
        if self.config.kind == PolicyKind::AdaptiveActiveGreedy {
            let least = remaining
                .iter()
                .map(|&i| self.arms[i].observations)
                .min()
                .unwrap_or(0);
            let tied: Vec<usize> = (0..remaining.len())
                .filter(|&j| self.arms[remaining[j]].observations == least)
                .collect();
            tied[rng.random_range(0..tied.len())]
        } else {
            rng.random_range(0..remaining.len())
        }
    }

    /// Records one reward per shown arm: 1 if selected, else 0.
    pub fn update(&mut self, context: &[f64], shown: &[String], selected: &[String]) -> Result<()> {
        self.check_context(context)?;
        let mut seen = HashSet::new();
        let mut shown_idx = Vec::with_capacity(shown.len());
        for s in shown {
            if !seen.insert(s.as_str()) {
                return Err(Error::validation(format!("slot {s:?} shown twice")));
            }
            shown_idx.push(self.arm_index(s)?);
        }
        if let Some(s) = selected.iter().find(|s| !seen.contains(s.as_str())) {
            return Err(Error::validation(format!("selected slot {s:?} was not shown")));
        }

        if self.config.kind.is_adaptive() {
            for arm in &self.arms {
                self.recent_scores.push_back(arm.mean_prediction(context));
            }
            while self.recent_scores.len() > self.config.window.max(1) {
                self.recent_scores.pop_front();
            }
        }

        let mut rng = derived_rng(self.model_seed(), &[STREAM_UPDATE, self.updates]);
        let poisson = Poisson::new(1.0).expect("valid rate");
        let bootstrapped = self.config.kind.is_bootstrapped();
        for (slot, idx) in shown.iter().zip(shown_idx) {
            let reward = if selected.contains(slot) { 1.0 } else { 0.0 };
            let arm = &mut self.arms[idx];
            arm.observations += 1;
            arm.selections += reward as u64;
            for replica in &mut arm.replicas {
                let weight = if bootstrapped { poisson.sample(&mut rng) } else { 1.0 };
                replica.update(context, reward, weight);
            }
        }
        self.updates += 1;
        self.suggestions_since_update = 0;
        Ok(())
    }

    /// Probability that the policy puts each of `eligible` first.
    pub fn action_probabilities(&self, context: &[f64], eligible: &[String]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let idx: Vec<usize> = eligible
            .iter()
            .map(|s| self.arm_index(s))
            .collect::<Result<_>>()?;
        let m = idx.len();
        if m == 0 {
            return Ok(Vec::new());
        }
        let uniform = vec![1.0 / m as f64; m];
        let mean: Vec<f64> = idx.iter().map(|&i| self.arms[i].mean_prediction(context)).collect();
        let argmax_split = |s: &[f64]| {
            let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let n = s.iter().filter(|v| **v == best).count() as f64;
            s.iter().map(|v| if *v == best { 1.0 / n } else { 0.0 }).collect::<Vec<f64>>()
        };
        let probs = match self.config.kind {
            PolicyKind::EpsilonGreedy => {
                let eps = self.current_epsilon();
                argmax_split(&mean)
                    .into_iter()
                    .map(|g| (1.0 - eps) * g + eps / m as f64)
                    .collect()
            }
            PolicyKind::AdaptiveGreedy | PolicyKind::AdaptiveActiveGreedy => {
                let best = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                match self.adaptive_threshold() {
                    Some(t) if best < t => {
                        if self.config.kind == PolicyKind::AdaptiveGreedy {
                            uniform
                        } else {
                            let obs: Vec<f64> =
                                idx.iter().map(|&i| -(self.arms[i].observations as f64)).collect();
                            argmax_split(&obs)
                        }
                    }
                    _ => argmax_split(&mean),
                }
            }
            PolicyKind::SoftmaxExplorer => {
                let w: Vec<f64> = mean.iter().map(|s| logit(*s) / self.config.temperature).collect();
                let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = w.iter().map(|v| (v - top).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            }
            PolicyKind::BootstrappedUcb => {
                let s: Vec<f64> = idx
                    .iter()
                    .map(|&i| {
                        let preds: Vec<f64> =
                            self.arms[i].replicas.iter().map(|r| r.predict(context)).collect();
                        percentile(&preds, self.config.ucb_percentile).unwrap_or(0.0)
                    })
                    .collect();
                argmax_split(&s)
            }
            PolicyKind::BootstrappedTs => {
                // Monte Carlo over replica draws with a stream tied to the
                // model state and the context, so repeated calls agree.
                const DRAWS: usize = 64;
                let ctx_hash = context
                    .iter()
                    .fold(0u64, |h, v| h.rotate_left(7) ^ v.to_bits());
                let mut rng = derived_rng(self.model_seed(), &[STREAM_TS_PROBS, self.updates, ctx_hash]);
                let mut counts = vec![0.0; m];
                for _ in 0..DRAWS {
                    let s: Vec<f64> = idx
                        .iter()
                        .map(|&i| {
                            let arm = &self.arms[i];
                            arm.replicas[rng.random_range(0..arm.replicas.len())].predict(context)
                        })
                        .collect();
                    for (c, p) in counts.iter_mut().zip(argmax_split(&s)) {
                        *c += p;
                    }
                }
                counts.into_iter().map(|c| c / DRAWS as f64).collect()
            }
            PolicyKind::PopularityBaseline => {
                let mut best = 0;
                for j in 1..m {
                    let (a, b) = (&self.arms[idx[j]], &self.arms[idx[best]]);
                    if a.selections > b.selections
                        || (a.selections == b.selections && a.slot_id < b.slot_id)
                    {
                        best = j;
                    }
                }
                (0..m).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
            }
        };
        Ok(probs)
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| Error::json("bandit checkpoint", &e))?;
        if model.format_version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

/// Top-`k` slots of an intent by profile probability, ties broken by id.
pub fn popularity_suggest(
    profile: &IntentProfile,
    ontology: &IntentOntology,
    key: &IntentKey,
    exclude: &HashSet<String>,
    k: usize,
) -> Result<Vec<String>> {
    let mut dist: Vec<(String, f64)> = profile
        .distribution(ontology, key)?
        .into_iter()
        .filter(|(id, _)| !exclude.contains(id))
        .collect();
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(dist.into_iter().take(k).map(|(id, _)| id).collect())
}

/// One model per (topic, intent), created on first use.
#[derive(Debug)]
pub struct BanditRegistry {
    config: PolicyConfig,
    models: RwLock<BTreeMap<IntentKey, Arc<Mutex<BanditModel>>>>,
}

impl BanditRegistry {
    pub fn new(config: PolicyConfig) -> Self {
        Self {
            config,
            models: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn get(&self, key: &IntentKey) -> Option<Arc<Mutex<BanditModel>>> {
        self.models.read().get(key).cloned()
    }

    pub fn get_or_create(
        &self,
        ontology: &IntentOntology,
        key: &IntentKey,
        context_dim: usize,
    ) -> Result<Arc<Mutex<BanditModel>>> {
        if let Some(m) = self.get(key) {
            return Ok(m);
        }
        ontology.require_intent(key)?;
        let mut models = self.models.write();
        Ok(models
            .entry(key.clone())
            .or_insert_with(|| {
                Arc::new(Mutex::new(BanditModel::new(
                    key.clone(),
                    ontology.slot_ids_for(key),
                    context_dim,
                    self.config,
                )))
            })
            .clone())
    }

    pub fn insert(&self, model: BanditModel) {
        self.models
            .write()
            .insert(model.key().clone(), Arc::new(Mutex::new(model)));
    }

    /// Copies of every model, in key order.
    pub fn snapshot(&self) -> Vec<BanditModel> {
        self.models.read().values().map(|m| m.lock().clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::four_slots;

    fn key() -> IntentKey {
        IntentKey::new("t", "i")
    }

    fn arms(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn model(kind: PolicyKind, n: usize, dim: usize) -> BanditModel {
        BanditModel::new(key(), arms(n), dim, PolicyConfig::new(kind).with_seed(9))
    }

    #[test]
    fn single_eligible_arm_is_returned() {
        for kind in PolicyKind::ALL {
            let mut m = model(kind, 3, 2);
            let exclude: HashSet<String> = ["s0".to_string(), "s2".to_string()].into();
            assert_eq!(m.suggest(&[0.0, 1.0], &exclude, 2).unwrap(), vec!["s1"], "{kind}");
        }
    }

    #[test]
    fn exhausted_arms_give_empty_slate() {
        let mut m = model(PolicyKind::EpsilonGreedy, 2, 1);
        let exclude: HashSet<String> = arms(2).into_iter().collect();
        assert!(m.suggest(&[1.0], &exclude, 3).unwrap().is_empty());
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut config = PolicyConfig::new(PolicyKind::EpsilonGreedy).with_seed(3);
        config.epsilon = 1.0;
        config.epsilon_decay = 1.0;
        let mut m = BanditModel::new(key(), arms(2), 1, config);
        m.update(&[1.0], &["s0".into()], &["s0".into()]).unwrap();
        let mut first = 0;
        let draws = 10_000;
        for _ in 0..draws {
            if m.suggest(&[1.0], &HashSet::new(), 1).unwrap()[0] == "s0" {
                first += 1;
            }
        }
        let freq = first as f64 / draws as f64;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    #[test]
    fn adaptive_greedy_exploits_rewarded_arm() {
        let mut m = model(PolicyKind::AdaptiveGreedy, 2, 1);
        for t in 0..1000 {
            let shown = if t % 2 == 0 { vec!["s0".into(), "s1".into()] } else { vec!["s1".into(), "s0".into()] };
            m.update(&[1.0], &shown, &["s0".into()]).unwrap();
        }
        let first = (0..100)
            .filter(|_| m.suggest(&[1.0], &HashSet::new(), 1).unwrap()[0] == "s0")
            .count();
        assert!(first >= 95, "{first}");
    }

    #[test]
    fn update_validates_feedback() {
        let mut m = model(PolicyKind::EpsilonGreedy, 2, 1);
        assert!(matches!(
            m.update(&[1.0], &["s0".into()], &["s1".into()]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(m.update(&[1.0], &["zz".into()], &[]), Err(Error::Reference(_))));
        assert!(matches!(m.update(&[1.0, 2.0], &["s0".into()], &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn update_appends_one_observation_per_shown_arm() {
        let mut m = model(PolicyKind::EpsilonGreedy, 2, 1);
        m.update(&[1.0], &["s0".into()], &["s0".into()]).unwrap();
        assert_eq!(m.arm("s0").unwrap().observations, 1);
        assert_eq!(m.arm("s0").unwrap().selections, 1);
        m.update(&[1.0], &["s0".into(), "s1".into()], &[]).unwrap();
        assert_eq!(m.arm("s0").unwrap().observations, 2);
        assert_eq!(m.arm("s1").unwrap().observations, 1);
        assert_eq!(m.arm("s1").unwrap().selections, 0);
    }

    #[test]
    fn replay_is_bit_identical() {
        for kind in PolicyKind::ALL {
            let run = || {
                let mut m = model(kind, 4, 3);
                for t in 0..50u32 {
                    let ctx = [f64::from(t % 2), f64::from(t % 3), 1.0];
                    let slate = m.suggest(&ctx, &HashSet::new(), 2).unwrap();
                    let sel: Vec<String> = slate.iter().take((t % 2) as usize).cloned().collect();
                    m.update(&ctx, &slate, &sel).unwrap();
                }
                m
            };
            let a = run();
            assert_eq!(a, run(), "{kind}");
            let back = BanditModel::from_checkpoint_json(&a.to_checkpoint_json()).unwrap();
            assert_eq!(back, a, "{kind}");
        }
    }

    #[test]
    fn popularity_ignores_context() {
        let mut m = model(PolicyKind::PopularityBaseline, 3, 2);
        m.update(&[1.0, 0.0], &["s2".into(), "s1".into()], &["s2".into()]).unwrap();
        let a = m.suggest(&[1.0, 0.0], &HashSet::new(), 3).unwrap();
        let b = m.suggest(&[0.0, 5.0], &HashSet::new(), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec!["s2", "s0", "s1"]);
    }

    #[test]
    fn action_probabilities_sum_to_one() {
        for kind in PolicyKind::ALL {
            let mut m = model(kind, 4, 2);
            for t in 0..20 {
                m.update(&[1.0, f64::from(t % 2)], &["s0".into(), "s1".into()], &["s1".into()])
                    .unwrap();
            }
            let p = m.action_probabilities(&[1.0, 0.0], &arms(4)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{kind}: {p:?}");
        }
    }

    #[test]
    fn popularity_suggest_orders_by_probability() {
        let ont = four_slots();
        let mut profile = IntentProfile::new();
        let k = key();
        let rec = |p: &mut IntentProfile, s: &str, n: usize| {
            for _ in 0..n {
                p.record_interaction(&ont, &k, &[s.to_string()]).unwrap();
            }
        };
        rec(&mut profile, "a", 5);
        rec(&mut profile, "b", 3);
        rec(&mut profile, "c", 2);
        rec(&mut profile, "d", 1);
        let got = popularity_suggest(&profile, &ont, &k, &HashSet::new(), 2).unwrap();
        assert_eq!(got, vec!["a", "b"]);
        let fresh = IntentProfile::new();
        let all = popularity_suggest(&fresh, &ont, &k, &HashSet::new(), 10).unwrap();
        assert_eq!(all, vec!["a", "b", "c", "d"]);
        let ex: HashSet<String> = ["a".to_string()].into();
        assert_eq!(popularity_suggest(&fresh, &ont, &k, &ex, 1).unwrap(), vec!["b"]);
    }

    #[test]
    fn overrides_apply_per_section() {
        let mut c = PolicyConfig::new(PolicyKind::SoftmaxExplorer);
        c.apply_overrides("epsilon = 0.2\n[softmax_explorer]\ntemperature = 0.5 # cooler\n[epsilon_greedy]\nepsilon = 0.9\n")
            .unwrap();
        assert_eq!(c.epsilon, 0.2);
        assert_eq!(c.temperature, 0.5);
        assert!(c.apply_overrides("bogus = 1").is_err());
        assert!(c.apply_overrides("epsilon: 1").is_err());
    }

    #[test]
    fn registry_creates_one_model_per_key() {
        let ont = four_slots();
        let reg = BanditRegistry::new(PolicyConfig::new(PolicyKind::EpsilonGreedy));
        let a = reg.get_or_create(&ont, &key(), 4).unwrap();
        let b = reg.get_or_create(&ont, &key(), 4).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(a.lock().arms().len(), 4);
        assert!(reg.get_or_create(&ont, &IntentKey::new("t", "x"), 4).is_err());
    }
}
