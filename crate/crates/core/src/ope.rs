//! Offline evaluation of slot policies from logged feedback: rejection
//! sampling and normalised capped importance sampling.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::BanditModel;
use crate::error::{Error, Result};
use crate::session::InteractionRecord;

pub const DEFAULT_CAP: f64 = 10.0;

const UNIFORM_TOLERANCE: f64 = 1e-9;

/// One logged choice of a single arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedDecision {
    pub context: Vec<f64>,
    pub action: String,
    pub reward: f64,
    pub propensity: f64,
    /// Arms the logging policy chose from.
    pub eligible: Vec<String>,
}

impl LoggedDecision {
    pub fn validate(&self) -> Result<()> {
        if !(self.propensity > 0.0 && self.propensity <= 1.0) {
            return Err(Error::validation(format!(
                "propensity {} outside (0, 1]",
                self.propensity
            )));
        }
        if self.reward != 0.0 && self.reward != 1.0 {
            return Err(Error::validation(format!("reward {} is not 0 or 1", self.reward)));
        }
        if !self.eligible.contains(&self.action) {
            return Err(Error::validation(format!(
                "logged action {:?} is not among the eligible arms",
                self.action
            )));
        }
        Ok(())
    }

    fn is_uniform(&self) -> bool {
        (self.propensity - 1.0 / self.eligible.len() as f64).abs() < UNIFORM_TOLERANCE
    }
}

/// Expands interaction records into one decision per shown slot. Slot `i`
/// of a slate was chosen among the eligible arms minus the slots shown
/// before it. Records without propensities are taken as uniform over those
/// arms; the second value reports whether that happened.
pub fn decisions_from_records(records: &[InteractionRecord]) -> (Vec<LoggedDecision>, bool) {
    let mut assumed_uniform = false;
    let mut out = Vec::new();
    for r in records {
        let mut remaining: Vec<String> = if r.eligible.is_empty() {
            assumed_uniform = true;
            r.shown.clone()
        } else {
            r.eligible.clone()
        };
        for (i, slot) in r.shown.iter().enumerate() {
            let propensity = match r.propensities.get(i) {
                Some(p) => *p,
                None => {
                    assumed_uniform = true;
                    1.0 / remaining.len() as f64
                }
            };
            out.push(LoggedDecision {
                context: r.context.clone(),
                action: slot.clone(),
                reward: if r.selected.contains(slot) { 1.0 } else { 0.0 },
                propensity,
                eligible: remaining.clone(),
            });
            remaining.retain(|s| s != slot);
        }
    }
    (out, assumed_uniform)
}

/// A policy that can say how likely it is to pick each eligible arm.
pub trait TargetPolicy {
    fn action_probabilities(&self, context: &[f64], eligible: &[String]) -> Result<Vec<f64>>;
}

impl TargetPolicy for BanditModel {
    fn action_probabilities(&self, context: &[f64], eligible: &[String]) -> Result<Vec<f64>> {
        BanditModel::action_probabilities(self, context, eligible)
    }
}

/// One model per intent, chosen by the intent that owns the eligible arms.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    models: Vec<BanditModel>,
    owner: HashMap<String, usize>,
}

impl ModelSet {
    pub fn new(models: Vec<BanditModel>) -> Self {
        let mut owner = HashMap::new();
        for (i, m) in models.iter().enumerate() {
            for arm in m.arms() {
                owner.insert(arm.slot_id.clone(), i);
            }
        }
        Self { models, owner }
    }

    pub fn models(&self) -> &[BanditModel] {
        &self.models
    }
}

impl TargetPolicy for ModelSet {
    fn action_probabilities(&self, context: &[f64], eligible: &[String]) -> Result<Vec<f64>> {
        let Some(first) = eligible.first() else {
            return Ok(Vec::new());
        };
        let i = *self
            .owner
            .get(first)
            .ok_or_else(|| Error::Reference(format!("no model covers slot {first:?}")))?;
        self.models[i].action_probabilities(context, eligible)
    }
}

/// Picks uniformly among eligible arms.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl TargetPolicy for UniformPolicy {
    fn action_probabilities(&self, _: &[f64], eligible: &[String]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / eligible.len() as f64; eligible.len()])
    }
}

/// Samples an arm from the policy's distribution.
pub fn sample_action(
    policy: &dyn TargetPolicy,
    context: &[f64],
    eligible: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if eligible.is_empty() {
        return Err(Error::validation("no eligible arms"));
    }
    let probs = policy.action_probabilities(context, eligible)?;
    let mut draw = rng.random::<f64>() * probs.iter().sum::<f64>();
    for (i, p) in probs.iter().enumerate() {
        if draw < *p {
            return Ok(i);
        }
        draw -= p;
    }
    Ok(probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsEstimate {
    pub estimate: f64,
    pub accepted: usize,
    pub n: usize,
}

/// Rejection sampling: keep the decisions where the policy's own choice on
/// the logged context equals the logged action. Requires uniform logging.
pub fn rs_evaluate(logs: &[LoggedDecision], policy: &dyn TargetPolicy, rng: &mut ChaCha8Rng) -> Result<RsEstimate> {
    if logs.is_empty() {
        return Err(Error::validation("no logged decisions"));
    }
    for d in logs {
        d.validate()?;
        if !d.is_uniform() {
            return Err(Error::validation(
                "rejection sampling needs uniformly logged decisions; use NCIS for these logs",
            ));
        }
    }
    let mut accepted = 0usize;
    let mut total = 0.0;
    for d in logs {
        let pick = sample_action(policy, &d.context, &d.eligible, rng)?;
        if d.eligible[pick] == d.action {
            accepted += 1;
            total += d.reward;
        }
    }
    if accepted == 0 {
        return Err(Error::UndefinedEstimate("no logged decision was accepted".into()));
    }
    Ok(RsEstimate {
        estimate: total / accepted as f64,
        accepted,
        n: logs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcisEstimate {
    pub estimate: f64,
    pub n: usize,
    /// Infinite cap is serialized as null.
    pub cap: f64,
    pub weight_sum: f64,
}

/// `sum min(w, cap) r / sum min(w, cap)` with `w = pi(a|c) / propensity`.
pub fn ncis_evaluate(logs: &[LoggedDecision], policy: &dyn TargetPolicy, cap: f64) -> Result<NcisEstimate> {
    if logs.is_empty() {
        return Err(Error::validation("no logged decisions"));
    }
    if cap.is_nan() || cap <= 0.0 {
        return Err(Error::validation(format!("cap {cap} must be positive")));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for d in logs {
        d.validate()?;
        let probs = policy.action_probabilities(&d.context, &d.eligible)?;
        let pos = d.eligible.iter().position(|a| a == &d.action).expect("validated");
        let w = (probs[pos] / d.propensity).min(cap);
        num += w * d.reward;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::UndefinedEstimate("every capped weight is zero".into()));
    }
    Ok(NcisEstimate {
        estimate: num / den,
        n: logs.len(),
        cap,
        weight_sum: den,
    })
}

/// A live environment: presents contexts and rewards the chosen arm.
pub trait Environment {
    /// Next context and the arms available in it.
    fn observe(&mut self) -> (Vec<f64>, Vec<String>);
    fn reward(&mut self, action: &str) -> f64;
}

/// Mean reward of `policy` over `n` fresh interactions with `env`.
pub fn online_ground_truth(
    policy: &dyn TargetPolicy,
    env: &mut dyn Environment,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::validation("ground truth needs at least one interaction"));
    }
    let mut total = 0.0;
    for _ in 0..n {
        let (context, eligible) = env.observe();
        let pick = sample_action(policy, &context, &eligible, rng)?;
        total += env.reward(&eligible[pick]);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub policy: String,
    /// Absent when the logs are not uniform or nothing was accepted.
    pub rs: Option<f64>,
    pub ncis: f64,
    pub acceptance: usize,
    pub n: usize,
    pub cap: f64,
    /// True when some propensities were missing and taken as uniform.
    pub assumed_uniform: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Runs both estimators over decisions expanded from interaction records.
pub fn evaluate_records(
    records: &[InteractionRecord],
    policy_name: &str,
    policy: &dyn TargetPolicy,
    cap: f64,
    rng: &mut ChaCha8Rng,
) -> Result<OpeReport> {
    let (logs, assumed_uniform) = decisions_from_records(records);
    let ncis = ncis_evaluate(&logs, policy, cap)?;
    let mut notes = Vec::new();
    if assumed_uniform {
        notes.push("some propensities were missing and assumed uniform".to_string());
    }
    let (rs, acceptance) = match rs_evaluate(&logs, policy, rng) {
        Ok(r) => (Some(r.estimate), r.accepted),
        Err(e @ (Error::Validation(_) | Error::UndefinedEstimate(_))) => {
            notes.push(format!("rs: {e}"));
            (None, 0)
        }
        Err(e) => return Err(e),
    };
    Ok(OpeReport {
        policy: policy_name.to_string(),
        rs,
        ncis: ncis.estimate,
        acceptance,
        n: logs.len(),
        cap,
        assumed_uniform,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn arms() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn decision(action: &str, reward: f64, propensity: f64) -> LoggedDecision {
        LoggedDecision {
            context: vec![1.0],
            action: action.into(),
            reward,
            propensity,
            eligible: arms(),
        }
    }

    /// Always picks a fixed arm.
    struct Fixed(&'static str);
    impl TargetPolicy for Fixed {
        fn action_probabilities(&self, _: &[f64], eligible: &[String]) -> Result<Vec<f64>> {
            Ok(eligible.iter().map(|e| if e == self.0 { 1.0 } else { 0.0 }).collect())
        }
    }

    /// Fixed probabilities over the two arms.
    struct Mix(f64);
    impl TargetPolicy for Mix {
        fn action_probabilities(&self, _: &[f64], _: &[String]) -> Result<Vec<f64>> {
            Ok(vec![self.0, 1.0 - self.0])
        }
    }

    #[test]
    fn rs_hand_count() {
        let logs = vec![
            decision("a", 1.0, 0.5),
            decision("b", 1.0, 0.5),
            decision("a", 0.0, 0.5),
            decision("b", 0.0, 0.5),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rs_evaluate(&logs, &Fixed("a"), &mut rng).unwrap();
        assert_eq!((r.estimate, r.accepted), (0.5, 2));
    }

    #[test]
    fn rs_rejects_non_uniform_logs() {
        let logs = vec![decision("a", 1.0, 0.9)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(rs_evaluate(&logs, &Fixed("a"), &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn rs_without_acceptance_is_undefined() {
        let logs = vec![decision("b", 1.0, 0.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            rs_evaluate(&logs, &Fixed("a"), &mut rng),
            Err(Error::UndefinedEstimate(_))
        ));
    }

    #[test]
    fn ncis_hand_value() {
        // w = (2, 0.5), r = (1, 0) -> 2 / 2.5
        let logs = vec![decision("a", 1.0, 0.5), decision("b", 0.0, 1.0)];
        let r = ncis_evaluate(&logs, &Mix(1.0 - 0.5), DEFAULT_CAP);
        // Mix(0.5): w_a = 0.5/0.5 = 1, w_b = 0.5/1 = 0.5
        assert!((r.unwrap().estimate - 1.0 / 1.5).abs() < 1e-12);
        let logs = vec![decision("a", 1.0, 0.25), decision("b", 0.0, 1.0)];
        let r = ncis_evaluate(&logs, &Mix(0.5), DEFAULT_CAP).unwrap();
        assert!((r.estimate - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ncis_matching_policy_is_empirical_mean() {
        let logs = vec![
            decision("a", 1.0, 0.5),
            decision("b", 0.0, 0.5),
            decision("a", 1.0, 0.5),
        ];
        let r = ncis_evaluate(&logs, &UniformPolicy, f64::INFINITY).unwrap();
        assert!((r.estimate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ncis_zero_weights_is_undefined() {
        let logs = vec![decision("b", 1.0, 0.5)];
        assert!(matches!(
            ncis_evaluate(&logs, &Fixed("a"), DEFAULT_CAP),
            Err(Error::UndefinedEstimate(_))
        ));
    }

    #[test]
    fn records_expand_per_shown_slot() {
        let r = InteractionRecord {
            session_id: "s".into(),
            step: 0,
            topic: "t".into(),
            intent: "i".into(),
            context_scheme: Default::default(),
            shown: vec!["b".into(), "c".into()],
            selected: vec!["c".into()],
            rejected: vec![],
            ics_before: 0.0,
            ics_after: 0.0,
            timestamp: chrono::Utc::now(),
            request_text: "r".into(),
            active_slots: vec![],
            context: vec![0.0],
            eligible: vec!["a".into(), "b".into(), "c".into()],
            propensities: vec![],
        };
        let (d, assumed) = decisions_from_records(&[r]);
        assert!(assumed);
        assert_eq!(d.len(), 2);
        assert!((d[0].propensity - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(d[1].eligible, vec!["a", "c"]);
        assert_eq!((d[0].reward, d[1].reward), (0.0, 1.0));
    }

    struct AlwaysPays;
    impl Environment for AlwaysPays {
        fn observe(&mut self) -> (Vec<f64>, Vec<String>) {
            (vec![1.0], vec!["a".into(), "b".into()])
        }
        fn reward(&mut self, action: &str) -> f64 {
            if action == "a" { 1.0 } else { 0.0 }
        }
    }

    #[test]
    fn ground_truth_of_best_arm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(online_ground_truth(&Fixed("a"), &mut AlwaysPays, 50, &mut rng).unwrap(), 1.0);
        assert!(online_ground_truth(&Fixed("a"), &mut AlwaysPays, 0, &mut rng).is_err());
    }

    #[test]
    fn model_set_dispatches_by_slot_owner() {
        use crate::bandit::{PolicyConfig, PolicyKind};
        use crate::IntentKey;
        let m = |i: &str, arms: &[&str]| {
            BanditModel::new(
                IntentKey::new("t", i),
                arms.iter().map(|s| s.to_string()).collect(),
                1,
                PolicyConfig::new(PolicyKind::EpsilonGreedy),
            )
        };
        let set = ModelSet::new(vec![m("x", &["a", "b"]), m("y", &["c", "d", "e"])]);
        let p = set.action_probabilities(&[1.0], &["c".into(), "e".into()]).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(set.action_probabilities(&[1.0], &["zz".into()]).is_err());
    }
}
