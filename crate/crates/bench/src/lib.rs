//! Inputs shared by the benchmarks.

use std::collections::HashSet;

use intentloop_core::bandit::{BanditModel, PolicyConfig, PolicyKind};
use intentloop_core::ontology::IntentKey;
use intentloop_core::ope::LoggedDecision;
use intentloop_core::rng::derived_rng;
use rand::Rng;

pub const SLOTS: usize = 20;

pub fn slot_ids() -> Vec<String> {
    (0..SLOTS).map(|i| format!("bench.s{i:02}")).collect()
}

/// One-hot context over the slots, with `active` slots set.
pub fn context(active: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; SLOTS];
    for &i in active {
        c[i] = 1.0;
    }
    c
}

/// A model of `kind` after `rounds` random feedback rounds.
pub fn warmed_model(kind: PolicyKind, rounds: usize) -> BanditModel {
    let mut model = BanditModel::new(IntentKey::new("bench", "bench"), slot_ids(), SLOTS, PolicyConfig::new(kind).with_seed(1));
    let mut rng = derived_rng(1, &[]);
    for _ in 0..rounds {
        let ctx = context(&[rng.random_range(0..SLOTS)]);
        let shown = model.suggest(&ctx, &HashSet::new(), 3).expect("suggest");
        let selected: Vec<String> = shown.iter().filter(|_| rng.random_bool(0.2)).cloned().collect();
        model.update(&ctx, &shown, &selected).expect("update");
    }
    model
}

/// Decisions logged by a uniform policy with binary rewards.
pub fn uniform_logs(n: usize) -> Vec<LoggedDecision> {
    let ids = slot_ids();
    let mut rng = derived_rng(2, &[]);
    (0..n)
        .map(|_| {
            let pick = rng.random_range(0..SLOTS);
            LoggedDecision {
                context: context(&[rng.random_range(0..SLOTS)]),
                action: ids[pick].clone(),
                reward: if rng.random_bool(0.2) { 1.0 } else { 0.0 },
                propensity: 1.0 / SLOTS as f64,
                eligible: ids.clone(),
            }
        })
        .collect()
}
