use intentloop_core::bandit::{PolicyConfig, PolicyKind};
use intentloop_core::simulator::{Driver, SimConfig, SimWorld};

fn small(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        n_intents: 3,
        n_slots_per_intent: 10,
        n_requests: 300,
        ..SimConfig::default()
    }
}

#[test]
fn oracle_slate_is_never_worse_than_the_policy_slate() {
    for kind in [PolicyKind::AdaptiveActiveGreedy, PolicyKind::EpsilonGreedy, PolicyKind::PopularityBaseline] {
        let world = SimWorld::new(small(5)).unwrap();
        let engine = world.engine(PolicyConfig::new(kind).with_seed(5));
        let out = world.run(&engine, Driver::Engine).unwrap();
        assert!(!out.records.is_empty());
        for r in &out.records {
            let user = world.user(&r.key()).unwrap();
            let value = |slate: &[String]| slate.iter().map(|s| user.selection_probability(s, &r.active_slots)).sum::<f64>();
            let best = user.best_slate(&r.eligible, &r.active_slots, r.shown.len());
            assert!(value(&best) >= value(&r.shown) - 1e-12, "{}: oracle below policy at {}", kind.name(), r.session_id);
        }
    }
}

#[test]
fn oracle_beats_policies_when_preferences_are_coupled() {
    let cfg = SimConfig { max_interactions: Some(4000), n_requests: 100_000, ..small(3) };
    let world = SimWorld::new(cfg).unwrap();
    let oracle = world.run(&world.default_engine(), Driver::Oracle).unwrap().tail_expected(0.5);
    for kind in [PolicyKind::EpsilonGreedy, PolicyKind::PopularityBaseline, PolicyKind::BootstrappedUcb] {
        let out = world.run(&world.engine(PolicyConfig::new(kind).with_seed(3)), Driver::Engine).unwrap();
        assert!(oracle >= out.tail_expected(0.5), "{} beat the oracle", kind.name());
    }
}

#[test]
fn rewards_and_expectations_line_up() {
    let world = SimWorld::new(small(1)).unwrap();
    let out = world.run(&world.default_engine(), Driver::Engine).unwrap();
    assert_eq!(out.rewards.len(), out.records.len());
    assert_eq!(out.rewards.len(), out.expected_rewards.len());
    assert!(out.rewards.iter().chain(&out.expected_rewards).all(|r| (0.0..=1.0).contains(r)));
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!((mean(&out.rewards) - mean(&out.expected_rewards)).abs() < 0.03);
}

#[test]
fn single_slot_intents_end_without_suggestions() {
    let cfg = SimConfig { n_slots_per_intent: 1, min_mentions: 1, max_mentions: 1, ..small(2) };
    let world = SimWorld::new(cfg).unwrap();
    let engine = world.default_engine();
    let out = world.run(&engine, Driver::Engine).unwrap();
    assert_eq!(out.sessions.len(), 300);
    assert!(out.records.is_empty());
    assert!(out.sessions.iter().all(|s| s.steps == 0));
}

#[test]
fn every_session_stops_within_the_step_limit() {
    for kind in PolicyKind::ALL {
        let world = SimWorld::new(SimConfig { n_requests: 80, ..small(9) }).unwrap();
        let engine = world.engine(PolicyConfig::new(kind).with_seed(9));
        let out = world.run(&engine, Driver::Engine).unwrap();
        let limit = engine.config().max_steps;
        assert!(out.sessions.iter().all(|s| s.steps <= limit), "{}", kind.name());
    }
}

#[test]
fn budget_cuts_the_last_session_short() {
    let world = SimWorld::new(SimConfig { max_interactions: Some(101), n_requests: 100_000, ..small(4) }).unwrap();
    let out = world.run(&world.default_engine(), Driver::Engine).unwrap();
    assert_eq!(out.rewards.len(), 101);
    let last = out.sessions.last().unwrap();
    let recorded = out.records.iter().filter(|r| r.session_id == last.id).count();
    assert_eq!(recorded as u32, last.steps);
}

#[test]
fn same_seed_same_outcome() {
    let run = |seed| {
        let world = SimWorld::new(small(seed)).unwrap();
        world.run(&world.default_engine(), Driver::Engine).unwrap()
    };
    let (a, b) = (run(11), run(11));
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(serde_json::to_string(&a.records).unwrap(), serde_json::to_string(&b.records).unwrap());
    assert_ne!(a.rewards, run(12).rewards);
}
