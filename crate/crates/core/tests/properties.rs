use std::collections::HashSet;

use intentloop_core::bandit::{BanditModel, PolicyConfig, PolicyKind};
use intentloop_core::frame::SemanticFrame;
use intentloop_core::ontology::{Intent, IntentKey, IntentOntology, Slot, Topic};
use intentloop_core::ope::{ncis_evaluate, rs_evaluate, LoggedDecision, TargetPolicy, UniformPolicy};
use intentloop_core::profile::IntentProfile;
use intentloop_core::qpp::wf_closeness;
use intentloop_core::rng::derived_rng;
use intentloop_core::Result;
use proptest::prelude::*;

fn ontology(n: usize) -> (IntentOntology, IntentKey, Vec<String>) {
    let slots: Vec<Slot> = (0..n)
        .map(|i| Slot {
            id: format!("x.s{i:02}"),
            topic_id: "t".into(),
            intent_id: "x".into(),
            label: format!("slot {i}"),
            curated: false,
        })
        .collect();
    let ids = slots.iter().map(|s| s.id.clone()).collect();
    let ont = IntentOntology::new(
        vec![Topic { id: "t".into(), label: "t".into() }],
        vec![Intent { id: "x".into(), topic_id: "t".into(), label: "x".into() }],
        slots,
    )
    .unwrap();
    (ont, IntentKey::new("t", "x"), ids)
}

/// Fixed positive weights per arm name, normalized over the eligible arms.
struct Weighted(Vec<f64>);

impl TargetPolicy for Weighted {
    fn action_probabilities(&self, _context: &[f64], eligible: &[String]) -> Result<Vec<f64>> {
        let w: Vec<f64> = eligible.iter().map(|a| self.0[a[1..].parse::<usize>().unwrap() % self.0.len()]).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / total).collect())
    }
}

fn arms(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("a{i}")).collect()
}

prop_compose! {
    fn decision()(k in 1usize..6)(
        k in Just(k),
        pick in 0..k,
        reward in prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }),
        propensity in 0.01f64..=1.0,
    ) -> LoggedDecision {
        LoggedDecision { context: vec![1.0], action: format!("a{pick}"), reward, propensity, eligible: arms(k) }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn profile_stays_normalized(n in 1usize..25, calls in prop::collection::vec(prop::collection::vec(0usize..100, 1..4), 0..200)) {
        let (ont, key, ids) = ontology(n);
        let mut p = IntentProfile::new();
        for call in calls {
            let picks: Vec<String> = call.iter().map(|i| ids[i % n].clone()).collect();
            p.record_interaction(&ont, &key, &picks).unwrap();
            let dist = p.distribution(&ont, &key).unwrap();
            let total: f64 = dist.iter().map(|(_, x)| x).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(dist.iter().all(|(_, x)| (0.0..=1.0).contains(x)));
        }
        let t = p.stopping_threshold(&ont, &key).unwrap();
        prop_assert!(t >= 1.0 / n as f64 - 1e-12 && t <= 1.0 + 1e-12);
    }

    #[test]
    fn completion_score_grows_with_selection(
        n in 2usize..25,
        counts in prop::collection::vec(0usize..100, 0..60),
        mentioned in 0usize..4,
        order in Just(()).prop_perturb(|_, mut rng| rng.random::<u64>()),
    ) {
        let (ont, key, ids) = ontology(n);
        let mut p = IntentProfile::new();
        for c in counts {
            p.record_interaction(&ont, &key, std::slice::from_ref(&ids[c % n])).unwrap();
        }
        let mut frame = SemanticFrame::new(&key);
        let mentioned = mentioned.min(n - 1);
        for id in &ids[..mentioned] {
            frame.mention(id.clone(), None);
        }
        let mut rest: Vec<String> = ids[mentioned..].to_vec();
        let mut rng = derived_rng(order, &[]);
        rand::seq::SliceRandom::shuffle(rest.as_mut_slice(), &mut rng);
        let mut selected = Vec::new();
        let mut last = p.intent_completion_score(&ont, &frame, &selected).unwrap();
        for id in rest {
            selected.push(id);
            let ics = p.intent_completion_score(&ont, &frame, &selected).unwrap();
            prop_assert!(ics >= last - 1e-12);
            prop_assert!((0.0..=1.0).contains(&ics));
            last = ics;
        }
        prop_assert!((last - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncis_stays_within_logged_rewards(
        logs in prop::collection::vec(decision(), 1..80),
        weights in prop::collection::vec(0.01f64..10.0, 1..6),
        cap in 1.0f64..50.0,
    ) {
        let lo = logs.iter().map(|d| d.reward).fold(f64::INFINITY, f64::min);
        let hi = logs.iter().map(|d| d.reward).fold(f64::NEG_INFINITY, f64::max);
        for est in [ncis_evaluate(&logs, &Weighted(weights.clone()), cap), ncis_evaluate(&logs, &UniformPolicy, cap)] {
            let e = est.unwrap().estimate;
            prop_assert!(e >= lo - 1e-12 && e <= hi + 1e-12, "{} outside [{}, {}]", e, lo, hi);
        }
    }

    #[test]
    fn closeness_is_a_fraction(edges in prop::collection::vec((0usize..12, 0usize..12), 0..40), n in 1usize..12) {
        let mut adj = vec![Vec::new(); n];
        for (a, b) in edges {
            let (a, b) = (a % n, b % n);
            if a != b && !adj[a].contains(&b) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for v in 0..n {
            let c = wf_closeness(&adj, v);
            prop_assert!((0.0..=1.0).contains(&c));
            if adj[v].len() == n - 1 && n > 1 {
                prop_assert!((c - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_probabilities_are_distributions(kind_ix in 0usize..8, seed in any::<u64>(), steps in 0usize..40) {
        let kind = PolicyKind::ALL[kind_ix % PolicyKind::ALL.len()];
        let slots = arms(6);
        let key = IntentKey::new("t", "x");
        let mut m = BanditModel::new(key, slots.clone(), 3, PolicyConfig::new(kind).with_seed(seed));
        let mut rng = derived_rng(seed, &[]);
        for _ in 0..steps {
            let mut ctx = vec![0.0; 3];
            ctx[rand::Rng::random_range(&mut rng, 0..3)] = 1.0;
            let shown = m.suggest(&ctx, &HashSet::new(), 2).unwrap();
            let sel: Vec<String> = shown.iter().filter(|_| rand::Rng::random_bool(&mut rng, 0.3)).cloned().collect();
            m.update(&ctx, &shown, &sel).unwrap();
        }
        let probs = m.action_probabilities(&[1.0, 0.0, 0.0], &slots[1..]).unwrap();
        prop_assert_eq!(probs.len(), 5);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let text = m.to_checkpoint_json();
        prop_assert_eq!(BanditModel::from_checkpoint_json(&text).unwrap().to_checkpoint_json(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rejection_sampling_accepts_about_one_in_k(k in 2usize..8, seed in any::<u64>()) {
        let mut rng = derived_rng(seed, &[1]);
        let logs: Vec<LoggedDecision> = (0..4000)
            .map(|_| {
                let pick = rand::Rng::random_range(&mut rng, 0..k);
                LoggedDecision { context: vec![1.0], action: format!("a{pick}"), reward: 1.0, propensity: 1.0 / k as f64, eligible: arms(k) }
            })
            .collect();
        let est = rs_evaluate(&logs, &UniformPolicy, &mut rng).unwrap();
        let rate = est.accepted as f64 / est.n as f64;
        prop_assert!((rate - 1.0 / k as f64).abs() < 0.04, "rate {} for {} arms", rate, k);
    }
}
