//! Shared fixtures for the integration suites.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ananke::ingest::LogSet;
use ananke::model::{Entity, EntityKind, Event, KillChainPhase};
use ananke::scenario::{GeneratedScenario, PhasePlan, ScenarioSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An entity drawn from a pool of `pool` names per kind, so random event sets
/// have realistic key reuse.
pub fn random_entity(rng: &mut ChaCha8Rng, pool: usize) -> Entity {
    let j = rng.gen_range(0..pool);
    match rng.gen_range(0..4u8) {
        0 => Entity::new(EntityKind::Process, format!("proc_{j}.exe"), Some(1000 + j as u32)).unwrap(),
        1 => Entity::new(EntityKind::File, format!("c:/data/file_{j}.bin"), None).unwrap(),
        2 => Entity::new(EntityKind::IpAddress, format!("10.1.{}.{}", j / 250, 1 + j % 250), None).unwrap(),
        _ => Entity::new(EntityKind::Domain, format!("host{j}.example.com"), None).unwrap(),
    }
}

pub fn random_events(rng: &mut ChaCha8Rng, n: usize, pool: usize) -> Vec<Event> {
    (0..n)
        .map(|i| Event {
            timestamp: rng.gen_range(0..10_000),
            host_id: "h1".into(),
            subject: random_entity(rng, pool),
            action: ["read", "write", "connect", "spawn"][rng.gen_range(0..4)].into(),
            object: random_entity(rng, pool),
            seq_no: i as u64,
            raw_ref: None,
        })
        .collect()
}

pub fn random_log_set(rng: &mut ChaCha8Rng, n: usize, pool: usize) -> LogSet {
    LogSet::from_events(random_events(rng, n, pool), vec![])
}

/// Scenario spec in the large-benign-background regime: 5k benign events, a
/// 50-step attack, malicious entity fraction around one percent.
pub fn eb_spec(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        benign_events: 5_000,
        phases: vec![
            PhasePlan { phase: KillChainPhase::Delivery, steps: 10 },
            PhasePlan { phase: KillChainPhase::Exploitation, steps: 10 },
            PhasePlan { phase: KillChainPhase::Installation, steps: 10 },
            PhasePlan { phase: KillChainPhase::CommandAndControl, steps: 10 },
            PhasePlan { phase: KillChainPhase::ActionsOnObjectives, steps: 10 },
        ],
        hosts: 2,
        malicious_entity_count: 40,
        time_span_secs: 86_400,
    }
}

/// Ground-truth keys in the order the attack chain created them, recovered as
/// first appearance in the time-sorted log. Each chain entity debuts as the
/// object of the event that wired it in, so this is creation order.
pub fn chain_in_first_seen_order(scenario: &GeneratedScenario) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut chain = Vec::new();
    for ev in &scenario.log_set.events {
        for key in [&ev.subject.canonical_key, &ev.object.canonical_key] {
            if scenario.ground_truth.contains(key) && seen.insert(key.clone()) {
                chain.push(key.clone());
            }
        }
    }
    chain
}
