//! Synthetic scenario generation for tests, benchmarks, and offline runs.
//!
//! A scenario is benign background noise plus one connected attack chain laid
//! out along a phase plan. Every malicious entity name embeds the seed in hex,
//! so two scenarios from different seeds have (almost surely) disjoint ground
//! truth; `generate_pair` verifies that instead of assuming it. Generation is
//! a pure function of the spec.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{self, IngestError, LogFormat, LogSet};
use crate::investigator::AlertSpec;
use crate::model::{Entity, EntityKind, Event, KillChainPhase, MaliciousEntitySet, ModelError};

/// Epoch-like base so generated timestamps look like real ones.
const BASE_TS: u64 = 1_700_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario spec: {0}")]
    SpecInvalid(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path, source: std::io::Error) -> ScenarioError {
    ScenarioError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: KillChainPhase,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub benign_events: usize,
    /// Attack phases in chain order; each step is one attack event.
    pub phases: Vec<PhasePlan>,
    pub hosts: usize,
    /// Entities in the attack chain, including the initial process.
    pub malicious_entity_count: usize,
    pub time_span_secs: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        let phases = [
            (KillChainPhase::Delivery, 2),
            (KillChainPhase::Exploitation, 2),
            (KillChainPhase::Installation, 2),
            (KillChainPhase::CommandAndControl, 2),
            (KillChainPhase::ActionsOnObjectives, 2),
        ];
        ScenarioSpec {
            seed: 7,
            benign_events: 200,
            phases: phases.into_iter().map(|(phase, steps)| PhasePlan { phase, steps }).collect(),
            hosts: 2,
            malicious_entity_count: 6,
            time_span_secs: 3600,
        }
    }
}

impl ScenarioSpec {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::SpecInvalid(msg));
        if self.phases.is_empty() {
            return fail("phase plan is empty".into());
        }
        if self.phases.iter().any(|p| p.steps == 0) {
            return fail("every phase needs at least one step".into());
        }
        if self.phases.windows(2).any(|w| w[0].phase > w[1].phase) {
            return fail("phases must follow kill chain order".into());
        }
        if self.hosts == 0 {
            return fail("need at least one host".into());
        }
        if self.time_span_secs == 0 {
            return fail("time span must be positive".into());
        }
        if self.malicious_entity_count == 0 {
            return fail("need at least one malicious entity".into());
        }
        // one new entity per step at most, plus the initial process
        let cap = 1 + self.total_steps();
        if self.malicious_entity_count > cap {
            return fail(format!("malicious_entity_count {} exceeds 1 + total steps ({cap})", self.malicious_entity_count));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub scenario_id: String,
    pub seed: u64,
    pub hosts: usize,
    pub benign_events: usize,
    pub attack_events: usize,
    pub malicious_entities: usize,
    pub time_span_secs: u64,
    pub phases: Vec<PhasePlan>,
}

#[derive(Debug)]
pub struct GeneratedScenario {
    pub log_set: LogSet,
    pub ground_truth: MaliciousEntitySet,
    pub alert: AlertSpec,
    pub phase_hints: BTreeMap<String, KillChainPhase>,
    pub manifest: ScenarioManifest,
}

fn mk(kind: EntityKind, name: String, pid: Option<u32>) -> Entity {
    Entity::new(kind, name, pid).expect("generated names are valid")
}

/// A new chain entity flavored for the phase it appears in. Non-IP names embed
/// the seed hex so ground truths from different seeds do not collide.
fn spawn_entity(phase: KillChainPhase, sx: &str, seed: u64, i: usize, rng: &mut ChaCha8Rng) -> Entity {
    use EntityKind::*;
    match phase {
        KillChainPhase::Reconnaissance => {
            if rng.gen_bool(0.5) {
                mk(Domain, format!("recon-{sx}-{i}.example.net"), None)
            } else {
                mk(IpAddress, format!("198.51.{}.{}", seed % 200, i % 250), None)
            }
        }
        KillChainPhase::Weaponization => mk(File, format!("c:/users/victim/build/payload_{sx}_{i}.bin"), None),
        KillChainPhase::Delivery => {
            if rng.gen_bool(0.5) {
                mk(File, format!("c:/users/victim/downloads/dropper_{sx}_{i}.exe"), None)
            } else {
                mk(Process, format!("phish_{sx}_{i}.exe"), Some(rng.gen_range(1000..60000)))
            }
        }
        KillChainPhase::Exploitation => mk(Process, format!("exploit_{sx}_{i}.exe"), Some(rng.gen_range(1000..60000))),
        KillChainPhase::Installation => {
            if rng.gen_bool(0.5) {
                mk(Registry, format!("hklm/software/microsoft/windows/run/implant_{sx}_{i}"), None)
            } else {
                mk(File, format!("c:/programdata/implant_{sx}_{i}.dll"), None)
            }
        }
        KillChainPhase::CommandAndControl => {
            if rng.gen_bool(0.5) {
                mk(IpAddress, format!("203.0.{}.{}", seed % 200, i % 250), None)
            } else {
                mk(Domain, format!("c2-{sx}-{i}.example.org"), None)
            }
        }
        KillChainPhase::ActionsOnObjectives => mk(File, format!("c:/users/victim/documents/exfil_{sx}_{i}.zip"), None),
    }
}

fn attack_action(object_kind: EntityKind) -> &'static str {
    use EntityKind::*;
    match object_kind {
        Process => "spawn",
        File => "write",
        IpAddress => "connect",
        Domain => "resolve",
        Registry => "set",
        Socket | Other => "touch",
    }
}

fn benign_event(j: usize, ts: u64, host: String, rng: &mut ChaCha8Rng) -> Event {
    use EntityKind::*;
    let (subject, action, object) = match rng.gen_range(0..5u8) {
        0 => (mk(Process, "chrome.exe".into(), None), "read", mk(File, format!("c:/users/user/appdata/local/cache_{j}.tmp"), None)),
        1 => (
            mk(Process, "chrome.exe".into(), None),
            "connect",
            mk(IpAddress, format!("10.{}.{}.{}", rng.gen_range(0..256), rng.gen_range(0..256), rng.gen_range(1..255)), None),
        ),
        2 => (mk(Process, "chrome.exe".into(), None), "resolve", mk(Domain, format!("cdn{j}.example.com"), None)),
        3 => (mk(Process, "svchost.exe".into(), None), "read", mk(File, format!("c:/windows/system32/svc_{j}.dll"), None)),
        _ => (mk(Process, "explorer.exe".into(), None), "write", mk(File, format!("c:/users/user/documents/doc_{j}.docx"), None)),
    };
    Event { timestamp: ts, host_id: host, subject, action: action.into(), object, seq_no: 0, raw_ref: None }
}

pub fn generate(spec: &ScenarioSpec) -> Result<GeneratedScenario, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sx = format!("{:08x}", spec.seed);
    let scenario_id = format!("scn-{sx}");
    let span = spec.time_span_secs;
    let total_steps = spec.total_steps() as u64;

    // attack chain: stage0 plus one new entity per early step until the
    // entity budget runs out, each wired to an existing chain process
    let stage0 = mk(EntityKind::Process, format!("stage0_{sx}.exe"), Some(rng.gen_range(1000..60000)));
    let mut chain: Vec<Entity> = vec![stage0.clone()];
    let mut phase_hints: BTreeMap<String, KillChainPhase> = BTreeMap::new();
    phase_hints.insert(stage0.canonical_key.clone(), spec.phases[0].phase);

    let mut budget = spec.malicious_entity_count - 1;
    let mut attack_events: Vec<Event> = Vec::new();
    let mut step = 0u64;
    for plan in &spec.phases {
        for _ in 0..plan.steps {
            // middle third of the span, strictly inside the benign envelope
            let ts = BASE_TS + span / 3 + (step * (span / 3)) / total_steps;
            let procs: Vec<&Entity> = chain.iter().filter(|e| e.kind == EntityKind::Process).collect();
            let parent = procs[rng.gen_range(0..procs.len())].clone();
            let (subject, object) = if budget > 0 {
                budget -= 1;
                let fresh = spawn_entity(plan.phase, &sx, spec.seed, step as usize, &mut rng);
                phase_hints.insert(fresh.canonical_key.clone(), plan.phase);
                chain.push(fresh.clone());
                (parent, fresh)
            } else {
                // revisit the chain; self-loops are fine for a lone entity
                let target = chain[rng.gen_range(0..chain.len())].clone();
                (parent, target)
            };
            let action = attack_action(object.kind);
            attack_events.push(Event {
                timestamp: ts,
                host_id: "h1".into(),
                subject,
                action: action.into(),
                object,
                seq_no: 0,
                raw_ref: None,
            });
            step += 1;
        }
    }

    let mut benign_events: Vec<Event> = Vec::new();
    for j in 0..spec.benign_events {
        // pin the envelope so the attack sits strictly inside it
        let ts = if j == 0 {
            BASE_TS
        } else if j == spec.benign_events - 1 {
            BASE_TS + span
        } else {
            BASE_TS + rng.gen_range(0..=span)
        };
        let host = format!("h{}", 1 + rng.gen_range(0..spec.hosts));
        benign_events.push(benign_event(j, ts, host, &mut rng));
    }

    let mut events = benign_events;
    events.extend(attack_events);
    // creation order breaks timestamp ties during the sort; renumbering by
    // final position afterwards makes write + reload reproduce seq_no exactly
    for (i, ev) in events.iter_mut().enumerate() {
        ev.seq_no = i as u64;
    }
    let mut log_set = LogSet::from_events(events, vec![]);
    for (i, ev) in log_set.events.iter_mut().enumerate() {
        ev.seq_no = i as u64;
    }

    let ground_truth = MaliciousEntitySet::from_keys(scenario_id.clone(), chain.iter().map(|e| e.canonical_key.as_str()))?;
    let alert = AlertSpec {
        entities: vec![stage0.canonical_key.clone()],
        description: format!("endpoint sensor flagged {} on h1", stage0.raw_name),
    };
    let manifest = ScenarioManifest {
        scenario_id,
        seed: spec.seed,
        hosts: spec.hosts,
        benign_events: spec.benign_events,
        attack_events: total_steps as usize,
        malicious_entities: chain.len(),
        time_span_secs: span,
        phases: spec.phases.clone(),
    };
    Ok(GeneratedScenario { log_set, ground_truth, alert, phase_hints, manifest })
}

/// A knowledge-base scenario and a target scenario cut from the same spec
/// with different seeds. Fails if their ground truths intersect (pick other
/// seeds in that case) so downstream evaluation can rely on disjointness.
pub fn generate_pair(spec: &ScenarioSpec, target_seed: u64) -> Result<(GeneratedScenario, GeneratedScenario), ScenarioError> {
    let kb_side = generate(spec)?;
    let target = generate(&ScenarioSpec { seed: target_seed, ..spec.clone() })?;
    let overlap: Vec<&str> = kb_side.ground_truth.keys().filter(|k| target.ground_truth.contains(k)).collect();
    if !overlap.is_empty() {
        return Err(ScenarioError::SpecInvalid(format!(
            "seeds {} and {target_seed} share ground truth entities: {overlap:?}",
            spec.seed
        )));
    }
    Ok((kb_side, target))
}

/// On-disk ground truth: labeled keys plus the per-entity phase hints that
/// the deterministic test oracle consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub scenario_id: String,
    pub keys: Vec<String>,
    #[serde(default)]
    pub phase_hints: BTreeMap<String, KillChainPhase>,
}

impl GroundTruthFile {
    pub fn to_set(&self) -> Result<MaliciousEntitySet, ModelError> {
        MaliciousEntitySet::from_keys(self.scenario_id.clone(), self.keys.iter())
    }
}

pub fn write_scenario_dir(dir: &Path, scenario: &GeneratedScenario) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    ingest::write_log_set(&scenario.log_set, &dir.join("events.jsonl"))?;

    let gt = GroundTruthFile {
        scenario_id: scenario.ground_truth.scenario_id.clone(),
        keys: scenario.ground_truth.keys().map(str::to_string).collect(),
        phase_hints: scenario.phase_hints.clone(),
    };
    let write_json = |name: &str, text: String| -> Result<(), ScenarioError> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    };
    write_json("ground_truth.json", serde_json::to_string_pretty(&gt).expect("serializes"))?;
    write_json("alert.json", serde_json::to_string_pretty(&scenario.alert).expect("serializes"))?;
    write_json("manifest.json", serde_json::to_string_pretty(&scenario.manifest).expect("serializes"))
}

#[derive(Debug)]
pub struct LoadedScenario {
    pub log_set: LogSet,
    pub ground_truth: MaliciousEntitySet,
    pub phase_hints: BTreeMap<String, KillChainPhase>,
    pub alert: AlertSpec,
    pub manifest: Option<ScenarioManifest>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Parse { path: path.display().to_string(), detail: e.to_string() })
}

pub fn load_scenario_dir(dir: &Path) -> Result<LoadedScenario, ScenarioError> {
    let (log_set, _report) = ingest::load_log_set(&[dir.join("events.jsonl")], LogFormat::JsonEvent, true)?;
    let gt: GroundTruthFile = read_json(&dir.join("ground_truth.json"))?;
    let alert: AlertSpec = read_json(&dir.join("alert.json"))?;
    let manifest_path = dir.join("manifest.json");
    let manifest = if manifest_path.exists() { Some(read_json(&manifest_path)?) } else { None };
    Ok(LoadedScenario { log_set, ground_truth: gt.to_set()?, phase_hints: gt.phase_hints, alert, manifest })
}

/// Paths of the files `write_scenario_dir` produces.
pub fn scenario_files(dir: &Path) -> [PathBuf; 4] {
    [dir.join("events.jsonl"), dir.join("ground_truth.json"), dir.join("alert.json"), dir.join("manifest.json")]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashMap};

    fn small_spec(seed: u64) -> ScenarioSpec {
        ScenarioSpec { seed, benign_events: 40, hosts: 2, malicious_entity_count: 5, ..Default::default() }
    }

    #[test]
    fn generation_is_a_pure_function_of_the_spec() {
        let a = generate(&small_spec(42)).unwrap();
        let b = generate(&small_spec(42)).unwrap();
        assert_eq!(a.log_set.events, b.log_set.events);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.phase_hints, b.phase_hints);
        assert_eq!(a.alert.entities, b.alert.entities);
    }

    #[test]
    fn different_seeds_give_disjoint_ground_truth() {
        let (kb_side, target) = generate_pair(&small_spec(42), 43).unwrap();
        let a: BTreeSet<&str> = kb_side.ground_truth.keys().collect();
        let b: BTreeSet<&str> = target.ground_truth.keys().collect();
        assert!(a.is_disjoint(&b));
        assert!(matches!(generate_pair(&small_spec(42), 42), Err(ScenarioError::SpecInvalid(_))));
    }

    #[test]
    fn events_partition_into_pure_attack_and_pure_benign() {
        let s = generate(&small_spec(7)).unwrap();
        let gt = &s.ground_truth;
        let mut attack = 0;
        for ev in &s.log_set.events {
            let ins = gt.contains(&ev.subject.canonical_key);
            let outs = gt.contains(&ev.object.canonical_key);
            assert_eq!(ins, outs, "mixed event: {} {} {}", ev.subject.canonical_key, ev.action, ev.object.canonical_key);
            if ins {
                attack += 1;
            }
        }
        assert_eq!(attack, s.manifest.attack_events);
        assert_eq!(s.log_set.events.len(), s.manifest.attack_events + s.manifest.benign_events);
    }

    #[test]
    fn ground_truth_is_one_connected_component_containing_the_alert() {
        let s = generate(&small_spec(99)).unwrap();
        let keys: Vec<&str> = s.ground_truth.keys().collect();
        let idx: HashMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        // union-find over attack edges
        let mut parent: Vec<usize> = (0..keys.len()).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for ev in &s.log_set.events {
            if let (Some(&a), Some(&b)) =
                (idx.get(ev.subject.canonical_key.as_str()), idx.get(ev.object.canonical_key.as_str()))
            {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
        let root = find(&mut parent, idx[s.alert.entities[0].as_str()]);
        for i in 0..keys.len() {
            assert_eq!(find(&mut parent, i), root, "{} is disconnected from the alert", keys[i]);
        }
    }

    #[test]
    fn counts_and_hints_line_up() {
        let spec = small_spec(3);
        let s = generate(&spec).unwrap();
        assert_eq!(s.ground_truth.len(), spec.malicious_entity_count);
        assert_eq!(s.manifest.benign_events, spec.benign_events);
        assert_eq!(s.manifest.attack_events, spec.total_steps());
        // every malicious entity has a phase hint
        for key in s.ground_truth.keys() {
            assert!(s.phase_hints.contains_key(key), "no hint for {key}");
        }
        // events are time ordered
        assert!(s.log_set.events.windows(2).all(|w| w[0].order_key() <= w[1].order_key()));
    }

    #[test]
    fn no_benign_noise_is_allowed() {
        let spec = ScenarioSpec { benign_events: 0, ..small_spec(5) };
        let s = generate(&spec).unwrap();
        assert_eq!(s.log_set.events.len(), spec.total_steps());
    }

    #[test]
    fn bad_specs_are_rejected() {
        let base = small_spec(1);
        for (spec, needle) in [
            (ScenarioSpec { phases: vec![], ..base.clone() }, "empty"),
            (
                ScenarioSpec {
                    phases: vec![
                        PhasePlan { phase: KillChainPhase::Installation, steps: 1 },
                        PhasePlan { phase: KillChainPhase::Delivery, steps: 1 },
                    ],
                    ..base.clone()
                },
                "order",
            ),
            (ScenarioSpec { hosts: 0, ..base.clone() }, "host"),
            (ScenarioSpec { malicious_entity_count: 0, ..base.clone() }, "malicious"),
            (ScenarioSpec { malicious_entity_count: 999, ..base.clone() }, "exceeds"),
            (ScenarioSpec { time_span_secs: 0, ..base.clone() }, "span"),
        ] {
            match generate(&spec) {
                Err(ScenarioError::SpecInvalid(msg)) => assert!(msg.contains(needle), "{msg:?} lacks {needle:?}"),
                other => panic!("expected SpecInvalid, got {other:?}"),
            }
        }
    }

    #[test]
    fn scenario_dir_round_trips() {
        let s = generate(&small_spec(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scenario_dir(dir.path(), &s).unwrap();
        for f in scenario_files(dir.path()) {
            assert!(f.exists(), "{f:?} missing");
        }
        let loaded = load_scenario_dir(dir.path()).unwrap();
        assert_eq!(loaded.log_set.events, s.log_set.events);
        assert_eq!(loaded.ground_truth, s.ground_truth);
        assert_eq!(loaded.phase_hints, s.phase_hints);
        assert_eq!(loaded.alert.entities, s.alert.entities);
        assert_eq!(loaded.manifest.unwrap().seed, 11);
    }
}
