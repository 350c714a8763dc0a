use cobackup::model::{DataItem, TerminalId, VersionKey};
use cobackup::sim::{self, Evaluation, Outcome, ScenarioConfig, TraceKind};
use serde_json::{json, Value};

fn scenario(value: Value) -> ScenarioConfig {
    serde_json::from_value(value).expect("scenario parses")
}

fn item(id: u64, owner: u32, size: u64, priority: f64, n: u8, k: u8) -> Value {
    serde_json::to_value(DataItem::new(id, TerminalId(owner), size, priority, n, k)).unwrap()
}

fn produce(time: f64, item: Value) -> Value {
    json!({"time": time, "event": {"kind": "data_produced", "item": item}})
}

fn encounter(time: f64, a: u32, b: u32, budget: u64) -> Value {
    json!({"time": time, "event": {"kind": "encounter", "a": a, "b": b, "duration": budget as f64, "bandwidth": 1.0}})
}

fn window(time: f64, terminal: u32, budget: u64) -> Value {
    json!({"time": time, "event": {"kind": "internet_window", "terminal": terminal, "duration": budget as f64, "bandwidth": 1.0}})
}

fn failure(time: f64, terminal: u32) -> Value {
    json!({"time": time, "event": {"kind": "terminal_failure", "terminal": terminal}})
}

fn two_terminals(script: Vec<Value>) -> ScenarioConfig {
    scenario(json!({
        "seed": 3,
        "horizon": 100.0,
        "restore_delay": 5.0,
        "terminals": [
            {"count": 1, "quota_bytes": 100000, "base_reliability": 0.5},
            {"count": 1, "quota_bytes": 100000, "base_reliability": 0.5, "can_fail": false}
        ],
        "payload_mode": true,
        "script": script
    }))
}

#[test]
fn no_backup_path_loses_everything() {
    let cfg = two_terminals(vec![
        produce(1.0, item(1, 0, 1000, 0.9, 4, 2)),
        produce(2.0, item(2, 0, 500, 0.3, 2, 1)),
        failure(10.0, 0),
    ]);
    let r = sim::run(&cfg).unwrap();
    assert_eq!(r.items_exposed, 2);
    assert_eq!(r.exposed_lost, 2);
    assert_eq!(r.loss_ratio, 1.0);
}

#[test]
fn ample_window_puts_everything_on_the_server() {
    let cfg = two_terminals(vec![
        produce(1.0, item(1, 0, 1000, 0.9, 4, 2)),
        produce(2.0, item(2, 0, 500, 0.3, 2, 1)),
        window(5.0, 0, 1_000_000),
        failure(10.0, 0),
    ]);
    let r = sim::run(&cfg).unwrap();
    assert_eq!(r.items_exposed, 2);
    assert!(r.items.iter().all(|i| i.outcome == Outcome::SafeOnServer));
    assert_eq!(r.loss_ratio, 0.0);
    assert_eq!(r.owner_upload_bytes, 1500);
}

/// Saves exactly `saved` fragments of an (n, k) item on the peer, fails the
/// owner and reports the outcome. The link budget admits `saved` fragments.
fn peer_threshold_case(n: u8, k: u8, saved: u8) -> (Outcome, u64, u64) {
    let size = 600;
    let frag = DataItem::new(1, TerminalId(0), size, 1.0, n, k).fragment_payload_bytes();
    let cfg = two_terminals(vec![
        produce(1.0, item(1, 0, size, 1.0, n, k)),
        encounter(2.0, 0, 1, frag * u64::from(saved)),
        failure(10.0, 0),
    ]);
    let r = sim::run(&cfg).unwrap();
    assert_eq!(r.items.len(), 1);
    assert_eq!(r.items[0].fragments_saved, saved);
    (r.items[0].outcome, r.payload_checks, r.payload_mismatches)
}

#[test]
fn peer_restore_needs_k_fragments() {
    for n in 1..=5u8 {
        for k in 1..=n {
            for saved in 0..=n {
                let (outcome, checks, mismatches) = peer_threshold_case(n, k, saved);
                let expected = if saved >= k {
                    Outcome::RecoverableFromPeers
                } else {
                    Outcome::Lost
                };
                assert_eq!(outcome, expected, "n={n} k={k} saved={saved}");
                if expected == Outcome::RecoverableFromPeers {
                    assert_eq!((checks, mismatches), (1, 0), "payload round trip n={n} k={k}");
                }
            }
        }
    }
}

#[test]
fn restore_needs_the_whole_dependency_chain() {
    let v1 = DataItem::new(1, TerminalId(0), 300, 1.0, 1, 1);
    let v2 = v1.clone().with_version(2).with_deps([VersionKey::new(1, 1)]).created(3.0);
    let frag = v1.fragment_payload_bytes();
    let with_v1 = two_terminals(vec![
        produce(1.0, serde_json::to_value(&v1).unwrap()),
        encounter(2.0, 0, 1, frag),
        produce(3.0, serde_json::to_value(&v2).unwrap()),
        encounter(4.0, 0, 1, frag),
        failure(10.0, 0),
    ]);
    let r = sim::run(&with_v1).unwrap();
    let v2_outcome = r.items.iter().find(|i| i.item == VersionKey::new(1, 2)).unwrap();
    assert_eq!(v2_outcome.outcome, Outcome::RecoverableFromPeers);

    // v1's only holder dies: v2 alone is useless
    let mut lost_chain = two_terminals(vec![
        produce(1.0, serde_json::to_value(&v1).unwrap()),
        encounter(2.0, 0, 1, frag),
        produce(3.0, serde_json::to_value(&v2).unwrap()),
        encounter(4.0, 0, 2, frag),
        failure(8.0, 1),
        failure(10.0, 0),
    ]);
    lost_chain.terminals[1].count = 2;
    let r = sim::run(&lost_chain).unwrap();
    let v2_outcome = r.items.iter().find(|i| i.item == VersionKey::new(1, 2)).unwrap();
    assert_eq!(v2_outcome.fragments_saved, 1);
    assert_eq!(v2_outcome.outcome, Outcome::Lost);
}

#[test]
fn peers_flush_to_the_server() {
    let cfg = two_terminals(vec![
        produce(1.0, item(1, 0, 400, 1.0, 2, 1)),
        encounter(2.0, 0, 1, 10_000),
        failure(3.0, 0),
        window(4.0, 1, 10_000),
    ]);
    let (r, trace) = sim::run_traced(&cfg).unwrap();
    assert_eq!(r.items[0].outcome, Outcome::SafeOnServer);
    assert!(r.peer_flush_bytes > 0);
    assert!(trace.iter().any(|t| t.kind == TraceKind::PeerFlush));
}

fn random_scenario(seed: u64, peer_backup: bool) -> ScenarioConfig {
    scenario(json!({
        "seed": seed,
        "horizon": 3600.0,
        "peer_backup": peer_backup,
        "evict_on_pressure": true,
        "occupancy_sample_interval": 600.0,
        "terminals": [{"count": 8, "quota_bytes": 20000, "base_reliability": 0.7, "true_reliability": 0.6}],
        "workload": {
            "production_interval": {"kind": "exponential", "mean": 300.0},
            "size_bytes": {"kind": "uniform", "low": 200.0, "high": 3000.0},
            "priority": {"kind": "uniform", "low": 0.2, "high": 1.0},
            "n": 4, "k": 2,
            "dependencies": {"kind": "chain", "update_probability": 0.4},
            "lifetime": {"kind": "exponential", "mean": 2000.0}
        },
        "mobility": {
            "inter_contact": {"kind": "exponential", "mean": 120.0},
            "contact_duration": {"kind": "exponential", "mean": 20.0},
            "bandwidth_bytes_per_s": 500.0
        },
        "infrastructure": {
            "window_interval": {"kind": "exponential", "mean": 1200.0},
            "window_duration": {"kind": "constant", "value": 30.0},
            "bandwidth_bytes_per_s": 2000.0
        },
        "failures": {"time_to_failure": {"kind": "exponential", "mean": 2000.0}, "restore_delay": 60.0},
        "payload_mode": true
    }))
}

#[test]
fn outcomes_partition_items_and_restores_are_sound() {
    for seed in 0..5 {
        let (r, trace) = sim::run_traced(&random_scenario(seed, true)).unwrap();
        assert_eq!(r.safe_on_server + r.recoverable_from_peers + r.lost, r.items_total);
        let produced = trace.iter().filter(|t| t.kind == TraceKind::Produce).count() as u64;
        assert_eq!(produced, r.items_total, "every produced version is settled once");
        let mut keys: Vec<_> = r.items.iter().map(|i| i.item).collect();
        keys.dedup();
        assert_eq!(keys.len(), r.items.len());
        assert!((0.0..=1.0).contains(&r.loss_ratio));
        assert!((0.0..=1.0).contains(&r.unprotected_ratio));
        assert_eq!(r.payload_mismatches, 0);
        assert!(r.payload_checks > 0, "seed {seed} exercised no peer restore");
        assert!(r.occupancy.iter().all(|o| o.used_bytes <= o.quota_bytes));
        // peer-to-peer copying never happens: every peer save comes from the owner
        for t in trace.iter().filter(|t| t.kind == TraceKind::PeerSave) {
            assert_eq!(t.from, t.owner);
        }
        assert_eq!(
            r.items.iter().filter(|i| i.evaluation == Evaluation::Restore).count() as u64,
            r.items_exposed
        );
    }
}

#[test]
fn disabling_peer_backup_removes_peer_traffic() {
    let r = sim::run(&random_scenario(1, false)).unwrap();
    assert_eq!(r.peer_bytes, 0);
    assert_eq!(r.recoverable_from_peers, 0);
}

#[test]
fn same_seed_same_report() {
    let cfg = random_scenario(11, true);
    let a = serde_json::to_string(&sim::run(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&sim::run(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = serde_json::to_string(&sim::run(&random_scenario(12, true)).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn report_json_round_trips() {
    let r = sim::run(&random_scenario(4, true)).unwrap();
    let text = serde_json::to_string(&r).unwrap();
    let back: sim::MetricsReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}

#[test]
fn one_replication_matches_run() {
    let cfg = random_scenario(21, true);
    let run = sim::run(&cfg).unwrap();
    let batch = sim::run_batch(&cfg, 1, false).unwrap();
    for (name, value) in run.scalars() {
        let s = batch.metrics[&name];
        assert_eq!(s.mean, value, "{name}");
        assert_eq!(s.std_err, 0.0);
    }
}

#[test]
fn parallel_batch_equals_sequential() {
    let cfg = random_scenario(5, true);
    let a = sim::run_batch(&cfg, 6, true).unwrap();
    let b = sim::run_batch(&cfg, 6, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_replications_is_rejected() {
    let err = sim::run_batch(&random_scenario(1, true), 0, false).unwrap_err();
    assert!(err.is_config());
}

#[test]
fn interval_width_shrinks_like_inverse_sqrt() {
    let mut cfg = random_scenario(100, true);
    cfg.payload_mode = false;
    cfg.horizon = 1800.0;
    let reports = sim::run_replications(&cfg, 1000, true).unwrap();
    let width = |r: usize| sim::summarize(0, &reports[..r]).metrics["loss_ratio"].width();
    let (w10, w100, w1000) = (width(10), width(100), width(1000));
    // ideal ratios are sqrt(10) ≈ 3.16 per decade; allow sampling noise in the std-dev estimate
    assert!(w10 > w100 && w100 > w1000);
    let decade = (w10 / w1000).sqrt();
    assert!((2.0..5.0).contains(&decade), "per-decade shrink {decade}");
}

#[test]
fn invalid_distributions_fail_before_running() {
    let mut v = serde_json::to_value(random_scenario(1, true)).unwrap();
    v["mobility"]["inter_contact"] = json!({"kind": "exponential", "mean": -1.0});
    let cfg: ScenarioConfig = serde_json::from_value(v).unwrap();
    let err = sim::run(&cfg).unwrap_err();
    assert!(err.to_string().contains("mobility.inter_contact"), "{err}");
}

#[test]
fn unknown_fields_are_rejected() {
    let mut v = serde_json::to_value(random_scenario(1, true)).unwrap();
    v["horizon_s"] = json!(5);
    assert!(serde_json::from_value::<ScenarioConfig>(v).is_err());
}
