use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DependencyPattern, ScenarioConfig, ScriptedKind, TerminalGroup};
use super::metrics::{Evaluation, ItemOutcome, MetricsReport, OccupancySample, Outcome};
use super::trace::{TraceKind, TraceRecord};
use super::SimError;
use crate::dispersal::{reconstruct, split_tagged, EncodedFragment, FragmentSet, FragmentTag};
use crate::model::{
    detect_conflict, ConflictReport, DataItem, Fragment, ItemId, Placement, RestoreSource, TerminalId, VersionKey,
    VersionRecord,
};
use crate::peer::{Notice, PeerStore, ReplicaContent, ReplicaId, ReplicaMeta, ReplicaState, StoreEvent};
use crate::reliability::ChannelEstimate;
use crate::scheduler::{BackupClient, LinkSession, TerminalHandle};

// One stream per random process; adding a process must not shift the others.
const MOBILITY: u64 = 1;
const INFRASTRUCTURE: u64 = 2;
const PRODUCTION_TIMES: u64 = 3;
const ITEMS: u64 = 4;
const FAILURES: u64 = 5;
const CHANNELS: u64 = 6;
const PAYLOAD: u64 = 7;

/// A notice for the peer, plus dependencies it should learn first.
type Relay = (Notice, ItemId, u64, Option<(VersionKey, Vec<VersionKey>)>);
/// Held fragments of one version: priority, then (index, bytes).
type FlushGroup = (f64, Vec<(u8, u64)>);

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic content for one version in payload mode.
pub(crate) fn payload_for(seed: u64, key: VersionKey, size: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.id.0.rotate_left(21) ^ key.version.rotate_left(43));
    rng.set_stream(PAYLOAD);
    let mut bytes = vec![0u8; size as usize];
    rng.fill_bytes(&mut bytes);
    bytes
}

#[derive(Debug, Clone)]
enum Action {
    Encounter { a: u32, b: u32, duration: f64, bandwidth: f64 },
    Window { terminal: u32, duration: f64, bandwidth: f64 },
    Produce { owner: u32, item: Option<Box<DataItem>> },
    Failure { terminal: u32 },
    Restore { terminal: u32 },
    Expire { key: VersionKey },
    Sample,
}

struct Scheduled {
    time: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest (time, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Open,
    /// Owner failed; awaiting its restore. Holds the estimate at failure.
    Pending { predicted: f64, fragments: u8 },
    Done,
}

struct Tracked {
    item: DataItem,
    status: Status,
}

#[derive(Debug, Default)]
struct ServerEntry {
    complete: bool,
    fragments: BTreeSet<u8>,
}

#[derive(Default)]
struct Totals {
    peer_bytes: u64,
    owner_upload_bytes: u64,
    peer_flush_bytes: u64,
    payload_checks: u64,
    payload_mismatches: u64,
}

/// The terminal side of a meeting, as seen by the owner's scheduler.
struct PeerHandle<'a> {
    id: TerminalId,
    store: &'a mut PeerStore,
    channel: ChannelEstimate,
    now: f64,
    evict: bool,
    payloads: Option<&'a BTreeMap<VersionKey, FragmentSet>>,
}

impl TerminalHandle for PeerHandle<'_> {
    fn id(&self) -> TerminalId {
        self.id
    }

    fn free_quota(&self, item: &DataItem) -> u64 {
        let quick = self
            .store
            .free_bytes()
            .min(self.store.owner_cap().saturating_sub(self.store.owner_used(item.owner)));
        if quick >= item.fragment_payload_bytes() {
            quick
        } else {
            self.store
                .advertised_free(item.owner, self.now, self.evict.then_some(item.priority))
        }
    }

    fn channel(&self) -> ChannelEstimate {
        self.channel
    }

    fn save(&mut self, item: &DataItem, fragment: Fragment, declared_success: f64) -> bool {
        let content = match self.payloads.and_then(|p| p.get(&item.key())) {
            Some(set) => ReplicaContent::Bytes(set.fragments[usize::from(fragment.index)].to_bytes()),
            None => ReplicaContent::Sized,
        };
        let meta = ReplicaMeta {
            owner: item.owner,
            priority: item.priority,
            lifetime: item.lifetime,
            declared_success,
            temporal_deps: item.temporal_deps.clone(),
            mergeable: false,
            content,
        };
        let stored = if self.evict {
            self.store
                .accept_with_eviction(self.now, fragment, meta, Some(item.priority))
        } else {
            self.store.accept(self.now, fragment, meta)
        };
        stored.unwrap_or(false)
    }
}

pub(crate) struct Simulation<'c> {
    cfg: &'c ScenarioConfig,
    groups: Vec<&'c TerminalGroup>,
    now: f64,
    seq: u64,
    agenda: BinaryHeap<Scheduled>,
    clients: Vec<BackupClient>,
    stores: Vec<PeerStore>,
    online: Vec<bool>,
    latest: Vec<Option<VersionKey>>,
    next_id: u64,
    items_rng: ChaCha8Rng,
    failures_rng: ChaCha8Rng,
    channels_rng: ChaCha8Rng,
    registry: BTreeMap<VersionKey, Tracked>,
    server: BTreeMap<VersionKey, ServerEntry>,
    /// Replicas that the truth draw condemned: held, but never retrievable.
    doomed: BTreeSet<(u32, ReplicaId)>,
    payloads: BTreeMap<VersionKey, FragmentSet>,
    outcomes: Vec<ItemOutcome>,
    counters: super::metrics::Counters,
    totals: Totals,
    conflicts: Vec<ConflictReport>,
    occupancy: Vec<OccupancySample>,
    trace: Option<Vec<TraceRecord>>,
}

impl<'c> Simulation<'c> {
    pub(crate) fn new(cfg: &'c ScenarioConfig, traced: bool) -> Result<Self, SimError> {
        cfg.validate()?;
        let groups = cfg.groups_by_terminal();
        let n = groups.len();
        let scripted_max = cfg
            .script
            .iter()
            .filter_map(|e| match &e.event {
                ScriptedKind::DataProduced { item } => Some(item.id.0),
                _ => None,
            })
            .max();
        let mut sim = Simulation {
            cfg,
            now: 0.0,
            seq: 0,
            agenda: BinaryHeap::new(),
            clients: (0..n as u32).map(|i| BackupClient::new(TerminalId(i))).collect(),
            stores: (0..n).map(|i| Self::fresh_store(cfg, groups[i], i as u32)).collect(),
            groups,
            online: vec![true; n],
            latest: vec![None; n],
            next_id: scripted_max.map_or(1, |m| m + 1),
            items_rng: stream(cfg.seed, ITEMS),
            failures_rng: stream(cfg.seed, FAILURES),
            channels_rng: stream(cfg.seed, CHANNELS),
            registry: BTreeMap::new(),
            server: BTreeMap::new(),
            doomed: BTreeSet::new(),
            payloads: BTreeMap::new(),
            outcomes: Vec::new(),
            counters: Default::default(),
            totals: Totals::default(),
            conflicts: Vec::new(),
            occupancy: Vec::new(),
            trace: traced.then(Vec::new),
        };
        sim.schedule_script();
        sim.schedule_processes();
        Ok(sim)
    }

    fn fresh_store(cfg: &ScenarioConfig, group: &TerminalGroup, id: u32) -> PeerStore {
        PeerStore::with_config(TerminalId(id), group.quota_bytes, cfg.eviction.clone()).record_events()
    }

    fn push(&mut self, time: f64, action: Action) {
        self.seq += 1;
        self.agenda.push(Scheduled {
            time,
            seq: self.seq,
            action,
        });
    }

    fn schedule_script(&mut self) {
        for ev in &self.cfg.script {
            let action = match &ev.event {
                ScriptedKind::Encounter { a, b, duration, bandwidth } => Action::Encounter {
                    a: *a,
                    b: *b,
                    duration: *duration,
                    bandwidth: *bandwidth,
                },
                ScriptedKind::InternetWindow { terminal, duration, bandwidth } => Action::Window {
                    terminal: *terminal,
                    duration: *duration,
                    bandwidth: *bandwidth,
                },
                ScriptedKind::DataProduced { item } => Action::Produce {
                    owner: item.owner.0,
                    item: Some(Box::new(item.clone())),
                },
                ScriptedKind::TerminalFailure { terminal } => Action::Failure { terminal: *terminal },
            };
            self.push(ev.time, action);
        }
    }

    fn schedule_processes(&mut self) {
        let cfg = self.cfg;
        let n = self.groups.len() as u32;
        let horizon = cfg.horizon;
        if let Some(m) = &cfg.mobility {
            let mut rng = stream(cfg.seed, MOBILITY);
            for a in 0..n {
                let mut t = 0.0;
                loop {
                    t += m.inter_contact.sample(&mut rng);
                    if t > horizon {
                        break;
                    }
                    let mut b = rng.random_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    let duration = m.contact_duration.sample(&mut rng);
                    let bandwidth = m.bandwidth_bytes_per_s;
                    self.push(t, Action::Encounter { a, b, duration, bandwidth });
                }
            }
        }
        if let Some(inf) = &cfg.infrastructure {
            let mut rng = stream(cfg.seed, INFRASTRUCTURE);
            for terminal in 0..n {
                let mut t = 0.0;
                loop {
                    t += inf.window_interval.sample(&mut rng);
                    if t > horizon {
                        break;
                    }
                    let duration = inf.window_duration.sample(&mut rng);
                    let bandwidth = inf.bandwidth_bytes_per_s;
                    self.push(t, Action::Window { terminal, duration, bandwidth });
                }
            }
        }
        if let Some(w) = &cfg.workload {
            let mut rng = stream(cfg.seed, PRODUCTION_TIMES);
            for owner in 0..n {
                if !self.groups[owner as usize].produces_data {
                    continue;
                }
                let mut t = 0.0;
                loop {
                    t += w.production_interval.sample(&mut rng);
                    if t > horizon {
                        break;
                    }
                    self.push(t, Action::Produce { owner, item: None });
                }
            }
        }
        for terminal in 0..n {
            self.schedule_failure(terminal);
        }
        if let Some(dt) = cfg.occupancy_sample_interval {
            let mut t = 0.0;
            while t <= horizon {
                self.push(t, Action::Sample);
                t += dt;
            }
        }
    }

    fn schedule_failure(&mut self, terminal: u32) {
        let Some(f) = &self.cfg.failures else { return };
        if !self.groups[terminal as usize].can_fail {
            return;
        }
        let t = self.now + f.time_to_failure.sample(&mut self.failures_rng);
        if t <= self.cfg.horizon {
            self.push(t, Action::Failure { terminal });
        }
    }

    fn log(&mut self, kind: TraceKind, from: Option<u32>, to: Option<u32>, owner: Option<u32>, bytes: u64, item: Option<VersionKey>) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: self.now,
                kind,
                from,
                to,
                owner,
                bytes,
                item,
            });
        }
    }

    pub(crate) fn run(mut self) -> Result<(MetricsReport, Vec<TraceRecord>), SimError> {
        while let Some(next) = self.agenda.pop() {
            if next.time > self.cfg.horizon {
                break;
            }
            self.now = next.time;
            match next.action {
                Action::Encounter { a, b, duration, bandwidth } => self.encounter(a, b, duration, bandwidth),
                Action::Window { terminal, duration, bandwidth } => self.window(terminal, duration, bandwidth)?,
                Action::Produce { owner, item } => self.produce(owner, item.map(|b| *b))?,
                Action::Failure { terminal } => self.failure(terminal)?,
                Action::Restore { terminal } => self.restore(terminal)?,
                Action::Expire { key } => self.expire(key)?,
                Action::Sample => self.sample(),
            }
        }
        self.now = self.cfg.horizon;
        self.finish()
    }

    fn channel_estimate(&self, peer: u32) -> ChannelEstimate {
        ChannelEstimate::new(self.groups[peer as usize].base_reliability * self.cfg.server_reach)
            .expect("validated to [0, 1]")
    }

    fn true_survival(&self, peer: u32) -> f64 {
        let g = self.groups[peer as usize];
        (g.true_reliability.unwrap_or(g.base_reliability) * self.cfg.server_reach).clamp(0.0, 1.0)
    }

    fn drain_store_events(&mut self, holder: u32) {
        for ev in self.stores[holder as usize].take_events() {
            if let StoreEvent::Purged(id) | StoreEvent::Evicted(id) = ev {
                self.doomed.remove(&(holder, id));
                self.counters.peer_deletions += 1;
                self.log(TraceKind::PeerDelete, Some(holder), None, Some(id.owner.0), 0, Some(id.key));
            }
        }
    }

    fn encounter(&mut self, a: u32, b: u32, duration: f64, bandwidth: f64) {
        if !(self.online[a as usize] && self.online[b as usize]) {
            return;
        }
        self.counters.encounters += 1;
        self.log(TraceKind::Encounter, Some(a), Some(b), None, 0, None);
        if !self.cfg.peer_backup {
            return;
        }
        let mut link = LinkSession::new((duration * bandwidth).floor() as u64);
        for (owner, peer) in [(a, b), (b, a)] {
            self.relay_notices(owner, peer);
            if link.reachable() {
                self.session(owner, peer, &mut link);
            }
            self.drain_store_events(peer);
        }
    }

    /// Owner tells the peer which of its versions are on the server or
    /// superseded. Control traffic: costs no link budget.
    fn relay_notices(&mut self, owner: u32, peer: u32) {
        let client = &self.clients[owner as usize];
        let graph = client.graph();
        let mut notices: Vec<Relay> = Vec::new();
        for item in graph.items() {
            let key = item.key();
            let held = graph
                .placement(&key)
                .is_some_and(|p| p.peers.contains_key(&TerminalId(peer)));
            if !held {
                continue;
            }
            if client.is_on_server(&key) {
                notices.push((Notice::ServerNotice, key.id, key.version, None));
            }
            if let Some(latest) = graph.latest_version(key.id).filter(|v| *v > key.version) {
                let lk = VersionKey { id: key.id, version: latest };
                let deps = graph.get(&lk).map(|i| i.temporal_deps.clone()).unwrap_or_default();
                notices.push((Notice::OwnerNotice, key.id, latest, Some((lk, deps))));
            }
        }
        for (notice, id, version, deps) in notices {
            let store = &mut self.stores[peer as usize];
            if let Some((lk, deps)) = deps {
                store.learn_dependencies(lk, &deps);
            }
            if !store.notify(notice, id, version).is_empty() {
                self.log(
                    TraceKind::OwnerNotice,
                    Some(owner),
                    Some(peer),
                    Some(owner),
                    0,
                    Some(VersionKey { id, version }),
                );
            }
        }
    }

    fn session(&mut self, owner: u32, peer: u32, link: &mut LinkSession) {
        let channel = self.channel_estimate(peer);
        let outcomes = {
            let mut handle = PeerHandle {
                id: TerminalId(peer),
                store: &mut self.stores[peer as usize],
                channel,
                now: self.now,
                evict: self.cfg.evict_on_pressure,
                payloads: self.cfg.payload_mode.then_some(&self.payloads),
            };
            self.clients[owner as usize].on_meeting(&mut handle, link)
        };
        let mut batches: BTreeMap<VersionKey, Vec<u8>> = BTreeMap::new();
        for o in &outcomes {
            if o.saved {
                self.counters.peer_saves += 1;
                self.totals.peer_bytes += o.bytes;
                batches.entry(o.item).or_default().push(o.fragment_index);
                self.log(TraceKind::PeerSave, Some(owner), Some(peer), Some(owner), o.bytes, Some(o.item));
            } else {
                self.counters.peer_refusals += 1;
                self.log(TraceKind::PeerRefuse, Some(owner), Some(peer), Some(owner), 0, Some(o.item));
            }
        }
        // One survival draw per item and session: the batch lives or dies together.
        let survive = self.true_survival(peer);
        for (key, indices) in batches {
            if !self.channels_rng.random_bool(survive) {
                for index in indices {
                    self.doomed.insert((
                        peer,
                        ReplicaId {
                            owner: TerminalId(owner),
                            key,
                            index,
                        },
                    ));
                }
            }
        }
    }

    fn server_has(&self, key: &VersionKey) -> bool {
        let Some(entry) = self.server.get(key) else { return false };
        entry.complete
            || self
                .registry
                .get(key)
                .is_some_and(|t| entry.fragments.len() >= usize::from(t.item.k))
    }

    fn window(&mut self, terminal: u32, duration: f64, bandwidth: f64) -> Result<(), SimError> {
        if !self.online[terminal as usize] {
            return Ok(());
        }
        self.counters.internet_windows += 1;
        self.log(TraceKind::InternetWindow, Some(terminal), None, None, 0, None);
        let mut budget = (duration * bandwidth).floor() as u64;
        let t = terminal as usize;

        let learned: Vec<VersionKey> = self.clients[t]
            .items()
            .map(DataItem::key)
            .filter(|k| !self.clients[t].is_on_server(k) && self.server_has(k))
            .collect();
        for k in &learned {
            self.clients[t].mark_on_server(k);
        }

        // Owner uploads whole items, dependencies first, all-or-nothing.
        let mut pending: Vec<(f64, VersionKey)> = self.clients[t]
            .items()
            .filter(|i| !self.clients[t].is_on_server(&i.key()) && !i.is_expired(self.now))
            .map(|i| (i.priority, i.key()))
            .collect();
        pending.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, key) in pending {
            if self.clients[t].is_on_server(&key) {
                continue;
            }
            let client = &self.clients[t];
            let mut closure: Vec<VersionKey> = client
                .graph()
                .transitive_deps(&key)?
                .into_iter()
                .filter(|d| !client.is_on_server(d))
                .collect();
            closure.push(key);
            let bytes: u64 = closure.iter().map(|k| client.item(k).map_or(0, |i| i.size_bytes)).sum();
            if bytes > budget {
                continue;
            }
            budget -= bytes;
            for k in closure {
                let size = self.clients[t].item(&k).map_or(0, |i| i.size_bytes);
                self.server.entry(k).or_default().complete = true;
                self.clients[t].mark_on_server(&k);
                self.totals.owner_upload_bytes += size;
                self.log(TraceKind::ServerUpload, Some(terminal), None, Some(terminal), size, Some(k));
            }
        }

        // Then the replicas this terminal holds for others.
        let mut groups: BTreeMap<(TerminalId, VersionKey), FlushGroup> = BTreeMap::new();
        for r in self.stores[t].replicas() {
            let id = r.id();
            if r.state != ReplicaState::Live || r.is_expired(self.now) || self.doomed.contains(&(terminal, id)) {
                continue;
            }
            let g = groups.entry((id.owner, id.key)).or_insert((r.priority, Vec::new()));
            g.1.push((id.index, r.size()));
        }
        let mut groups: Vec<_> = groups
            .into_iter()
            .filter(|((_, key), _)| !self.server_has(key))
            .collect();
        groups.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(a.0.cmp(&b.0)));
        for ((owner, key), (_, frags)) in groups {
            let bytes: u64 = frags.iter().map(|f| f.1).sum();
            if bytes > budget {
                continue;
            }
            budget -= bytes;
            let entry = self.server.entry(key).or_default();
            entry.fragments.extend(frags.iter().map(|f| f.0));
            self.totals.peer_flush_bytes += bytes;
            self.stores[t].notify(Notice::SaveByMe, key.id, key.version);
            self.log(TraceKind::PeerFlush, Some(terminal), None, Some(owner.0), bytes, Some(key));
        }

        let held: BTreeSet<VersionKey> = self.stores[t].replicas().map(|r| r.fragment.key()).collect();
        for key in held {
            if self.server_has(&key) {
                self.stores[t].notify(Notice::ServerNotice, key.id, key.version);
            }
        }
        self.drain_store_events(terminal);
        Ok(())
    }

    fn generate_item(&mut self, owner: u32) -> Option<DataItem> {
        let w = self.cfg.workload.as_ref()?;
        let rng = &mut self.items_rng;
        let size = w.size_bytes.sample(rng).round().max(1.0) as u64;
        let priority = w.priority.sample(rng).clamp(0.0, 1.0);
        let update = match w.dependencies {
            DependencyPattern::None => false,
            DependencyPattern::Chain { update_probability } => rng.random_bool(update_probability),
        };
        let lifetime = w.lifetime.as_ref().map(|l| self.now + l.sample(rng));
        let previous = self.latest[owner as usize].filter(|k| {
            self.registry
                .get(k)
                .is_some_and(|t| !t.item.is_expired(self.now))
        });
        let mut item = match previous {
            Some(prev) if update => DataItem::new(prev.id.0, TerminalId(owner), size, priority, w.n, w.k)
                .with_version(prev.version + 1)
                .with_deps([prev]),
            _ => {
                let id = self.next_id;
                self.next_id += 1;
                DataItem::new(id, TerminalId(owner), size, priority, w.n, w.k)
            }
        };
        item.lifetime = lifetime;
        Some(item.created(self.now))
    }

    fn produce(&mut self, owner: u32, scripted: Option<DataItem>) -> Result<(), SimError> {
        if !self.online[owner as usize] {
            return Ok(());
        }
        let Some(item) = scripted.or_else(|| self.generate_item(owner)) else {
            return Ok(());
        };
        let key = item.key();
        if self.registry.contains_key(&key) {
            return Err(SimError::Config(format!("item {key} is produced twice")));
        }
        self.clients[owner as usize].add_item(item.clone())?;
        if self.cfg.payload_mode {
            let bytes = payload_for(self.cfg.seed, key, item.size_bytes);
            let tag = FragmentTag {
                item_id: key.id.0,
                version: key.version,
            };
            let set = split_tagged(&bytes, item.n, item.k, tag)
                .map_err(|e| SimError::Config(format!("item {key}: {e}")))?;
            self.payloads.insert(key, set);
        }
        let superseded: Vec<VersionKey> = self
            .registry
            .range(VersionKey { id: key.id, version: 0 }..key)
            .filter(|(_, t)| t.status == Status::Open)
            .map(|(k, _)| *k)
            .collect();
        if let Some(expiry) = item.lifetime.filter(|l| *l <= self.cfg.horizon) {
            self.push(expiry.max(self.now), Action::Expire { key });
        }
        self.log(TraceKind::Produce, Some(owner), None, Some(owner), item.size_bytes, Some(key));
        self.registry.insert(
            key,
            Tracked {
                item,
                status: Status::Open,
            },
        );
        self.latest[owner as usize] = Some(key);
        for old in superseded {
            self.evaluate_open(old, Evaluation::Superseded)?;
        }
        Ok(())
    }

    fn expire(&mut self, key: VersionKey) -> Result<(), SimError> {
        let Some(t) = self.registry.get(&key) else { return Ok(()) };
        if t.status == Status::Open {
            let owner = t.item.owner.0 as usize;
            self.evaluate_open(key, Evaluation::Expired)?;
            self.clients[owner].retire(&key);
        }
        Ok(())
    }

    fn evaluate_open(&mut self, key: VersionKey, why: Evaluation) -> Result<(), SimError> {
        let owner = self.registry[&key].item.owner.0 as usize;
        let predicted = self.clients[owner].composite(&key)?;
        let fragments = self.clients[owner].fragments_saved(&key).unwrap_or(0);
        self.settle(key, why, predicted, fragments);
        Ok(())
    }

    fn failure(&mut self, terminal: u32) -> Result<(), SimError> {
        let t = terminal as usize;
        if !self.online[t] {
            return Ok(());
        }
        self.online[t] = false;
        self.counters.failures += 1;
        self.log(TraceKind::Failure, Some(terminal), None, None, 0, None);
        let owned: Vec<VersionKey> = self
            .registry
            .iter()
            .filter(|(_, tr)| tr.item.owner.0 == terminal && tr.status == Status::Open)
            .map(|(k, _)| *k)
            .collect();
        for key in owned {
            let predicted = self.clients[t].composite(&key)?;
            let fragments = self.clients[t].fragments_saved(&key).unwrap_or(0);
            self.registry.get_mut(&key).expect("listed").status = Status::Pending { predicted, fragments };
        }
        self.doomed.retain(|(holder, _)| *holder != terminal);
        self.stores[t].clear();
        self.stores[t].take_events();
        self.push(self.now + self.cfg.restore_delay(), Action::Restore { terminal });
        Ok(())
    }

    fn restore(&mut self, terminal: u32) -> Result<(), SimError> {
        let t = terminal as usize;
        self.counters.restores += 1;
        self.log(TraceKind::Restore, Some(terminal), None, None, 0, None);
        self.settle_pending(terminal);
        self.clients[t] = BackupClient::new(TerminalId(terminal));
        self.stores[t] = Self::fresh_store(self.cfg, self.groups[t], terminal);
        self.online[t] = true;
        self.latest[t] = None;
        self.schedule_failure(terminal);
        Ok(())
    }

    /// Settles everything the failed `terminal` lost and looks for conflicts.
    fn settle_pending(&mut self, terminal: u32) {
        let pending: Vec<(VersionKey, f64, u8)> = self
            .registry
            .iter()
            .filter_map(|(k, tr)| match tr.status {
                Status::Pending { predicted, fragments } if tr.item.owner.0 == terminal => {
                    Some((*k, predicted, fragments))
                }
                _ => None,
            })
            .collect();
        let ids: BTreeSet<ItemId> = pending.iter().map(|p| p.0.id).collect();
        for (key, predicted, fragments) in pending {
            self.settle(key, Evaluation::Restore, predicted, fragments);
        }
        for id in ids {
            if let Some(report) = self.conflict_for(id) {
                self.log(
                    TraceKind::Conflict,
                    Some(terminal),
                    None,
                    Some(terminal),
                    0,
                    Some(VersionKey {
                        id,
                        version: report.newer.version,
                    }),
                );
                self.conflicts.push(report);
            }
        }
    }

    /// Surviving, retrievable fragment indices of `key`, per holder.
    fn surviving(&self, key: &VersionKey) -> BTreeMap<TerminalId, BTreeSet<u8>> {
        let Some(tracked) = self.registry.get(key) else {
            return BTreeMap::new();
        };
        let owner = tracked.item.owner;
        let mut out: BTreeMap<TerminalId, BTreeSet<u8>> = BTreeMap::new();
        for (h, store) in self.stores.iter().enumerate() {
            if !self.online[h] {
                continue;
            }
            for r in store.holdings(owner, *key) {
                if !self.doomed.contains(&(h as u32, r.id())) {
                    out.entry(TerminalId(h as u32)).or_default().insert(r.fragment.index);
                }
            }
        }
        out
    }

    fn peers_suffice(&self, key: &VersionKey) -> bool {
        let k = self.registry.get(key).map_or(usize::MAX, |t| usize::from(t.item.k));
        let distinct: BTreeSet<u8> = self.surviving(key).into_values().flatten().collect();
        distinct.len() >= k
    }

    fn closure(&self, key: &VersionKey) -> Vec<VersionKey> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![*key];
        while let Some(k) = stack.pop() {
            if seen.insert(k) {
                if let Some(t) = self.registry.get(&k) {
                    stack.extend(t.item.temporal_deps.iter().copied());
                }
            }
        }
        seen.into_iter().collect()
    }

    fn classify(&self, key: &VersionKey) -> Outcome {
        let closure = self.closure(key);
        if closure.iter().all(|k| self.server_has(k)) {
            Outcome::SafeOnServer
        } else if closure.iter().all(|k| self.server_has(k) || self.peers_suffice(k)) {
            Outcome::RecoverableFromPeers
        } else {
            Outcome::Lost
        }
    }

    /// Rebuilds every peer-only version of the closure from held bytes.
    fn check_payloads(&mut self, key: &VersionKey) {
        for k in self.closure(key) {
            if self.server_has(&k) {
                continue;
            }
            let owner = self.registry[&k].item.owner;
            let mut by_index: BTreeMap<u8, EncodedFragment> = BTreeMap::new();
            for (h, store) in self.stores.iter().enumerate() {
                if !self.online[h] {
                    continue;
                }
                for r in store.holdings(owner, k) {
                    if self.doomed.contains(&(h as u32, r.id())) {
                        continue;
                    }
                    if let ReplicaContent::Bytes(b) = &r.content {
                        if let Ok(f) = EncodedFragment::from_bytes(b) {
                            by_index.entry(f.header.index).or_insert(f);
                        }
                    }
                }
            }
            let fragments: Vec<EncodedFragment> = by_index.into_values().collect();
            let item = &self.registry[&k].item;
            let expected = payload_for(self.cfg.seed, k, item.size_bytes);
            self.totals.payload_checks += 1;
            if reconstruct(&fragments).ok().as_deref() != Some(expected.as_slice()) {
                self.totals.payload_mismatches += 1;
            }
        }
    }

    fn settle(&mut self, key: VersionKey, evaluation: Evaluation, predicted: f64, fragments_saved: u8) {
        let outcome = self.classify(&key);
        if self.cfg.payload_mode && outcome == Outcome::RecoverableFromPeers {
            self.check_payloads(&key);
        }
        let tracked = self.registry.get_mut(&key).expect("settled items are tracked");
        tracked.status = Status::Done;
        self.outcomes.push(ItemOutcome {
            item: key,
            owner: tracked.item.owner,
            priority: tracked.item.priority,
            outcome,
            evaluation,
            predicted,
            fragments_saved,
            evaluated_at: self.now,
        });
    }

    /// The server is always reachable, so a restore takes the newest version
    /// it can rebuild from the server alone, falling back to peers.
    fn conflict_for(&self, id: ItemId) -> Option<ConflictReport> {
        let versions: Vec<VersionKey> = self
            .registry
            .range(VersionKey { id, version: 0 }..=VersionKey { id, version: u64::MAX })
            .map(|(k, _)| *k)
            .collect();
        let records: Vec<VersionRecord> = versions
            .iter()
            .map(|k| {
                let peers = if self.peers_suffice(k) {
                    self.surviving(k)
                } else {
                    BTreeMap::new()
                };
                VersionRecord {
                    key: *k,
                    placement: Placement {
                        peers,
                        on_server: self.server_has(k),
                    },
                    pinned: false,
                }
            })
            .collect();
        let from_server = versions
            .iter()
            .rev()
            .find(|k| self.closure(k).iter().all(|d| self.server_has(d)));
        let (restored, source) = match from_server {
            Some(k) => (*k, RestoreSource::Server),
            None => (
                *versions
                    .iter()
                    .rev()
                    .find(|k| self.classify(k) != Outcome::Lost)?,
                RestoreSource::Peers,
            ),
        };
        detect_conflict(&records, source, restored.version).ok().flatten()
    }

    fn sample(&mut self) {
        let (used, quota) = self
            .stores
            .iter()
            .zip(&self.online)
            .filter(|(_, on)| **on)
            .fold((0, 0), |(u, q), (s, _)| (u + s.used_bytes(), q + s.quota_bytes()));
        self.occupancy.push(OccupancySample {
            time: self.now,
            used_bytes: used,
            quota_bytes: quota,
        });
    }

    fn finish(mut self) -> Result<(MetricsReport, Vec<TraceRecord>), SimError> {
        for terminal in 0..self.groups.len() as u32 {
            if !self.online[terminal as usize] {
                self.settle_pending(terminal);
            }
        }
        let open: Vec<VersionKey> = self
            .registry
            .iter()
            .filter(|(_, t)| t.status == Status::Open)
            .map(|(k, _)| *k)
            .collect();
        for key in open {
            self.evaluate_open(key, Evaluation::Horizon)?;
        }
        let mut report = MetricsReport::from_items(self.cfg.seed, self.cfg.horizon, self.cfg.peer_backup, self.outcomes);
        report.peer_bytes = self.totals.peer_bytes;
        report.owner_upload_bytes = self.totals.owner_upload_bytes;
        report.peer_flush_bytes = self.totals.peer_flush_bytes;
        report.server_bytes = self.totals.owner_upload_bytes + self.totals.peer_flush_bytes;
        report.counters = self.counters;
        report.conflict_count = self.conflicts.len() as u64;
        report.conflicts = self.conflicts;
        report.payload_checks = self.totals.payload_checks;
        report.payload_mismatches = self.totals.payload_mismatches;
        report.occupancy = self.occupancy;
        Ok((report, self.trace.unwrap_or_default()))
    }
}
