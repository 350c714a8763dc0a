//! Replica store kept by a backup peer.
//!
//! Fragments arrive from owners during encounters and are held within a fixed
//! memory quota. Each replica becomes useless once it is known to be on the
//! server ([`Notice::SaveByMe`], [`Notice::ServerNotice`]) or superseded
//! ([`Notice::OwnerNotice`]), or when its lifetime runs out; useless replicas
//! are purged before anything else is touched. Versions that a newer,
//! not-yet-served version depends on are *pinned* and are never deleted.
//!
//! When memory is still short, live replicas are scored
//!
//! ```text
//! score = w_age * age_norm + w_res * max(0, declared_success - priority) + w_size * bulk_norm
//! ```
//!
//! where `age_norm` and `bulk_norm` (own size plus co-held dependents) are
//! min-max normalized over the candidates of one sweep. Higher scores go
//! first; with owner grouping on, an owner's replicas are deleted together.

use std::collections::{BTreeMap, BTreeSet};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispersal::HEADER_LEN;
use crate::model::{Fragment, ItemId, PinIndex, TerminalId, VersionKey};

#[derive(Debug, Error, PartialEq)]
pub enum PeerError {
    #[error("replica {0:?} is already held")]
    Duplicate(ReplicaId),
    #[error("cannot free {needed} bytes: at most {available} are releasable")]
    EvictionShortfall { needed: u64, available: u64 },
    #[error("cannot merge: {0}")]
    Merge(String),
    #[error("log replica declares {declared} bytes but carries {actual}")]
    SizeMismatch { declared: u64, actual: u64 },
}

/// Identifies one held fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId {
    pub owner: TerminalId,
    pub key: VersionKey,
    pub index: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicaState {
    Live,
    ConfirmedSaved,
    Outdated,
}

/// Who told the store that something changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Notice {
    /// This peer uploaded the replicas itself.
    SaveByMe,
    /// The owner reports that the named version supersedes older ones.
    OwnerNotice,
    /// The server reports that the named version is safe.
    ServerNotice,
}

/// Payload carried by a replica.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReplicaContent {
    /// Size accounting only.
    #[default]
    Sized,
    /// Serialized encoded fragment.
    Bytes(Vec<u8>),
    /// Union-mergeable log of entries (encounter tracks, readings).
    Log(BTreeSet<Vec<u8>>),
}

impl ReplicaContent {
    pub fn log_bytes(entries: &BTreeSet<Vec<u8>>) -> u64 {
        entries.iter().map(|e| e.len() as u64).sum()
    }
}

/// What the owner sends along with a fragment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaMeta {
    pub owner: TerminalId,
    pub priority: f64,
    pub lifetime: Option<f64>,
    pub declared_success: f64,
    pub temporal_deps: Vec<VersionKey>,
    pub mergeable: bool,
    pub content: ReplicaContent,
}

impl ReplicaMeta {
    pub fn new(owner: TerminalId, priority: f64, declared_success: f64) -> Self {
        ReplicaMeta {
            owner,
            priority,
            lifetime: None,
            declared_success,
            temporal_deps: Vec::new(),
            mergeable: false,
            content: ReplicaContent::Sized,
        }
    }

    pub fn with_deps(mut self, deps: impl IntoIterator<Item = VersionKey>) -> Self {
        self.temporal_deps = deps.into_iter().collect();
        self
    }

    pub fn with_lifetime(mut self, expires_at: f64) -> Self {
        self.lifetime = Some(expires_at);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replica {
    pub fragment: Fragment,
    pub owner: TerminalId,
    pub priority: f64,
    pub received_at: f64,
    pub lifetime: Option<f64>,
    pub declared_success: f64,
    pub state: ReplicaState,
    pub temporal_deps: Vec<VersionKey>,
    pub mergeable: bool,
    pub content: ReplicaContent,
}

impl Replica {
    pub fn id(&self) -> ReplicaId {
        ReplicaId {
            owner: self.owner,
            key: self.fragment.key(),
            index: self.fragment.index,
        }
    }

    pub fn size(&self) -> u64 {
        self.fragment.payload_bytes
    }

    pub fn is_expired(&self, now: f64) -> bool {
        self.lifetime.is_some_and(|t| t <= now)
    }
}

/// Eviction weights and fairness cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvictionConfig {
    pub w_age: f64,
    pub w_res: f64,
    pub w_size: f64,
    /// Largest share of the quota one owner may occupy.
    pub owner_cap_fraction: f64,
    /// Delete an owner's replicas together before moving to the next owner.
    pub group_by_owner: bool,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        EvictionConfig {
            w_age: 1.0,
            w_res: 1.0,
            w_size: 1.0,
            owner_cap_fraction: 1.0,
            group_by_owner: true,
        }
    }
}

/// Store mutations, recorded when logging is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StoreEvent {
    Accepted(ReplicaId),
    Rejected(ReplicaId),
    Marked(ReplicaId, ReplicaState),
    Purged(ReplicaId),
    Evicted(ReplicaId),
    Merged { from: Vec<ReplicaId>, into: ReplicaId },
    Cleared,
}

#[derive(Debug, Clone)]
pub struct PeerStore {
    id: TerminalId,
    quota_bytes: u64,
    used_bytes: u64,
    per_owner: BTreeMap<TerminalId, u64>,
    replicas: BTreeMap<ReplicaId, Replica>,
    by_item: BTreeMap<ItemId, BTreeSet<ReplicaId>>,
    pins: PinIndex,
    config: EvictionConfig,
    log: Option<Vec<StoreEvent>>,
}

impl PeerStore {
    pub fn new(id: TerminalId, quota_bytes: u64) -> Self {
        Self::with_config(id, quota_bytes, EvictionConfig::default())
    }

    pub fn with_config(id: TerminalId, quota_bytes: u64, config: EvictionConfig) -> Self {
        PeerStore {
            id,
            quota_bytes,
            used_bytes: 0,
            per_owner: BTreeMap::new(),
            replicas: BTreeMap::new(),
            by_item: BTreeMap::new(),
            pins: PinIndex::new(),
            config,
            log: None,
        }
    }

    /// Starts recording [`StoreEvent`]s.
    pub fn record_events(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn events(&self) -> &[StoreEvent] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_events(&mut self) -> Vec<StoreEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn emit(&mut self, event: StoreEvent) {
        if let Some(log) = self.log.as_mut() {
            log.push(event);
        }
    }

    pub fn id(&self) -> TerminalId {
        self.id
    }

    pub fn quota_bytes(&self) -> u64 {
        self.quota_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn owner_used(&self, owner: TerminalId) -> u64 {
        self.per_owner.get(&owner).copied().unwrap_or(0)
    }

    pub fn free_bytes(&self) -> u64 {
        self.quota_bytes - self.used_bytes
    }

    pub fn owner_cap(&self) -> u64 {
        (self.quota_bytes as f64 * self.config.owner_cap_fraction.clamp(0.0, 1.0)).floor() as u64
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    pub fn replica(&self, id: &ReplicaId) -> Option<&Replica> {
        self.replicas.get(id)
    }

    pub fn replicas(&self) -> impl Iterator<Item = &Replica> {
        self.replicas.values()
    }

    pub fn pins(&self) -> &PinIndex {
        &self.pins
    }

    pub fn is_pinned(&self, key: &VersionKey) -> bool {
        self.pins.is_pinned(key)
    }

    /// Records dependency edges learned outside a fragment transfer.
    pub fn learn_dependencies(&mut self, key: VersionKey, deps: &[VersionKey]) {
        self.pins.register(key, deps);
    }

    /// Sum of held replica sizes, recomputed from scratch.
    pub fn recomputed_used(&self) -> u64 {
        self.replicas.values().map(Replica::size).sum()
    }

    fn deletable(&self, r: &Replica, now: f64) -> bool {
        (r.state != ReplicaState::Live || r.is_expired(now)) && !self.pins.is_pinned(&r.fragment.key())
    }

    /// Bytes a purge would release right now, in total and for `owner`.
    fn reclaimable(&self, owner: TerminalId, now: f64) -> (u64, u64) {
        self.replicas.values().filter(|r| self.deletable(r, now)).fold((0, 0), |(all, own), r| {
            (all + r.size(), own + if r.owner == owner { r.size() } else { 0 })
        })
    }

    /// Space this store offers to `owner`: free bytes plus what a purge would
    /// release, bounded by the owner's cap. With `evict_below`, unpinned live
    /// replicas of lower priority count as releasable too.
    pub fn advertised_free(&self, owner: TerminalId, now: f64, evict_below: Option<f64>) -> u64 {
        let (mut all, mut own) = self.reclaimable(owner, now);
        if let Some(p) = evict_below {
            for r in self.replicas.values() {
                if r.state == ReplicaState::Live && !r.is_expired(now) && r.priority < p && !self.is_pinned(&r.fragment.key()) {
                    all += r.size();
                    if r.owner == owner {
                        own += r.size();
                    }
                }
            }
        }
        let global = self.free_bytes() + all;
        let cap_room = self.owner_cap().saturating_sub(self.owner_used(owner)) + own;
        global.min(cap_room)
    }

    fn fits(&self, owner: TerminalId, size: u64) -> bool {
        self.used_bytes + size <= self.quota_bytes && self.owner_used(owner) + size <= self.owner_cap()
    }

    /// Stores a fragment if it fits after purging useless replicas.
    pub fn accept(&mut self, now: f64, fragment: Fragment, meta: ReplicaMeta) -> Result<bool, PeerError> {
        let replica = self.build(now, fragment, meta)?;
        let id = replica.id();
        self.pins.register(id.key, &replica.temporal_deps);
        if !self.fits(replica.owner, replica.size()) {
            self.purge(now);
        }
        if !self.fits(replica.owner, replica.size()) {
            self.emit(StoreEvent::Rejected(id));
            return Ok(false);
        }
        self.insert(replica);
        self.emit(StoreEvent::Accepted(id));
        Ok(true)
    }

    /// Like [`accept`](Self::accept), but evicts live replicas when purging is
    /// not enough. With `evict_below`, only replicas of strictly lower
    /// priority are candidates.
    pub fn accept_with_eviction(
        &mut self,
        now: f64,
        fragment: Fragment,
        meta: ReplicaMeta,
        evict_below: Option<f64>,
    ) -> Result<bool, PeerError> {
        let replica = self.build(now, fragment, meta.clone())?;
        let size = replica.size();
        let owner = replica.owner;
        self.pins.register(replica.id().key, &replica.temporal_deps);
        if !self.fits(owner, size) {
            self.purge(now);
        }
        if size <= self.quota_bytes && self.used_bytes + size > self.quota_bytes {
            let filter = |r: &Replica| evict_below.is_none_or(|p| r.priority < p);
            // a shortfall leaves the store untouched; the fragment is refused below
            let _ = self.evict_where(now, size, filter);
        }
        self.accept(now, fragment, meta)
    }

    fn build(&self, now: f64, fragment: Fragment, meta: ReplicaMeta) -> Result<Replica, PeerError> {
        let id = ReplicaId {
            owner: meta.owner,
            key: fragment.key(),
            index: fragment.index,
        };
        if self.replicas.contains_key(&id) {
            return Err(PeerError::Duplicate(id));
        }
        if let ReplicaContent::Log(entries) = &meta.content {
            let actual = ReplicaContent::log_bytes(entries) + HEADER_LEN as u64;
            if actual != fragment.payload_bytes {
                return Err(PeerError::SizeMismatch {
                    declared: fragment.payload_bytes,
                    actual,
                });
            }
        }
        Ok(Replica {
            fragment,
            owner: meta.owner,
            priority: meta.priority,
            received_at: now,
            lifetime: meta.lifetime,
            declared_success: meta.declared_success,
            state: ReplicaState::Live,
            temporal_deps: meta.temporal_deps,
            mergeable: meta.mergeable,
            content: meta.content,
        })
    }

    fn insert(&mut self, replica: Replica) {
        self.used_bytes += replica.size();
        *self.per_owner.entry(replica.owner).or_default() += replica.size();
        self.by_item.entry(replica.fragment.item_id).or_default().insert(replica.id());
        self.replicas.insert(replica.id(), replica);
    }

    fn remove(&mut self, id: &ReplicaId) -> Option<Replica> {
        let r = self.replicas.remove(id)?;
        self.used_bytes -= r.size();
        let owner_bytes = self.per_owner.get_mut(&r.owner).expect("owner accounted");
        *owner_bytes -= r.size();
        if *owner_bytes == 0 {
            self.per_owner.remove(&r.owner);
        }
        let same_item = self.by_item.get_mut(&r.fragment.item_id).expect("item indexed");
        same_item.remove(id);
        if same_item.is_empty() {
            self.by_item.remove(&r.fragment.item_id);
        }
        Some(r)
    }

    /// Applies a usefulness notification for item `id` at `version`.
    /// Unknown items are ignored. Returns the replicas whose state changed.
    pub fn notify(&mut self, source: Notice, id: ItemId, version: u64) -> Vec<ReplicaId> {
        let target = match source {
            Notice::SaveByMe | Notice::ServerNotice => ReplicaState::ConfirmedSaved,
            Notice::OwnerNotice => ReplicaState::Outdated,
        };
        let matches = |r: &Replica| {
            let v = r.fragment.version;
            r.fragment.item_id == id
                && match source {
                    Notice::SaveByMe => v == version,
                    Notice::ServerNotice => v <= version,
                    Notice::OwnerNotice => v < version,
                }
        };
        let changed: Vec<ReplicaId> = self
            .of_item(id)
            .filter(|r| r.state == ReplicaState::Live && matches(r))
            .map(Replica::id)
            .collect();
        for rid in &changed {
            self.replicas.get_mut(rid).expect("just found").state = target;
            self.emit(StoreEvent::Marked(*rid, target));
        }
        match source {
            Notice::ServerNotice => self.pins.mark_served(VersionKey { id, version }),
            Notice::OwnerNotice => {
                for rid in &changed {
                    self.pins.retire(rid.key);
                }
            }
            Notice::SaveByMe => {}
        }
        changed
    }

    /// Deletes expired and useless replicas that are not pinned.
    pub fn purge(&mut self, now: f64) -> Vec<ReplicaId> {
        let expired: BTreeSet<VersionKey> = self
            .replicas
            .values()
            .filter(|r| r.is_expired(now))
            .map(|r| r.fragment.key())
            .collect();
        for key in &expired {
            self.pins.retire(*key);
        }
        let doomed: Vec<ReplicaId> = self
            .replicas
            .values()
            .filter(|r| self.deletable(r, now))
            .map(Replica::id)
            .collect();
        for id in &doomed {
            self.remove(id);
            self.emit(StoreEvent::Purged(*id));
        }
        doomed
    }

    /// Held replicas of the same owner that transitively depend on `id`.
    pub fn dependency_bulk(&self, id: &ReplicaId) -> Vec<ReplicaId> {
        let mut dependents: BTreeSet<VersionKey> = BTreeSet::new();
        let mut frontier = vec![id.key];
        while let Some(key) = frontier.pop() {
            for r in self.replicas.values() {
                if r.owner == id.owner && r.temporal_deps.contains(&key) && dependents.insert(r.fragment.key()) {
                    frontier.push(r.fragment.key());
                }
            }
        }
        self.replicas
            .values()
            .filter(|r| r.owner == id.owner && dependents.contains(&r.fragment.key()))
            .map(Replica::id)
            .collect()
    }

    /// Eviction score of every unpinned live candidate, with its bulk.
    pub fn eviction_scores(&self, now: f64) -> Vec<(ReplicaId, f64, Vec<ReplicaId>)> {
        self.scores_where(now, |_| true)
    }

    fn scores_where(&self, now: f64, filter: impl Fn(&Replica) -> bool) -> Vec<(ReplicaId, f64, Vec<ReplicaId>)> {
        let candidates: Vec<&Replica> = self
            .replicas
            .values()
            .filter(|r| !self.is_pinned(&r.fragment.key()) && filter(r))
            .collect();
        if candidates.is_empty() {
            return Vec::new();
        }
        let bulks: Vec<(Vec<ReplicaId>, f64)> = candidates
            .iter()
            .map(|r| {
                let bulk: Vec<ReplicaId> = self
                    .dependency_bulk(&r.id())
                    .into_iter()
                    .filter(|b| !self.is_pinned(&b.key))
                    .collect();
                let bytes = r.size() + bulk.iter().map(|b| self.replicas[b].size()).sum::<u64>();
                (bulk, bytes as f64)
            })
            .collect();
        let ages: Vec<f64> = candidates.iter().map(|r| (now - r.received_at).max(0.0)).collect();
        let norm = |xs: &[f64]| -> Vec<f64> {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            xs.iter()
                .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
                .collect()
        };
        let age_n = norm(&ages);
        let size_n = norm(&bulks.iter().map(|b| b.1).collect::<Vec<_>>());
        let c = &self.config;
        candidates
            .iter()
            .zip(bulks)
            .enumerate()
            .map(|(i, (r, (bulk, _)))| {
                let res = (r.declared_success - r.priority).max(0.0);
                (r.id(), c.w_age * age_n[i] + c.w_res * res + c.w_size * size_n[i], bulk)
            })
            .collect()
    }

    /// Deletes replicas until at least `needed_bytes` are free. Useless ones go
    /// first; then live ones in score order. Pinned replicas are never
    /// touched. When even a full sweep cannot free enough, nothing beyond the
    /// purge is deleted and [`PeerError::EvictionShortfall`] is returned.
    pub fn evict(&mut self, now: f64, needed_bytes: u64) -> Result<Vec<ReplicaId>, PeerError> {
        self.evict_where(now, needed_bytes, |_| true)
            .map(|(purged, evicted)| purged.into_iter().chain(evicted).collect())
    }

    fn evict_where(
        &mut self,
        now: f64,
        needed_bytes: u64,
        filter: impl Fn(&Replica) -> bool,
    ) -> Result<(Vec<ReplicaId>, Vec<ReplicaId>), PeerError> {
        let purged = self.purge(now);
        if self.free_bytes() >= needed_bytes {
            return Ok((purged, Vec::new()));
        }
        let mut scored = self.scores_where(now, filter);
        scored.sort_by(|a, b| OrderedFloat(b.1).cmp(&OrderedFloat(a.1)).then(a.0.cmp(&b.0)));
        if self.config.group_by_owner {
            let mut best: BTreeMap<TerminalId, usize> = BTreeMap::new();
            for (rank, (id, _, _)) in scored.iter().enumerate() {
                best.entry(id.owner).or_insert(rank);
            }
            scored.sort_by_key(|(id, _, _)| best[&id.owner]);
        }
        let mut plan: Vec<ReplicaId> = Vec::new();
        let mut planned: BTreeSet<ReplicaId> = BTreeSet::new();
        let mut freed = self.free_bytes();
        for (id, _, bulk) in &scored {
            if freed >= needed_bytes {
                break;
            }
            for victim in std::iter::once(id).chain(bulk.iter()) {
                if planned.insert(*victim) {
                    freed += self.replicas[victim].size();
                    plan.push(*victim);
                }
            }
        }
        if freed < needed_bytes {
            return Err(PeerError::EvictionShortfall {
                needed: needed_bytes,
                available: freed,
            });
        }
        for id in &plan {
            self.remove(id);
            self.emit(StoreEvent::Evicted(*id));
        }
        Ok((purged, plan))
    }

    /// Replaces whole-copy log replicas of one item by their union.
    pub fn merge(&mut self, ids: &[ReplicaId]) -> Result<Replica, PeerError> {
        let inputs: Vec<&Replica> = ids
            .iter()
            .map(|id| self.replicas.get(id).ok_or_else(|| PeerError::Merge(format!("{id:?} is not held"))))
            .collect::<Result<_, _>>()?;
        let Some(first) = inputs.first() else {
            return Err(PeerError::Merge("nothing to merge".into()));
        };
        let stream = first.fragment.item_id;
        let mut entries: BTreeSet<Vec<u8>> = BTreeSet::new();
        for r in &inputs {
            if !r.mergeable || r.fragment.n != 1 || r.fragment.k != 1 {
                return Err(PeerError::Merge(format!("{:?} is not a mergeable whole copy", r.id())));
            }
            if r.fragment.item_id != stream {
                return Err(PeerError::Merge(format!("{:?} belongs to another stream", r.id())));
            }
            match &r.content {
                ReplicaContent::Log(e) => entries.extend(e.iter().cloned()),
                _ => return Err(PeerError::Merge(format!("{:?} carries no log", r.id()))),
            }
        }
        let distinct: BTreeSet<ReplicaId> = ids.iter().copied().collect();
        if distinct.len() == 1 {
            return Ok((*first).clone());
        }
        let newest = inputs.iter().max_by_key(|r| (r.fragment.version, r.id())).expect("non-empty");
        let mut merged = (*newest).clone();
        merged.priority = inputs.iter().map(|r| r.priority).fold(0.0, f64::max);
        merged.declared_success = inputs.iter().map(|r| r.declared_success).fold(0.0, f64::max);
        merged.lifetime = inputs
            .iter()
            .map(|r| r.lifetime)
            .try_fold(f64::NEG_INFINITY, |acc, l| l.map(|l| acc.max(l)));
        merged.received_at = inputs.iter().map(|r| r.received_at).fold(f64::INFINITY, f64::min);
        let mut deps: BTreeSet<VersionKey> = inputs.iter().flat_map(|r| r.temporal_deps.iter().copied()).collect();
        for r in &inputs {
            deps.remove(&r.fragment.key());
        }
        merged.temporal_deps = deps.into_iter().collect();
        merged.fragment.payload_bytes = ReplicaContent::log_bytes(&entries) + HEADER_LEN as u64;
        merged.content = ReplicaContent::Log(entries);
        for id in &distinct {
            self.remove(id);
        }
        self.insert(merged.clone());
        self.emit(StoreEvent::Merged {
            from: distinct.into_iter().collect(),
            into: merged.id(),
        });
        Ok(merged)
    }

    /// Versions and fragment indices held for `id`.
    pub fn restore_query(&self, id: ItemId) -> Vec<(u64, BTreeSet<u8>)> {
        let mut out: BTreeMap<u64, BTreeSet<u8>> = BTreeMap::new();
        for r in self.of_item(id) {
            out.entry(r.fragment.version).or_default().insert(r.fragment.index);
        }
        out.into_iter().collect()
    }

    /// Held replicas of item `id`, any owner or version.
    pub fn of_item(&self, id: ItemId) -> impl Iterator<Item = &Replica> {
        self.by_item.get(&id).into_iter().flatten().map(|rid| &self.replicas[rid])
    }

    /// Held replicas of one owner's version.
    pub fn holdings(&self, owner: TerminalId, key: VersionKey) -> impl Iterator<Item = &Replica> {
        let lo = ReplicaId { owner, key, index: 0 };
        let hi = ReplicaId { owner, key, index: u8::MAX };
        self.replicas.range(lo..=hi).map(|(_, r)| r)
    }

    /// Drops everything (device loss).
    pub fn clear(&mut self) {
        self.replicas.clear();
        self.by_item.clear();
        self.per_owner.clear();
        self.used_bytes = 0;
        self.pins = PinIndex::new();
        self.emit(StoreEvent::Cleared);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TerminalId = TerminalId(1);
    const B: TerminalId = TerminalId(2);

    fn frag(id: u64, version: u64, index: u8, size: u64) -> Fragment {
        Fragment {
            item_id: ItemId(id),
            version,
            index,
            n: 4,
            k: 2,
            payload_bytes: size,
        }
    }

    fn meta(owner: TerminalId) -> ReplicaMeta {
        ReplicaMeta::new(owner, 0.5, 0.5)
    }

    fn check(store: &PeerStore) {
        assert_eq!(store.used_bytes(), store.recomputed_used());
        assert!(store.used_bytes() <= store.quota_bytes());
    }

    #[test]
    fn accept_within_quota() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        assert!(s.accept(0.0, frag(1, 1, 0, 300), meta(A)).unwrap());
        assert_eq!(s.used_bytes(), 300);
        check(&s);
    }

    #[test]
    fn reject_when_nothing_purgeable() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        s.accept(0.0, frag(1, 1, 0, 900), meta(A)).unwrap();
        assert!(!s.accept(0.0, frag(2, 1, 0, 300), meta(A)).unwrap());
        assert_eq!(s.used_bytes(), 900);
    }

    #[test]
    fn purge_expired_then_accept() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        s.accept(0.0, frag(1, 1, 0, 650), meta(A)).unwrap();
        s.accept(0.0, frag(2, 1, 0, 250), meta(B).with_lifetime(5.0)).unwrap();
        assert_eq!(s.free_bytes(), 100);
        assert!(s.accept(10.0, frag(3, 1, 0, 300), meta(A)).unwrap());
        // 650 + 250 - 250 + 300
        assert_eq!(s.used_bytes(), 950);
        check(&s);
    }

    #[test]
    fn duplicates_are_rejected() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        let err = s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap_err();
        assert!(matches!(err, PeerError::Duplicate(_)));
        // another owner's fragment with the same coordinates is distinct
        assert!(s.accept(0.0, frag(1, 1, 0, 10), meta(B)).unwrap());
    }

    #[test]
    fn server_notice_confirms() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        let changed = s.notify(Notice::ServerNotice, ItemId(1), 1);
        assert_eq!(changed.len(), 1);
        assert_eq!(s.replica(&changed[0]).unwrap().state, ReplicaState::ConfirmedSaved);
        // idempotent
        assert!(s.notify(Notice::ServerNotice, ItemId(1), 1).is_empty());
        assert!(s.notify(Notice::ServerNotice, ItemId(77), 1).is_empty());
        assert_eq!(s.purge(0.0), changed);
    }

    #[test]
    fn owner_notice_on_pinned_version_retains_it() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        let v1 = VersionKey::new(1, 1);
        s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        s.accept(1.0, frag(1, 2, 0, 10), meta(A).with_deps([v1])).unwrap();
        let changed = s.notify(Notice::OwnerNotice, ItemId(1), 2);
        assert_eq!(changed.len(), 1);
        assert_eq!(s.replica(&changed[0]).unwrap().state, ReplicaState::Outdated);
        assert!(s.is_pinned(&v1));
        assert!(s.purge(2.0).is_empty());
        s.notify(Notice::ServerNotice, ItemId(1), 2);
        assert!(!s.is_pinned(&v1));
        assert_eq!(s.purge(3.0).len(), 2);
        check(&s);
    }

    #[test]
    fn older_replica_is_evicted_first() {
        let mut s = PeerStore::new(TerminalId(9), 100);
        s.accept(0.0, frag(1, 1, 0, 40), meta(A)).unwrap();
        s.accept(990.0, frag(2, 1, 0, 40), meta(B)).unwrap();
        let deleted = s.evict(1000.0, 50).unwrap();
        assert_eq!(deleted, vec![ReplicaId { owner: A, key: VersionKey::new(1, 1), index: 0 }]);
        check(&s);
    }

    #[test]
    fn over_provisioned_replica_goes_first() {
        let mut s = PeerStore::new(TerminalId(9), 100);
        s.accept(0.0, frag(1, 1, 0, 40), ReplicaMeta::new(A, 0.9, 0.4)).unwrap();
        s.accept(0.0, frag(2, 1, 0, 40), ReplicaMeta::new(B, 0.5, 0.99)).unwrap();
        let deleted = s.evict(0.0, 30).unwrap();
        assert_eq!(deleted.len(), 1);
        assert_eq!(deleted[0].key.id, ItemId(2));
    }

    #[test]
    fn all_pinned_is_a_shortfall() {
        let mut s = PeerStore::new(TerminalId(9), 100);
        s.accept(0.0, frag(1, 1, 0, 40), meta(A)).unwrap();
        s.learn_dependencies(VersionKey::new(1, 2), &[VersionKey::new(1, 1)]);
        let err = s.evict(0.0, 80).unwrap_err();
        assert!(matches!(err, PeerError::EvictionShortfall { .. }));
        assert_eq!(s.used_bytes(), 40);
    }

    #[test]
    fn owner_grouping_takes_one_owner_first() {
        let config = EvictionConfig {
            w_age: 1.0,
            w_res: 0.0,
            w_size: 0.0,
            ..EvictionConfig::default()
        };
        let mut s = PeerStore::with_config(TerminalId(9), 100, config);
        s.accept(0.0, frag(1, 1, 0, 20), meta(A)).unwrap();
        s.accept(1.0, frag(2, 1, 0, 20), meta(B)).unwrap();
        s.accept(5.0, frag(3, 1, 0, 20), meta(A)).unwrap();
        let deleted = s.evict(10.0, 80).unwrap();
        // A holds the oldest replica, so both of A's go before B's
        assert_eq!(deleted.iter().map(|d| d.owner).collect::<Vec<_>>(), vec![A, A]);
    }

    #[test]
    fn served_versions_are_purged_before_eviction() {
        let mut s = PeerStore::new(TerminalId(9), 100);
        let v1 = VersionKey::new(1, 1);
        s.accept(0.0, frag(1, 1, 0, 30), meta(A)).unwrap();
        s.accept(0.0, frag(1, 2, 0, 30), meta(A).with_deps([v1])).unwrap();
        s.accept(0.0, frag(5, 1, 0, 30), meta(B)).unwrap();
        s.notify(Notice::ServerNotice, ItemId(1), 2);
        let deleted = s.evict(0.0, 50).unwrap();
        assert_eq!(deleted.len(), 2);
        assert!(deleted.iter().all(|d| d.key.id == ItemId(1)));
        check(&s);
    }

    #[test]
    fn bulk_follows_dependency_chain() {
        let mut s = PeerStore::new(TerminalId(9), 1000);
        let v1 = VersionKey::new(1, 1);
        let v2 = VersionKey::new(1, 2);
        s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        s.accept(0.0, frag(1, 2, 0, 10), meta(A).with_deps([v1])).unwrap();
        s.accept(0.0, frag(1, 3, 0, 10), meta(A).with_deps([v2])).unwrap();
        s.accept(0.0, frag(1, 3, 0, 10), meta(B).with_deps([v2])).unwrap();
        let bulk = s.dependency_bulk(&ReplicaId { owner: A, key: v1, index: 0 });
        let versions: Vec<u64> = bulk.iter().map(|b| b.key.version).collect();
        assert_eq!(versions, vec![2, 3]);
        assert!(bulk.iter().all(|b| b.owner == A));
    }

    #[test]
    fn owner_cap_limits_one_owner() {
        let config = EvictionConfig {
            owner_cap_fraction: 0.5,
            ..EvictionConfig::default()
        };
        let mut s = PeerStore::with_config(TerminalId(9), 100, config);
        assert!(s.accept(0.0, frag(1, 1, 0, 40), meta(A)).unwrap());
        assert!(!s.accept(0.0, frag(2, 1, 0, 20), meta(A)).unwrap());
        assert!(s.accept(0.0, frag(3, 1, 0, 20), meta(B)).unwrap());
        assert_eq!(s.advertised_free(A, 0.0, None), 10);
        assert_eq!(s.advertised_free(B, 0.0, None), 30);
    }

    fn log_replica(id: u64, version: u64, entries: &[&str]) -> (Fragment, ReplicaMeta) {
        let set: BTreeSet<Vec<u8>> = entries.iter().map(|e| e.as_bytes().to_vec()).collect();
        let size = ReplicaContent::log_bytes(&set) + HEADER_LEN as u64;
        let f = Fragment {
            item_id: ItemId(id),
            version,
            index: 0,
            n: 1,
            k: 1,
            payload_bytes: size,
        };
        let mut m = meta(A);
        m.mergeable = true;
        m.content = ReplicaContent::Log(set);
        (f, m)
    }

    #[test]
    fn merge_unions_logs() {
        let mut s = PeerStore::new(TerminalId(9), 10_000);
        let (f1, m1) = log_replica(1, 1, &["a", "b"]);
        let (f2, m2) = log_replica(1, 2, &["b", "c"]);
        s.accept(0.0, f1, m1).unwrap();
        s.accept(0.0, f2, m2).unwrap();
        let ids: Vec<ReplicaId> = s.replicas().map(Replica::id).collect();
        let merged = s.merge(&ids).unwrap();
        let ReplicaContent::Log(entries) = &merged.content else { panic!() };
        let got: Vec<&[u8]> = entries.iter().map(Vec::as_slice).collect();
        assert_eq!(got, vec![b"a".as_slice(), b"b", b"c"]);
        assert_eq!(s.len(), 1);
        assert_eq!(merged.fragment.version, 2);
        check(&s);
    }

    #[test]
    fn merge_single_is_noop() {
        let mut s = PeerStore::new(TerminalId(9), 10_000);
        let (f, m) = log_replica(1, 1, &["a"]);
        s.accept(0.0, f, m).unwrap();
        let id = s.replicas().next().unwrap().id();
        let before = s.replica(&id).unwrap().clone();
        assert_eq!(s.merge(&[id]).unwrap(), before);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn merge_rejects_fragmented_items() {
        let mut s = PeerStore::new(TerminalId(9), 10_000);
        s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        let (f, m) = log_replica(1, 2, &["a"]);
        s.accept(0.0, f, m).unwrap();
        let ids: Vec<ReplicaId> = s.replicas().map(Replica::id).collect();
        assert!(matches!(s.merge(&ids), Err(PeerError::Merge(_))));
    }

    #[test]
    fn log_size_must_match() {
        let mut s = PeerStore::new(TerminalId(9), 10_000);
        let (mut f, m) = log_replica(1, 1, &["abc"]);
        f.payload_bytes += 1;
        assert!(matches!(s.accept(0.0, f, m), Err(PeerError::SizeMismatch { .. })));
    }

    #[test]
    fn restore_inventory() {
        let mut s = PeerStore::new(TerminalId(9), 10_000);
        s.accept(0.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        s.accept(0.0, frag(1, 1, 2, 10), meta(A)).unwrap();
        assert_eq!(s.restore_query(ItemId(1)), vec![(1, BTreeSet::from([0, 2]))]);
        assert!(s.restore_query(ItemId(2)).is_empty());
        s.notify(Notice::SaveByMe, ItemId(1), 1);
        s.purge(0.0);
        assert!(s.restore_query(ItemId(1)).is_empty());
    }

    #[test]
    fn restore_inventory_after_targeted_eviction() {
        let config = EvictionConfig {
            w_age: 1.0,
            w_res: 0.0,
            w_size: 0.0,
            ..EvictionConfig::default()
        };
        let mut s = PeerStore::with_config(TerminalId(9), 20, config);
        s.accept(1.0, frag(1, 1, 0, 10), meta(A)).unwrap();
        s.accept(0.0, frag(1, 1, 2, 10), meta(A)).unwrap();
        s.evict(2.0, 10).unwrap();
        assert_eq!(s.restore_query(ItemId(1)), vec![(1, BTreeSet::from([0]))]);
    }
}
