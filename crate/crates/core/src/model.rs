//! Data items, fragments, versions and the temporal dependency graph.
//!
//! Every other module speaks in these types. A [`DataItem`] is one version of
//! one logical piece of user data; it is dispersed into `n` fragments of which
//! any `k` reconstruct it, and it may depend on older versions (delta chains,
//! mail threads). Spatial dependencies never reach this layer: mutually
//! dependent items are folded into one with [`agglomerate`] at ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispersal::HEADER_LEN;

/// Simulated terminal (mobile device) identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TerminalId(pub u32);

impl fmt::Display for TerminalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Logical item identifier, stable across versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One concrete version of an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VersionKey {
    pub id: ItemId,
    pub version: u64,
}

impl VersionKey {
    pub fn new(id: u64, version: u64) -> Self {
        VersionKey {
            id: ItemId(id),
            version,
        }
    }
}

impl fmt::Display for VersionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}v{}", self.id, self.version)
    }
}

/// How the owner produces the item. Stored for reporting; no algorithm
/// branches on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Production {
    #[default]
    CreateOnly,
    ReadWrite,
    AppendOnly,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid data item {key}: {reason}")]
    InvalidItem { key: VersionKey, reason: String },
    #[error("agglomerate needs at least one item")]
    EmptyAgglomeration,
    #[error("agglomerated items have different owners ({0} and {1})")]
    MixedOwners(TerminalId, TerminalId),
    #[error("{from} depends on unknown version {missing}")]
    DanglingDependency { from: VersionKey, missing: VersionKey },
    #[error("{from} depends on {dep}, which is not strictly older")]
    NotOlder { from: VersionKey, dep: VersionKey },
    #[error("version {0} is already registered")]
    DuplicateVersion(VersionKey),
    #[error("{key} does not increase on the latest version {latest}")]
    NonMonotoneVersion { key: VersionKey, latest: u64 },
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
}

/// One version of a unit of user data, with its dispersal plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataItem {
    pub id: ItemId,
    pub version: u64,
    pub owner: TerminalId,
    pub size_bytes: u64,
    /// Desired backup resilience: the restore probability the owner wants.
    pub priority: f64,
    #[serde(default)]
    pub production: Production,
    /// Absolute expiry time in simulation seconds.
    #[serde(default)]
    pub lifetime: Option<f64>,
    pub n: u8,
    pub k: u8,
    #[serde(default)]
    pub temporal_deps: Vec<VersionKey>,
    #[serde(default)]
    pub mergeable: bool,
    /// Creation timestamp; dependencies must be strictly older.
    #[serde(default)]
    pub created_at: f64,
}

impl DataItem {
    /// A fresh, dependency-free item with `(n, k)` dispersal.
    pub fn new(id: u64, owner: TerminalId, size_bytes: u64, priority: f64, n: u8, k: u8) -> Self {
        DataItem {
            id: ItemId(id),
            version: 1,
            owner,
            size_bytes,
            priority,
            production: Production::CreateOnly,
            lifetime: None,
            n,
            k,
            temporal_deps: Vec::new(),
            mergeable: false,
            created_at: 0.0,
        }
    }

    pub fn key(&self) -> VersionKey {
        VersionKey {
            id: self.id,
            version: self.version,
        }
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn with_deps(mut self, deps: impl IntoIterator<Item = VersionKey>) -> Self {
        self.temporal_deps = deps.into_iter().collect();
        self
    }

    pub fn created(mut self, at: f64) -> Self {
        self.created_at = at;
        self
    }

    /// Checks the per-item invariants (`1 <= k <= n`, priority in `[0, 1]`).
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| {
            Err(ModelError::InvalidItem {
                key: self.key(),
                reason,
            })
        };
        if self.k == 0 || self.k > self.n {
            return fail(format!("need 1 <= k <= n, got n={} k={}", self.n, self.k));
        }
        if !(0.0..=1.0).contains(&self.priority) {
            return fail(format!("priority {} outside [0, 1]", self.priority));
        }
        if !self.created_at.is_finite() || self.created_at < 0.0 {
            return fail(format!("bad creation time {}", self.created_at));
        }
        if self.temporal_deps.iter().any(|d| *d == self.key()) {
            return fail("depends on itself".into());
        }
        Ok(())
    }

    /// Size of each of the `n` fragments on the wire, header included.
    pub fn fragment_payload_bytes(&self) -> u64 {
        self.size_bytes.div_ceil(u64::from(self.k)) + HEADER_LEN as u64
    }

    /// Fragment descriptor for `index`.
    pub fn fragment(&self, index: u8) -> Fragment {
        Fragment {
            item_id: self.id,
            version: self.version,
            index,
            n: self.n,
            k: self.k,
            payload_bytes: self.fragment_payload_bytes(),
        }
    }

    pub fn is_expired(&self, now: f64) -> bool {
        self.lifetime.is_some_and(|t| t <= now)
    }
}

/// Size-only description of one fragment of an item version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fragment {
    pub item_id: ItemId,
    pub version: u64,
    pub index: u8,
    pub n: u8,
    pub k: u8,
    pub payload_bytes: u64,
}

impl Fragment {
    pub fn key(&self) -> VersionKey {
        VersionKey {
            id: self.item_id,
            version: self.version,
        }
    }
}

/// Where fragments of a version currently live.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Fragment indices held by each backup peer.
    pub peers: BTreeMap<TerminalId, BTreeSet<u8>>,
    pub on_server: bool,
}

impl Placement {
    pub fn on_server() -> Self {
        Placement {
            peers: BTreeMap::new(),
            on_server: true,
        }
    }

    pub fn on_peer(peer: TerminalId, indices: impl IntoIterator<Item = u8>) -> Self {
        let mut p = Placement::default();
        p.peers.insert(peer, indices.into_iter().collect());
        p
    }

    pub fn is_on_peer(&self) -> bool {
        self.peers.values().any(|s| !s.is_empty())
    }

    pub fn is_nowhere(&self) -> bool {
        !self.on_server && !self.is_on_peer()
    }

    /// Distinct fragment indices held across all peers.
    pub fn peer_indices(&self) -> BTreeSet<u8> {
        self.peers.values().flatten().copied().collect()
    }
}

/// Placement and pin state of one version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub key: VersionKey,
    pub placement: Placement,
    pub pinned: bool,
}

/// Tracks which versions must be retained because a newer version that
/// (transitively) depends on them has not reached the server yet.
///
/// A version is pinned iff it is not itself on the server and some registered
/// version depending on it transitively is not on the server either.
#[derive(Debug, Clone, Default)]
pub struct PinIndex {
    deps: BTreeMap<VersionKey, Vec<VersionKey>>,
    dependents: BTreeMap<VersionKey, BTreeSet<VersionKey>>,
    served: BTreeSet<VersionKey>,
    retired: BTreeSet<VersionKey>,
}

impl PinIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the direct dependencies of `key`. Re-registering is a no-op.
    pub fn register(&mut self, key: VersionKey, deps: &[VersionKey]) {
        if self.deps.contains_key(&key) {
            return;
        }
        self.deps.insert(key, deps.to_vec());
        for d in deps {
            self.dependents.entry(*d).or_default().insert(key);
        }
    }

    pub fn mark_served(&mut self, key: VersionKey) {
        self.served.insert(key);
    }

    pub fn is_served(&self, key: &VersionKey) -> bool {
        self.served.contains(key)
    }

    /// Stops `key` from pinning its dependencies (it expired or was
    /// superseded) without claiming it is on the server.
    pub fn retire(&mut self, key: VersionKey) {
        self.retired.insert(key);
    }

    pub fn deps_of(&self, key: &VersionKey) -> Option<&[VersionKey]> {
        self.deps.get(key).map(Vec::as_slice)
    }

    pub fn is_pinned(&self, key: &VersionKey) -> bool {
        if self.served.contains(key) {
            return false;
        }
        let mut stack: Vec<VersionKey> = self
            .dependents
            .get(key)
            .into_iter()
            .flatten()
            .copied()
            .collect();
        let mut seen = BTreeSet::new();
        while let Some(d) = stack.pop() {
            if !seen.insert(d) {
                continue;
            }
            if !self.served.contains(&d) && !self.retired.contains(&d) {
                return true;
            }
            stack.extend(self.dependents.get(&d).into_iter().flatten().copied());
        }
        false
    }
}

/// Folds mutually (spatially) dependent items into one item.
///
/// Size is summed, priority and lifetime take the maximum, dependencies are
/// united. The identity, version, owner and dispersal plan come from the first
/// item.
pub fn agglomerate(items: &[DataItem]) -> Result<DataItem, ModelError> {
    let (first, rest) = items.split_first().ok_or(ModelError::EmptyAgglomeration)?;
    let mut out = first.clone();
    let mut deps: BTreeSet<VersionKey> = first.temporal_deps.iter().copied().collect();
    for item in rest {
        if item.owner != out.owner {
            return Err(ModelError::MixedOwners(out.owner, item.owner));
        }
        out.size_bytes += item.size_bytes;
        out.priority = out.priority.max(item.priority);
        out.lifetime = match (out.lifetime, item.lifetime) {
            (Some(a), Some(b)) => Some(a.max(b)),
            // a member without expiry keeps the whole bundle alive
            _ => None,
        };
        out.created_at = out.created_at.max(item.created_at);
        out.mergeable &= item.mergeable;
        deps.extend(item.temporal_deps.iter().copied());
    }
    if rest.is_empty() {
        return Ok(out);
    }
    let members: BTreeSet<VersionKey> = items.iter().map(DataItem::key).collect();
    out.temporal_deps = deps.into_iter().filter(|d| !members.contains(d)).collect();
    Ok(out)
}

#[derive(Debug, Clone)]
struct Node {
    item: DataItem,
    placement: Placement,
}

/// Owner-side store of item versions, their dependency edges and placement.
///
/// Insertion rejects dangling or non-older dependencies, which keeps the graph
/// acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct DependencyGraph {
    nodes: BTreeMap<VersionKey, Node>,
    pins: PinIndex,
}

impl DependencyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn insert(&mut self, item: DataItem) -> Result<(), ModelError> {
        item.validate()?;
        let key = item.key();
        if self.nodes.contains_key(&key) {
            return Err(ModelError::DuplicateVersion(key));
        }
        if let Some(latest) = self.latest_version(item.id) {
            if key.version <= latest {
                return Err(ModelError::NonMonotoneVersion { key, latest });
            }
        }
        for dep in &item.temporal_deps {
            let node = self.nodes.get(dep).ok_or(ModelError::DanglingDependency {
                from: key,
                missing: *dep,
            })?;
            // equal timestamps are allowed: the dependency was inserted first
            if node.item.created_at > item.created_at {
                return Err(ModelError::NotOlder { from: key, dep: *dep });
            }
        }
        self.pins.register(key, &item.temporal_deps);
        self.nodes.insert(
            key,
            Node {
                item,
                placement: Placement::default(),
            },
        );
        Ok(())
    }

    pub fn get(&self, key: &VersionKey) -> Option<&DataItem> {
        self.nodes.get(key).map(|n| &n.item)
    }

    pub fn contains(&self, key: &VersionKey) -> bool {
        self.nodes.contains_key(key)
    }

    pub fn items(&self) -> impl Iterator<Item = &DataItem> {
        self.nodes.values().map(|n| &n.item)
    }

    pub fn latest_version(&self, id: ItemId) -> Option<u64> {
        self.nodes
            .range(VersionKey { id, version: 0 }..=VersionKey { id, version: u64::MAX })
            .next_back()
            .map(|(k, _)| k.version)
    }

    /// Removes a version and every record of it. Dependents keep their edges.
    pub fn remove(&mut self, key: &VersionKey) -> Option<DataItem> {
        self.nodes.remove(key).map(|n| n.item)
    }

    pub fn placement(&self, key: &VersionKey) -> Option<&Placement> {
        self.nodes.get(key).map(|n| &n.placement)
    }

    pub fn record_peer_fragment(&mut self, key: &VersionKey, peer: TerminalId, index: u8) {
        if let Some(n) = self.nodes.get_mut(key) {
            n.placement.peers.entry(peer).or_default().insert(index);
        }
    }

    pub fn mark_on_server(&mut self, key: &VersionKey) {
        if let Some(n) = self.nodes.get_mut(key) {
            n.placement.on_server = true;
            self.pins.mark_served(*key);
        }
    }

    pub fn is_on_server(&self, key: &VersionKey) -> bool {
        self.nodes.get(key).is_some_and(|n| n.placement.on_server)
    }

    pub fn is_pinned(&self, key: &VersionKey) -> bool {
        self.pins.is_pinned(key)
    }

    pub fn record(&self, key: &VersionKey) -> Option<VersionRecord> {
        self.nodes.get(key).map(|n| VersionRecord {
            key: *key,
            placement: n.placement.clone(),
            pinned: self.pins.is_pinned(key),
        })
    }

    /// All version records of one item, oldest first.
    pub fn records_for(&self, id: ItemId) -> Vec<VersionRecord> {
        self.nodes
            .range(VersionKey { id, version: 0 }..=VersionKey { id, version: u64::MAX })
            .filter_map(|(k, _)| self.record(k))
            .collect()
    }

    /// Transitive dependencies of `key`, excluding `key` itself.
    pub fn transitive_deps(&self, key: &VersionKey) -> Result<BTreeSet<VersionKey>, ModelError> {
        let root = self.nodes.get(key).ok_or(ModelError::UnknownItem(key.id))?;
        let mut out = BTreeSet::new();
        let mut stack: Vec<(VersionKey, VersionKey)> =
            root.item.temporal_deps.iter().map(|d| (*key, *d)).collect();
        while let Some((from, d)) = stack.pop() {
            let node = self
                .nodes
                .get(&d)
                .ok_or(ModelError::DanglingDependency { from, missing: d })?;
            if out.insert(d) {
                stack.extend(node.item.temporal_deps.iter().map(|x| (d, *x)));
            }
        }
        Ok(out)
    }

    /// Raises every transitive dependency of `new_item` to at least its
    /// priority. Returns the versions actually raised with their new priority.
    pub fn propagate_priority(&mut self, new_item: &DataItem) -> Result<Vec<(VersionKey, f64)>, ModelError> {
        let mut closure = BTreeSet::new();
        let mut stack: Vec<(VersionKey, VersionKey)> =
            new_item.temporal_deps.iter().map(|d| (new_item.key(), *d)).collect();
        while let Some((from, d)) = stack.pop() {
            let node = self
                .nodes
                .get(&d)
                .ok_or(ModelError::DanglingDependency { from, missing: d })?;
            if closure.insert(d) {
                stack.extend(node.item.temporal_deps.iter().map(|x| (d, *x)));
            }
        }
        let mut raised = Vec::new();
        for key in closure {
            let node = self.nodes.get_mut(&key).expect("closure keys exist");
            if node.item.priority < new_item.priority {
                node.item.priority = new_item.priority;
                raised.push((key, new_item.priority));
            }
        }
        Ok(raised)
    }

    /// Kahn's algorithm over the dependency edges.
    pub fn is_acyclic(&self) -> bool {
        let mut indegree: BTreeMap<VersionKey, usize> = self.nodes.keys().map(|k| (*k, 0)).collect();
        for node in self.nodes.values() {
            for d in &node.item.temporal_deps {
                if self.nodes.contains_key(d) {
                    *indegree.get_mut(d).expect("present") += 1;
                }
            }
        }
        let mut ready: Vec<VersionKey> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut visited = 0;
        while let Some(k) = ready.pop() {
            visited += 1;
            for d in &self.nodes[&k].item.temporal_deps {
                if let Some(deg) = indegree.get_mut(d) {
                    *deg -= 1;
                    if *deg == 0 {
                        ready.push(*d);
                    }
                }
            }
        }
        visited == self.nodes.len()
    }
}

/// Where a restore fetched a version from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestoreSource {
    Server,
    Peers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionAt {
    pub version: u64,
    pub location: RestoreSource,
}

/// Two divergent versions that a restore has put side by side. Resolution is
/// left to the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub item: ItemId,
    pub restored: VersionAt,
    pub newer: VersionAt,
}

/// Reports a conflict iff a version strictly newer than the restored one
/// lives at the *other* kind of location (peer vs server). When several
/// qualify, the newest is named.
pub fn detect_conflict(
    records: &[VersionRecord],
    restored_from: RestoreSource,
    current_version: u64,
) -> Result<Option<ConflictReport>, ModelError> {
    let item = match records.first() {
        Some(r) => r.key.id,
        None => return Err(ModelError::UnknownItem(ItemId(u64::MAX))),
    };
    let newer = records
        .iter()
        .filter(|r| r.key.id == item && r.key.version > current_version)
        .filter(|r| match restored_from {
            RestoreSource::Server => r.placement.is_on_peer(),
            RestoreSource::Peers => r.placement.on_server,
        })
        .max_by_key(|r| r.key.version);
    Ok(newer.map(|r| ConflictReport {
        item,
        restored: VersionAt {
            version: current_version,
            location: restored_from,
        },
        newer: VersionAt {
            version: r.key.version,
            location: match restored_from {
                RestoreSource::Server => RestoreSource::Peers,
                RestoreSource::Peers => RestoreSource::Server,
            },
        },
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const OWNER: TerminalId = TerminalId(1);

    fn item(id: u64, priority: f64) -> DataItem {
        DataItem::new(id, OWNER, 100, priority, 3, 2)
    }

    #[test]
    fn agglomerate_single_is_identity() {
        let a = item(1, 0.4).with_deps([VersionKey::new(9, 1)]);
        assert_eq!(agglomerate(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn agglomerate_takes_highest_priority_and_sums_size() {
        let mut a = item(1, 0.3);
        a.size_bytes = 100;
        let mut b = item(2, 0.8);
        b.size_bytes = 50;
        let out = agglomerate(&[a, b]).unwrap();
        assert_eq!(out.priority, 0.8);
        assert_eq!(out.size_bytes, 150);
    }

    #[test]
    fn agglomerate_unites_deps() {
        let a = VersionKey::new(10, 1);
        let b = VersionKey::new(11, 1);
        let items = [item(1, 0.1).with_deps([a]), item(2, 0.1).with_deps([b]), item(3, 0.1).with_deps([a])];
        let out = agglomerate(&items).unwrap();
        assert_eq!(out.temporal_deps, vec![a, b]);
    }

    #[test]
    fn agglomerate_lifetime_is_max() {
        let mut a = item(1, 0.1);
        a.lifetime = Some(10.0);
        let mut b = item(2, 0.1);
        b.lifetime = Some(30.0);
        assert_eq!(agglomerate(&[a, b]).unwrap().lifetime, Some(30.0));
    }

    #[test]
    fn agglomerate_errors() {
        assert_eq!(agglomerate(&[]), Err(ModelError::EmptyAgglomeration));
        let mut other = item(2, 0.5);
        other.owner = TerminalId(7);
        assert!(matches!(agglomerate(&[item(1, 0.5), other]), Err(ModelError::MixedOwners(..))));
    }

    proptest! {
        #[test]
        fn agglomerate_order_does_not_change_priority_or_deps(
            prios in proptest::collection::vec(0.0f64..=1.0, 1..6),
            deps in proptest::collection::vec(proptest::collection::btree_set(100u64..110, 0..4), 1..6),
        ) {
            let len = prios.len().min(deps.len());
            let items: Vec<DataItem> = (0..len)
                .map(|i| item(i as u64, prios[i]).with_deps(deps[i].iter().map(|d| VersionKey::new(*d, 1))))
                .collect();
            let forward = agglomerate(&items).unwrap();
            let mut rev = items.clone();
            rev.reverse();
            let backward = agglomerate(&rev).unwrap();
            prop_assert_eq!(forward.priority, backward.priority);
            prop_assert_eq!(&forward.temporal_deps, &backward.temporal_deps);
            // nested merge gives the same answer as a flat one
            let (l, r) = items.split_at(len / 2);
            let nested: Vec<DataItem> = [l, r].iter().filter(|s| !s.is_empty()).map(|s| agglomerate(s).unwrap()).collect();
            let nested = agglomerate(&nested).unwrap();
            prop_assert_eq!(nested.priority, forward.priority);
            prop_assert_eq!(nested.temporal_deps, forward.temporal_deps);
        }
    }

    fn chain_graph() -> DependencyGraph {
        let mut g = DependencyGraph::new();
        g.insert(item(1, 0.1).created(1.0)).unwrap();
        g.insert(item(2, 0.5).created(2.0).with_deps([VersionKey::new(1, 1)])).unwrap();
        g
    }

    #[test]
    fn propagate_raises_direct_dep() {
        let mut g = DependencyGraph::new();
        g.insert(item(1, 0.4).created(1.0)).unwrap();
        let new = item(2, 0.9).created(2.0).with_deps([VersionKey::new(1, 1)]);
        g.insert(new.clone()).unwrap();
        let raised = g.propagate_priority(&new).unwrap();
        assert_eq!(raised, vec![(VersionKey::new(1, 1), 0.9)]);
        assert_eq!(g.get(&VersionKey::new(1, 1)).unwrap().priority, 0.9);
    }

    #[test]
    fn propagate_never_lowers() {
        let mut g = DependencyGraph::new();
        g.insert(item(1, 0.7).created(1.0)).unwrap();
        let new = item(2, 0.2).created(2.0).with_deps([VersionKey::new(1, 1)]);
        g.insert(new.clone()).unwrap();
        assert!(g.propagate_priority(&new).unwrap().is_empty());
        assert_eq!(g.get(&VersionKey::new(1, 1)).unwrap().priority, 0.7);
    }

    #[test]
    fn propagate_is_transitive() {
        let mut g = chain_graph();
        let new = item(3, 0.8).created(3.0).with_deps([VersionKey::new(2, 1)]);
        g.insert(new.clone()).unwrap();
        let raised = g.propagate_priority(&new).unwrap();
        assert_eq!(raised, vec![(VersionKey::new(1, 1), 0.8), (VersionKey::new(2, 1), 0.8)]);
        // idempotent
        assert!(g.propagate_priority(&new).unwrap().is_empty());
    }

    #[test]
    fn dangling_and_non_older_deps_are_rejected() {
        let mut g = chain_graph();
        let bad = item(3, 0.8).created(3.0).with_deps([VersionKey::new(42, 1)]);
        assert!(matches!(g.insert(bad.clone()), Err(ModelError::DanglingDependency { .. })));
        assert!(matches!(g.propagate_priority(&bad), Err(ModelError::DanglingDependency { .. })));
        let newer_dep = item(4, 0.8).created(0.5).with_deps([VersionKey::new(2, 1)]);
        assert!(matches!(g.insert(newer_dep), Err(ModelError::NotOlder { .. })));
        assert!(g.is_acyclic());
    }

    #[test]
    fn versions_must_increase() {
        let mut g = DependencyGraph::new();
        g.insert(item(1, 0.1).with_version(3)).unwrap();
        assert!(matches!(
            g.insert(item(1, 0.1).with_version(2)),
            Err(ModelError::NonMonotoneVersion { .. })
        ));
        assert!(matches!(
            g.insert(item(1, 0.1).with_version(3)),
            Err(ModelError::DuplicateVersion(_))
        ));
    }

    #[test]
    fn pinning_follows_dependents_reaching_the_server() {
        let mut g = DependencyGraph::new();
        let v1 = item(1, 0.5).created(1.0);
        let v2 = item(1, 0.5).with_version(2).created(2.0).with_deps([v1.key()]);
        g.insert(v1.clone()).unwrap();
        assert!(!g.is_pinned(&v1.key()));
        g.insert(v2.clone()).unwrap();
        assert!(g.is_pinned(&v1.key()));
        g.mark_on_server(&v2.key());
        assert!(!g.is_pinned(&v1.key()));
    }

    #[test]
    fn pin_index_walks_chains() {
        let mut p = PinIndex::new();
        let (a, b, c) = (VersionKey::new(1, 1), VersionKey::new(1, 2), VersionKey::new(1, 3));
        p.register(a, &[]);
        p.register(b, &[a]);
        p.register(c, &[b]);
        p.mark_served(b);
        // c is still unserved and needs b, which needs a
        assert!(p.is_pinned(&a));
        p.mark_served(c);
        assert!(!p.is_pinned(&a));
    }

    fn rec(v: u64, placement: Placement) -> VersionRecord {
        VersionRecord {
            key: VersionKey::new(5, v),
            placement,
            pinned: false,
        }
    }

    #[test]
    fn conflict_when_newer_version_sits_on_peer() {
        let records = [rec(1, Placement::on_server()), rec(2, Placement::on_peer(TerminalId(3), [0]))];
        let report = detect_conflict(&records, RestoreSource::Server, 1).unwrap().unwrap();
        assert_eq!(report.restored.version, 1);
        assert_eq!(report.newer.version, 2);
        assert_eq!(report.newer.location, RestoreSource::Peers);
    }

    #[test]
    fn no_conflict_cases() {
        let only = [rec(1, Placement::on_server())];
        assert_eq!(detect_conflict(&only, RestoreSource::Server, 1).unwrap(), None);
        let mut both = Placement::on_server();
        both.peers.insert(TerminalId(2), [0].into());
        let same = [rec(1, both)];
        assert_eq!(detect_conflict(&same, RestoreSource::Server, 1).unwrap(), None);
        assert!(detect_conflict(&[], RestoreSource::Server, 1).is_err());
    }

    #[test]
    fn conflict_vice_versa() {
        let records = [rec(1, Placement::on_peer(TerminalId(3), [0])), rec(2, Placement::on_server())];
        let report = detect_conflict(&records, RestoreSource::Peers, 1).unwrap().unwrap();
        assert_eq!(report.newer.location, RestoreSource::Server);
    }

    #[test]
    fn fragment_sizes_are_equal_and_rounded_up() {
        let mut a = item(1, 0.5);
        a.size_bytes = 10;
        a.n = 4;
        a.k = 3;
        let sizes: BTreeSet<u64> = (0..4).map(|i| a.fragment(i).payload_bytes).collect();
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![4 + HEADER_LEN as u64]);
    }
}
