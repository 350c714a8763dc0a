//! Owner-side backup scheduling.
//!
//! Pending item versions wait in a [`BackupQueue`] ordered by *deficit*, the
//! gap between an item's priority (its target restore probability) and its
//! current composite restore estimate, largest gap first and FIFO among
//! equal gaps. When a terminal is met, [`BackupClient::on_meeting`] keeps
//! pulling the most urgent item that fits on that terminal, ships its next
//! fragment, refreshes the estimate and re-queues the item only while the
//! estimate stays below the priority.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataItem, DependencyGraph, Fragment, ModelError, TerminalId, VersionKey};
use crate::reliability::{composite_success, ChannelEstimate, DepState, ReliabilityError, ReliabilityTable, TableLookup};

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("{0} is already queued")]
    DuplicateEntry(VersionKey),
    #[error("{0} is not registered with this client")]
    UnknownItem(VersionKey),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
}

/// Sort key of a queue entry: larger deficit first, then lower sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct QueueKey {
    deficit: Reverse<OrderedFloat<f64>>,
    seq: u64,
}

impl QueueKey {
    pub fn deficit(&self) -> f64 {
        self.deficit.0.into_inner()
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

/// Deficit-ordered queue of item versions awaiting more fragments.
#[derive(Debug, Clone, Default)]
pub struct BackupQueue {
    order: BTreeSet<(QueueKey, VersionKey)>,
    index: BTreeMap<VersionKey, QueueKey>,
    next_seq: u64,
}

impl BackupQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &VersionKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn key_of(&self, key: &VersionKey) -> Option<QueueKey> {
        self.index.get(key).copied()
    }

    /// Queues `item` iff `priority - current_success > 0`. Returns whether it
    /// was inserted.
    pub fn enqueue(&mut self, item: &DataItem, current_success: f64) -> Result<bool, SchedulerError> {
        self.push(item.key(), item.priority - current_success)
    }

    /// Queues `key` at `deficit` if the deficit is positive.
    pub fn push(&mut self, key: VersionKey, deficit: f64) -> Result<bool, SchedulerError> {
        if self.index.contains_key(&key) {
            return Err(SchedulerError::DuplicateEntry(key));
        }
        if deficit.is_nan() || deficit <= 0.0 {
            return Ok(false);
        }
        let qk = QueueKey {
            deficit: Reverse(OrderedFloat(deficit)),
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.insert(key, qk);
        Ok(true)
    }

    /// Puts an entry back exactly where it was.
    pub fn reinsert(&mut self, key: VersionKey, qk: QueueKey) {
        self.remove(&key);
        self.insert(key, qk);
    }

    fn insert(&mut self, key: VersionKey, qk: QueueKey) {
        self.order.insert((qk, key));
        self.index.insert(key, qk);
    }

    pub fn remove(&mut self, key: &VersionKey) -> bool {
        match self.index.remove(key) {
            Some(qk) => {
                self.order.remove(&(qk, *key));
                true
            }
            None => false,
        }
    }

    /// Removes and returns the first entry, in queue order, accepted by `can_save`.
    pub fn pull(&mut self, mut can_save: impl FnMut(&VersionKey) -> bool) -> Option<(VersionKey, QueueKey)> {
        let found = self.order.iter().find(|(_, k)| can_save(k)).copied();
        let (qk, key) = found?;
        self.order.remove(&(qk, key));
        self.index.remove(&key);
        Some((key, qk))
    }

    /// Entries in pull order with their deficits.
    pub fn iter(&self) -> impl Iterator<Item = (VersionKey, f64)> + '_ {
        self.order.iter().map(|(qk, k)| (*k, qk.deficit()))
    }

    /// Recomputes every deficit, keeping sequence numbers. Entries whose new
    /// deficit is missing or non-positive leave the queue.
    pub fn refresh(&mut self, mut deficit: impl FnMut(&VersionKey) -> Option<f64>) {
        let entries: Vec<(VersionKey, QueueKey)> = self.index.iter().map(|(k, q)| (*k, *q)).collect();
        for (key, qk) in entries {
            match deficit(&key) {
                Some(d) if d > 0.0 => {
                    if d != qk.deficit() {
                        let fresh = QueueKey {
                            deficit: Reverse(OrderedFloat(d)),
                            seq: qk.seq,
                        };
                        self.reinsert(key, fresh);
                    }
                }
                _ => {
                    self.remove(&key);
                }
            }
        }
    }
}

/// Byte-budgeted link to an encountered terminal. The link drops as soon as a
/// transfer would exceed the budget.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSession {
    budget_bytes: u64,
    used_bytes: u64,
    dropped: bool,
}

impl LinkSession {
    pub fn new(budget_bytes: u64) -> Self {
        LinkSession {
            budget_bytes,
            used_bytes: 0,
            dropped: false,
        }
    }

    /// Link that carries exactly `fragments` transfers of `size` bytes.
    pub fn for_fragments(size: u64, fragments: u64) -> Self {
        Self::new(size * fragments)
    }

    pub fn reachable(&self) -> bool {
        !self.dropped
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn remaining(&self) -> u64 {
        self.budget_bytes - self.used_bytes
    }

    /// Attempts a transfer. On overflow the partial transfer is lost and the
    /// link goes down.
    pub fn try_transfer(&mut self, bytes: u64) -> bool {
        if self.dropped {
            return false;
        }
        if self.used_bytes + bytes > self.budget_bytes {
            self.used_bytes = self.budget_bytes;
            self.dropped = true;
            return false;
        }
        self.used_bytes += bytes;
        true
    }

    pub fn drop_link(&mut self) {
        self.dropped = true;
    }
}

/// The encountered terminal, as seen by the owner's scheduler.
pub trait TerminalHandle {
    fn id(&self) -> TerminalId;

    /// Backup quota this terminal advertises for fragments of `item`.
    fn free_quota(&self, item: &DataItem) -> u64;

    /// Estimated probability that a fragment left here can be retrieved.
    fn channel(&self) -> ChannelEstimate;

    /// Hands over one fragment. `declared_success` is the owner's composite
    /// estimate assuming the save succeeds. Returns whether it was stored.
    fn save(&mut self, item: &DataItem, fragment: Fragment, declared_success: f64) -> bool;
}

/// Quota predicate: inclusive at the boundary.
pub fn can_save(free_quota: u64, fragment_size: u64) -> bool {
    free_quota >= fragment_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaveOutcome {
    pub item: VersionKey,
    pub terminal: TerminalId,
    pub saved: bool,
    pub channel: ChannelEstimate,
    pub fragment_index: u8,
    pub bytes: u64,
    /// Composite estimate after this save (unchanged when not saved).
    pub success_after: f64,
    /// Same-session batch size the estimate was computed with.
    pub batch_size: u32,
}

#[derive(Debug, Clone)]
struct ClientEntry {
    table: ReliabilityTable,
    next_index: u8,
    on_server: bool,
}

struct View<'a> {
    graph: &'a DependencyGraph,
    entries: &'a BTreeMap<VersionKey, ClientEntry>,
    overlay: Option<(VersionKey, &'a ReliabilityTable)>,
}

impl TableLookup for View<'_> {
    fn lookup(&self, key: &VersionKey) -> Option<DepState<'_>> {
        let entry = self.entries.get(key)?;
        if entry.on_server {
            return Some(DepState::OnServer);
        }
        let item = self.graph.get(key)?;
        let table = match self.overlay {
            Some((k, t)) if k == *key => t,
            _ => &entry.table,
        };
        Some(DepState::Partial {
            table,
            deps: &item.temporal_deps,
        })
    }
}

fn next_fragment(
    graph: &DependencyGraph,
    entries: &BTreeMap<VersionKey, ClientEntry>,
    key: &VersionKey,
) -> Option<Fragment> {
    let entry = entries.get(key)?;
    let item = graph.get(key)?;
    (entry.next_index < item.n).then(|| item.fragment(entry.next_index))
}

fn fits(
    graph: &DependencyGraph,
    entries: &BTreeMap<VersionKey, ClientEntry>,
    key: &VersionKey,
    t: &impl TerminalHandle,
) -> bool {
    match (next_fragment(graph, entries, key), graph.get(key)) {
        (Some(f), Some(item)) => can_save(t.free_quota(item), f.payload_bytes),
        _ => false,
    }
}

/// One owner's backup state: its item versions, their estimates and the queue.
#[derive(Debug, Clone)]
pub struct BackupClient {
    owner: TerminalId,
    graph: DependencyGraph,
    entries: BTreeMap<VersionKey, ClientEntry>,
    queue: BackupQueue,
}

impl BackupClient {
    pub fn new(owner: TerminalId) -> Self {
        BackupClient {
            owner,
            graph: DependencyGraph::new(),
            entries: BTreeMap::new(),
            queue: BackupQueue::new(),
        }
    }

    pub fn owner(&self) -> TerminalId {
        self.owner
    }

    pub fn queue(&self) -> &BackupQueue {
        &self.queue
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    pub fn item(&self, key: &VersionKey) -> Option<&DataItem> {
        self.graph.get(key)
    }

    pub fn items(&self) -> impl Iterator<Item = &DataItem> {
        self.graph.items()
    }

    pub fn table(&self, key: &VersionKey) -> Option<&ReliabilityTable> {
        self.entries.get(key).map(|e| &e.table)
    }

    pub fn fragments_saved(&self, key: &VersionKey) -> Option<u8> {
        self.entries.get(key).map(|e| e.next_index)
    }

    pub fn is_on_server(&self, key: &VersionKey) -> bool {
        self.entries.get(key).is_some_and(|e| e.on_server)
    }

    /// Registers a new version, raises its dependencies' priorities and queues
    /// whatever now falls short of its target.
    pub fn add_item(&mut self, item: DataItem) -> Result<Vec<(VersionKey, f64)>, SchedulerError> {
        let key = item.key();
        let table = ReliabilityTable::new(item.k)?;
        self.graph.insert(item.clone())?;
        self.entries.insert(
            key,
            ClientEntry {
                table,
                next_index: 0,
                on_server: false,
            },
        );
        let raised = self.graph.propagate_priority(&item)?;
        for (dep, _) in &raised {
            if !self.queue.contains(dep) && !self.is_on_server(dep) {
                let d = self.deficit(dep)?;
                self.queue.push(*dep, d)?;
            }
        }
        let success = self.composite(&key)?;
        self.queue.enqueue(&item, success)?;
        Ok(raised)
    }

    /// Composite restore estimate of `key`, dependencies included.
    pub fn composite(&self, key: &VersionKey) -> Result<f64, SchedulerError> {
        let item = self.graph.get(key).ok_or(SchedulerError::UnknownItem(*key))?;
        let view = View {
            graph: &self.graph,
            entries: &self.entries,
            overlay: None,
        };
        Ok(composite_success(item, &view)?)
    }

    pub fn deficit(&self, key: &VersionKey) -> Result<f64, SchedulerError> {
        let item = self.graph.get(key).ok_or(SchedulerError::UnknownItem(*key))?;
        Ok(item.priority - self.composite(key)?)
    }

    /// The version is safe on the server: its estimate becomes 1.
    pub fn mark_on_server(&mut self, key: &VersionKey) {
        if let Some(e) = self.entries.get_mut(key) {
            e.on_server = true;
            self.graph.mark_on_server(key);
            self.queue.remove(key);
        }
    }

    /// Stops backing up a version (expired or superseded).
    pub fn retire(&mut self, key: &VersionKey) {
        self.queue.remove(key);
    }

    /// Next fragment NextPacket would hand out, if any remain.
    pub fn next_fragment(&self, key: &VersionKey) -> Option<Fragment> {
        next_fragment(&self.graph, &self.entries, key)
    }

    /// Whether a fragment of `key` could be saved on `t` right now. Items
    /// whose `n` fragments are all out never fit.
    pub fn can_save_on(&self, key: &VersionKey, t: &impl TerminalHandle) -> bool {
        fits(&self.graph, &self.entries, key, t)
    }

    /// Runs the meeting loop against `t` until the link drops, the queue
    /// empties or nothing queued fits on `t`.
    pub fn on_meeting(&mut self, t: &mut impl TerminalHandle, link: &mut LinkSession) -> Vec<SaveOutcome> {
        let mut outcomes = Vec::new();
        if self.queue.is_empty() {
            return outcomes;
        }
        {
            let graph = &self.graph;
            let entries = &self.entries;
            let view = View {
                graph,
                entries,
                overlay: None,
            };
            self.queue.refresh(|k| {
                let item = graph.get(k)?;
                composite_success(item, &view).ok().map(|s| item.priority - s)
            });
        }
        let channel = t.channel();
        // Tables as they stood before this session, plus the count saved here.
        let mut session: BTreeMap<VersionKey, (ReliabilityTable, u32)> = BTreeMap::new();
        let mut refused: BTreeSet<VersionKey> = BTreeSet::new();

        while link.reachable() && !self.queue.is_empty() {
            let pulled = {
                let (graph, entries, t_ref, refused) = (&self.graph, &self.entries, &*t, &refused);
                self.queue
                    .pull(|k| !refused.contains(k) && fits(graph, entries, k, t_ref))
            };
            let Some((key, prior)) = pulled else { break };
            let fragment = self.next_fragment(&key).expect("pull checked a fragment remains");
            if !link.try_transfer(fragment.payload_bytes) {
                self.queue.reinsert(key, prior);
                break;
            }
            let (base, m) = session
                .get(&key)
                .cloned()
                .unwrap_or_else(|| (self.entries[&key].table.clone(), 0));
            let mut tentative = base.clone();
            tentative
                .add_batch_same_terminal(channel, m + 1)
                .expect("batch size is positive");
            let proba = {
                let view = View {
                    graph: &self.graph,
                    entries: &self.entries,
                    overlay: Some((key, &tentative)),
                };
                composite_success(self.graph.get(&key).expect("queued items exist"), &view)
                    .expect("queued items have complete dependency state")
            };
            let item = self.graph.get(&key).expect("queued items exist").clone();
            if !t.save(&item, fragment, proba) {
                refused.insert(key);
                self.queue.reinsert(key, prior);
                outcomes.push(SaveOutcome {
                    item: key,
                    terminal: t.id(),
                    saved: false,
                    channel,
                    fragment_index: fragment.index,
                    bytes: 0,
                    success_after: self.composite(&key).unwrap_or(0.0),
                    batch_size: m,
                });
                continue;
            }
            let entry = self.entries.get_mut(&key).expect("queued items have entries");
            entry.table = tentative;
            entry.next_index += 1;
            session.insert(key, (base, m + 1));
            self.graph.record_peer_fragment(&key, t.id(), fragment.index);
            outcomes.push(SaveOutcome {
                item: key,
                terminal: t.id(),
                saved: true,
                channel,
                fragment_index: fragment.index,
                bytes: fragment.payload_bytes,
                success_after: proba,
                batch_size: m + 1,
            });
            if proba < item.priority {
                self.queue
                    .push(key, item.priority - proba)
                    .expect("entry was pulled, so it is not queued");
            }
        }
        outcomes
    }
}
