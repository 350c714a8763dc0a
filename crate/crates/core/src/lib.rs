//! Opportunistic collaborative backup for mobile terminals.
//!
//! A terminal that is away from any infrastructure disperses each item into
//! `n` fragments (any `k` rebuild it) and hands fragments to the terminals it
//! happens to meet. An incremental estimator tracks, per item, the probability
//! that enough fragments could be fetched back; a deficit-ordered scheduler
//! spends each encounter on the items furthest below their target. Backup
//! peers keep the fragments within a memory quota, drop them once they are
//! useless and evict by age, resilience and size under pressure. A seeded
//! discrete-event simulator ties it all together and measures the result.
//!
//! | module | contents |
//! |---|---|
//! | [`model`] | items, fragments, versions, dependency graph, conflict detection |
//! | [`reliability`] | the restore-probability estimator |
//! | [`dispersal`] | the `(n, k)` erasure codec |
//! | [`scheduler`] | backup queue and the meeting loop |
//! | [`peer`] | the backup-peer replica store |
//! | [`sim`] | the simulator, scenarios, reports and traces |

pub mod dispersal;
pub mod model;
pub mod peer;
pub mod reliability;
pub mod scheduler;
pub mod sim;

pub use dispersal::{reconstruct, split, DispersalError, EncodedFragment, FragmentSet};
pub use model::{DataItem, ItemId, TerminalId, VersionKey};
pub use reliability::{composite_success, ChannelEstimate, ReliabilityTable};
pub use peer::PeerStore;
pub use scheduler::{BackupClient, BackupQueue, LinkSession};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/estimator.md")]
mod book_estimator {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/dispersal.md")]
mod book_dispersal {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scheduling.md")]
mod book_scheduling {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/peer-store.md")]
mod book_peer_store {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/simulation.md")]
mod book_simulation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
