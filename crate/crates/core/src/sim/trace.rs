use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::model::VersionKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Produce,
    Encounter,
    /// Owner → peer fragment transfer.
    PeerSave,
    PeerRefuse,
    /// Control message from owner to peer (supersession, server copies).
    OwnerNotice,
    InternetWindow,
    /// Owner → server upload.
    ServerUpload,
    /// Peer → server upload of held replicas.
    PeerFlush,
    PeerDelete,
    Failure,
    Restore,
    Conflict,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: f64,
    pub kind: TraceKind,
    pub from: Option<u32>,
    pub to: Option<u32>,
    pub owner: Option<u32>,
    pub bytes: u64,
    pub item: Option<VersionKey>,
}

/// Writes one JSON object per line.
pub fn write_trace(mut out: impl Write, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace(input: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    input.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
