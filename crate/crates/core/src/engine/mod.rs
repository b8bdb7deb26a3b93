//! Two-level checkpoint engine: snapshots into host buffers, persists to a
//! versioned store, and resolves what to restore after a fault.

pub mod buffers;
pub mod crash;
pub mod recovery;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};

pub use buffers::{explore, Buffer, BufferEntry, BufferError, BufferSet, BufferStatus, ExploreReport};
pub use crash::{crash_trial, crash_trials, CrashOutcome, CrashSummary};
pub use recovery::{
    resolve_recovery, MemorySnapshot, PersistedVersion, RecoveryError, RecoveryPlan,
    RecoverySource, UnitRecovery,
};
pub use store::{latest_complete, load_checkpoint, FsStore, StoreError, StoreFile, StoreManifest};

use crate::planner::Assignment;
use crate::topology::{Rank, RankLayout};

/// Buffer contents for one checkpoint: every assigned range, flagged for
/// persisting when it is non-expert state or belongs to an expert in
/// `persist_selection`.
pub fn snapshot_content(
    layout: &RankLayout,
    assignments: &[Vec<Assignment>],
    persist_selection: &[Vec<usize>],
) -> Vec<BufferEntry> {
    let persisted: Vec<BTreeSet<usize>> = persist_selection
        .iter()
        .map(|s| s.iter().copied().collect())
        .collect();
    let mut out = Vec::new();
    for (rank, list) in assignments.iter().enumerate() {
        for a in list {
            let persist = match a.expert(layout) {
                Some(id) => persisted[id.layer].contains(&id.expert),
                None => true,
            };
            out.push(BufferEntry {
                rank,
                unit: a.unit,
                key: a.key.clone(),
                start: a.start,
                end: a.end,
                persist,
            });
        }
    }
    out
}

/// Per-rank bytes of a buffer, all ranges or only the persisted ones.
pub fn buffer_workload(buffer: &Buffer, num_ranks: usize, persist_only: bool) -> Vec<u64> {
    let mut w = vec![0; num_ranks];
    for e in &buffer.content {
        if e.persist || !persist_only {
            w[e.rank] += e.end - e.start;
        }
    }
    w
}

/// Synthetic file body standing in for tensor bytes: a line describing the
/// range, repeated to a fixed small size.
pub fn payload(entry: &BufferEntry, version: u64, iteration: u64) -> Vec<u8> {
    format!(
        "{} r{} v{} it{} [{}, {})\n",
        entry.key, entry.rank, version, iteration, entry.start, entry.end
    )
    .into_bytes()
}

/// Buffer state machine plus the durable-version index and optional store.
#[derive(Debug, Clone)]
pub struct CheckpointEngine {
    pub buffers: BufferSet,
    persisted: Vec<PersistedVersion>,
    store: Option<FsStore>,
}

impl CheckpointEngine {
    pub fn new(store: Option<FsStore>) -> Self {
        CheckpointEngine {
            buffers: BufferSet::new(),
            persisted: Vec::new(),
            store,
        }
    }

    pub fn persisted(&self) -> &[PersistedVersion] {
        &self.persisted
    }

    pub fn store(&self) -> Option<&FsStore> {
        self.store.as_ref()
    }

    pub fn latest_persisted(&self) -> Option<&PersistedVersion> {
        self.persisted.last()
    }

    pub fn begin_snapshot(
        &mut self,
        version: u64,
        iteration: u64,
        content: Vec<BufferEntry>,
    ) -> Result<usize, BufferError> {
        self.buffers.begin_snapshot(version, iteration, content)
    }

    pub fn complete_snapshot(&mut self, id: usize) -> Result<Option<usize>, BufferError> {
        self.buffers.complete_snapshot(id)
    }

    /// Writes the persisting buffer `id` and publishes it. Returns the
    /// durable version and the buffer that starts persisting next.
    pub fn persist(&mut self, id: usize) -> Result<(PersistedVersion, Option<usize>), StoreError> {
        let buffer = &self.buffers.buffers[id];
        let version = match buffer.status {
            BufferStatus::Persisting(v) => v,
            status => panic!("persist called on buffer {id} in state {status:?}"),
        };
        let iteration = buffer.iteration;
        let persisted = PersistedVersion {
            version,
            iteration,
            units: buffer
                .content
                .iter()
                .filter(|e| e.persist)
                .map(|e| e.unit)
                .collect(),
        };
        if let Some(store) = &self.store {
            let files: Vec<StoreFile> = buffer
                .content
                .iter()
                .filter(|e| e.persist)
                .map(|e| StoreFile {
                    rank: e.rank,
                    key: e.key.clone(),
                    data: payload(e, version, iteration),
                })
                .collect();
            if let Err(err) = store.write_version(version, iteration, &files) {
                self.buffers
                    .finish_persist(id, false)
                    .expect("buffer was persisting");
                return Err(err);
            }
        }
        self.persisted.push(persisted.clone());
        let next = self
            .buffers
            .finish_persist(id, true)
            .expect("buffer was persisting");
        Ok((persisted, next))
    }

    /// Finished snapshots with the ranks holding each unit.
    pub fn memory_snapshots(&self) -> Vec<MemorySnapshot> {
        self.buffers
            .buffers
            .iter()
            .filter(|b| b.status.holds_snapshot())
            .map(|b| {
                let mut holders: BTreeMap<_, BTreeSet<Rank>> = BTreeMap::new();
                for e in &b.content {
                    holders.entry(e.unit).or_default().insert(e.rank);
                }
                MemorySnapshot {
                    version: b.status.version().expect("holds snapshot"),
                    iteration: b.iteration,
                    holders,
                }
            })
            .collect()
    }

    pub fn reset_after_fault(&mut self, failed_ranks: &BTreeSet<Rank>) {
        self.buffers.reset_after_fault(failed_ranks);
    }
}
