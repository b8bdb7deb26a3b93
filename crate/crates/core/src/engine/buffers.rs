//! Triple-buffered host memory for two-level checkpointing.
//!
//! A buffer moves `Free → Snapshotting → Snapshotted → Persisting →
//! Recovery → Free`. Only one buffer persists at a time, persists run in
//! snapshot order, and the buffer holding the newest durable version stays
//! in `Recovery` until a newer version is durable.

use std::collections::{BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::topology::{Rank, UnitId};

pub const NUM_BUFFERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "version", rename_all = "snake_case")]
pub enum BufferStatus {
    Free,
    Snapshotting(u64),
    Snapshotted(u64),
    Persisting(u64),
    Recovery(u64),
}

impl BufferStatus {
    pub fn version(self) -> Option<u64> {
        match self {
            BufferStatus::Free => None,
            BufferStatus::Snapshotting(v)
            | BufferStatus::Snapshotted(v)
            | BufferStatus::Persisting(v)
            | BufferStatus::Recovery(v) => Some(v),
        }
    }

    /// Whether the buffer holds a finished snapshot usable for recovery.
    pub fn holds_snapshot(self) -> bool {
        matches!(
            self,
            BufferStatus::Snapshotted(_) | BufferStatus::Persisting(_) | BufferStatus::Recovery(_)
        )
    }
}

/// One byte range of one unit held by one rank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferEntry {
    pub rank: Rank,
    pub unit: UnitId,
    pub key: String,
    pub start: u64,
    pub end: u64,
    /// Whether this range is written to storage when the buffer persists.
    pub persist: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    pub id: usize,
    pub status: BufferStatus,
    /// Training iteration captured by the snapshot.
    pub iteration: u64,
    pub content: Vec<BufferEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BufferError {
    #[error("no free buffer")]
    NoFreeBuffer,
    #[error("a snapshot is still in progress in buffer {0}")]
    SnapshotInFlight(usize),
    #[error("buffer {id} is {status:?}, expected {expected}")]
    WrongStatus {
        id: usize,
        status: BufferStatus,
        expected: &'static str,
    },
    #[error("version {version} is not newer than {latest}")]
    StaleVersion { version: u64, latest: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferSet {
    pub buffers: Vec<Buffer>,
    last_version: Option<u64>,
}

impl Default for BufferSet {
    fn default() -> Self {
        Self::new()
    }
}

impl BufferSet {
    pub fn new() -> Self {
        BufferSet {
            buffers: (0..NUM_BUFFERS)
                .map(|id| Buffer {
                    id,
                    status: BufferStatus::Free,
                    iteration: 0,
                    content: Vec::new(),
                })
                .collect(),
            last_version: None,
        }
    }

    pub fn status(&self, id: usize) -> BufferStatus {
        self.buffers[id].status
    }

    pub fn find(&self, pred: impl Fn(BufferStatus) -> bool) -> Option<usize> {
        self.buffers.iter().position(|b| pred(b.status))
    }

    pub fn persisting(&self) -> Option<usize> {
        self.find(|s| matches!(s, BufferStatus::Persisting(_)))
    }

    pub fn snapshotting(&self) -> Option<usize> {
        self.find(|s| matches!(s, BufferStatus::Snapshotting(_)))
    }

    pub fn recovery(&self) -> Option<usize> {
        self.find(|s| matches!(s, BufferStatus::Recovery(_)))
    }

    pub fn has_free(&self) -> bool {
        self.find(|s| s == BufferStatus::Free).is_some()
    }

    /// Claims the lowest free buffer for snapshot `version`.
    pub fn begin_snapshot(
        &mut self,
        version: u64,
        iteration: u64,
        content: Vec<BufferEntry>,
    ) -> Result<usize, BufferError> {
        if let Some(id) = self.snapshotting() {
            return Err(BufferError::SnapshotInFlight(id));
        }
        if let Some(latest) = self.last_version {
            if version <= latest {
                return Err(BufferError::StaleVersion { version, latest });
            }
        }
        let id = self
            .find(|s| s == BufferStatus::Free)
            .ok_or(BufferError::NoFreeBuffer)?;
        self.last_version = Some(version);
        let b = &mut self.buffers[id];
        b.status = BufferStatus::Snapshotting(version);
        b.iteration = iteration;
        b.content = content;
        Ok(id)
    }

    /// Marks a snapshot finished and starts persisting if the persister is
    /// idle. Returns the buffer that started persisting, if any.
    pub fn complete_snapshot(&mut self, id: usize) -> Result<Option<usize>, BufferError> {
        match self.buffers[id].status {
            BufferStatus::Snapshotting(v) => {
                self.buffers[id].status = BufferStatus::Snapshotted(v);
                Ok(self.start_next_persist())
            }
            status => Err(BufferError::WrongStatus {
                id,
                status,
                expected: "Snapshotting",
            }),
        }
    }

    /// Moves the oldest snapshotted buffer to `Persisting` when no persist
    /// is running.
    pub fn start_next_persist(&mut self) -> Option<usize> {
        if self.persisting().is_some() {
            return None;
        }
        let id = self
            .buffers
            .iter()
            .filter_map(|b| match b.status {
                BufferStatus::Snapshotted(v) => Some((v, b.id)),
                _ => None,
            })
            .min()?
            .1;
        let v = self.buffers[id].status.version().expect("snapshotted");
        self.buffers[id].status = BufferStatus::Persisting(v);
        Some(id)
    }

    /// Ends the persist of buffer `id`. On success the buffer becomes the
    /// recovery buffer and the previous one is freed; on failure the buffer
    /// is freed and the previous recovery buffer is kept. Returns the buffer
    /// that started persisting next, if any.
    pub fn finish_persist(&mut self, id: usize, success: bool) -> Result<Option<usize>, BufferError> {
        let v = match self.buffers[id].status {
            BufferStatus::Persisting(v) => v,
            status => {
                return Err(BufferError::WrongStatus {
                    id,
                    status,
                    expected: "Persisting",
                })
            }
        };
        if success {
            if let Some(old) = self.recovery() {
                self.free(old);
            }
            self.buffers[id].status = BufferStatus::Recovery(v);
        } else {
            self.free(id);
        }
        Ok(self.start_next_persist())
    }

    pub fn free(&mut self, id: usize) {
        let b = &mut self.buffers[id];
        b.status = BufferStatus::Free;
        b.content.clear();
        b.iteration = 0;
    }

    /// State after a node failure: in-flight work is abandoned, the recovery
    /// buffer survives without any unit that had a range on a failed rank.
    pub fn reset_after_fault(&mut self, failed_ranks: &BTreeSet<Rank>) {
        for id in 0..self.buffers.len() {
            if matches!(self.buffers[id].status, BufferStatus::Recovery(_)) {
                let broken: BTreeSet<UnitId> = self.buffers[id]
                    .content
                    .iter()
                    .filter(|e| failed_ranks.contains(&e.rank))
                    .map(|e| e.unit)
                    .collect();
                self.buffers[id]
                    .content
                    .retain(|e| !broken.contains(&e.unit));
            } else {
                self.free(id);
            }
        }
    }
}

/// One step of the buffer state machine, as explored by [`explore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BufferEvent {
    Begin,
    Complete(usize),
    PersistOk(usize),
    PersistFail(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ModelState {
    statuses: Vec<BufferStatus>,
    begun: u64,
    max_complete: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub states: usize,
    pub transitions: usize,
    pub blocked_begins: usize,
    pub violations: Vec<String>,
}

fn check(set: &BufferSet, max_complete: Option<u64>) -> Option<String> {
    let persisting = set
        .buffers
        .iter()
        .filter(|b| matches!(b.status, BufferStatus::Persisting(_)))
        .count();
    if persisting > 1 {
        return Some(format!("{persisting} buffers persisting: {:?}", statuses(set)));
    }
    let recovery: Vec<u64> = set
        .buffers
        .iter()
        .filter_map(|b| match b.status {
            BufferStatus::Recovery(v) => Some(v),
            _ => None,
        })
        .collect();
    let expected: Vec<u64> = max_complete.into_iter().collect();
    if recovery != expected {
        return Some(format!(
            "recovery buffers {recovery:?} but newest durable version {max_complete:?}: {:?}",
            statuses(set)
        ));
    }
    None
}

fn statuses(set: &BufferSet) -> Vec<BufferStatus> {
    set.buffers.iter().map(|b| b.status).collect()
}

/// Breadth-first enumeration of every interleaving of up to `max_begins`
/// checkpoint events together with their snapshot completions and
/// successful or failed persists. Checks in every reachable state that at
/// most one buffer persists and that the recovery buffer holds exactly the
/// newest durable version.
pub fn explore(max_begins: u64) -> ExploreReport {
    let mut report = ExploreReport::default();
    let start = (BufferSet::new(), 0u64, None::<u64>);
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    let key = |s: &BufferSet, begun: u64, mc: Option<u64>| ModelState {
        statuses: statuses(s),
        begun,
        max_complete: mc,
    };
    seen.insert(key(&start.0, start.1, start.2));
    queue.push_back(start);
    while let Some((set, begun, max_complete)) = queue.pop_front() {
        report.states += 1;
        if let Some(v) = check(&set, max_complete) {
            report.violations.push(v);
            continue;
        }
        let mut events = Vec::new();
        if begun < max_begins {
            events.push(BufferEvent::Begin);
        }
        for b in &set.buffers {
            match b.status {
                BufferStatus::Snapshotting(_) => events.push(BufferEvent::Complete(b.id)),
                BufferStatus::Persisting(_) => {
                    events.push(BufferEvent::PersistOk(b.id));
                    events.push(BufferEvent::PersistFail(b.id));
                }
                _ => {}
            }
        }
        for ev in events {
            let mut next = set.clone();
            let mut next_begun = begun;
            let mut next_complete = max_complete;
            let result = match ev {
                BufferEvent::Begin => {
                    next_begun += 1;
                    next.begin_snapshot(next_begun, next_begun, Vec::new()).map(|_| ())
                }
                BufferEvent::Complete(id) => next.complete_snapshot(id).map(|_| ()),
                BufferEvent::PersistOk(id) => {
                    let v = next.status(id).version();
                    next_complete = next_complete.max(v);
                    next.finish_persist(id, true).map(|_| ())
                }
                BufferEvent::PersistFail(id) => next.finish_persist(id, false).map(|_| ()),
            };
            match result {
                Ok(()) => {}
                Err(BufferError::NoFreeBuffer) | Err(BufferError::SnapshotInFlight(_)) => {
                    report.blocked_begins += 1;
                    continue;
                }
                Err(e) => {
                    report.violations.push(format!("{ev:?} rejected: {e}"));
                    continue;
                }
            }
            report.transitions += 1;
            let k = key(&next, next_begun, next_complete);
            if seen.insert(k) {
                queue.push_back((next, next_begun, next_complete));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_immediately_when_idle() {
        let mut s = BufferSet::new();
        let b = s.begin_snapshot(1, 10, Vec::new()).unwrap();
        assert_eq!(s.complete_snapshot(b).unwrap(), Some(b));
        assert_eq!(s.status(b), BufferStatus::Persisting(1));
    }

    #[test]
    fn waits_while_another_persists() {
        let mut s = BufferSet::new();
        let a = s.begin_snapshot(1, 10, Vec::new()).unwrap();
        s.complete_snapshot(a).unwrap();
        let b = s.begin_snapshot(2, 20, Vec::new()).unwrap();
        assert_eq!(s.complete_snapshot(b).unwrap(), None);
        assert_eq!(s.status(b), BufferStatus::Snapshotted(2));
        assert_eq!(s.finish_persist(a, true).unwrap(), Some(b));
        assert_eq!(s.status(a), BufferStatus::Recovery(1));
        s.finish_persist(b, true).unwrap();
        assert_eq!(s.status(a), BufferStatus::Free);
        assert_eq!(s.status(b), BufferStatus::Recovery(2));
    }

    #[test]
    fn third_overlapping_checkpoint_blocks() {
        let mut s = BufferSet::new();
        let a = s.begin_snapshot(1, 1, Vec::new()).unwrap();
        s.complete_snapshot(a).unwrap();
        let b = s.begin_snapshot(2, 2, Vec::new()).unwrap();
        s.complete_snapshot(b).unwrap();
        let c = s.begin_snapshot(3, 3, Vec::new()).unwrap();
        s.complete_snapshot(c).unwrap();
        assert_eq!(s.begin_snapshot(4, 4, Vec::new()), Err(BufferError::NoFreeBuffer));
        s.finish_persist(a, true).unwrap();
        assert_eq!(s.begin_snapshot(4, 4, Vec::new()), Err(BufferError::NoFreeBuffer));
        s.finish_persist(b, true).unwrap();
        assert!(s.begin_snapshot(4, 4, Vec::new()).is_ok());
    }

    #[test]
    fn failed_persist_keeps_previous_recovery() {
        let mut s = BufferSet::new();
        let a = s.begin_snapshot(1, 1, Vec::new()).unwrap();
        s.complete_snapshot(a).unwrap();
        s.finish_persist(a, true).unwrap();
        let b = s.begin_snapshot(2, 2, Vec::new()).unwrap();
        s.complete_snapshot(b).unwrap();
        s.finish_persist(b, false).unwrap();
        assert_eq!(s.status(a), BufferStatus::Recovery(1));
        assert_eq!(s.status(b), BufferStatus::Free);
    }

    #[test]
    fn rejects_out_of_order_transitions() {
        let mut s = BufferSet::new();
        assert!(s.complete_snapshot(0).is_err());
        assert!(s.finish_persist(0, true).is_err());
        let a = s.begin_snapshot(5, 5, Vec::new()).unwrap();
        assert!(s.finish_persist(a, true).is_err());
        assert_eq!(s.begin_snapshot(6, 6, Vec::new()), Err(BufferError::SnapshotInFlight(a)));
        s.complete_snapshot(a).unwrap();
        assert!(matches!(
            s.begin_snapshot(5, 5, Vec::new()),
            Err(BufferError::StaleVersion { .. })
        ));
    }

    #[test]
    fn exhaustive_small() {
        let r = explore(3);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert!(r.blocked_begins > 0);
    }
}
