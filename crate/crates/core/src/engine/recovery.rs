//! Picks, for every state unit, the most recent copy that survived a fault.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::topology::{NodeId, Rank, RankLayout, UnitId};

/// A durable version as known to the recovery resolver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedVersion {
    pub version: u64,
    pub iteration: u64,
    /// Units fully present in the version.
    pub units: BTreeSet<UnitId>,
}

/// A finished in-memory snapshot and the ranks holding each unit's ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub version: u64,
    pub iteration: u64,
    pub holders: BTreeMap<UnitId, BTreeSet<Rank>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum RecoverySource {
    MemorySnapshot { node: NodeId, version: u64 },
    PersistentStore { version: u64 },
    /// No copy exists; the unit restarts from its initial state.
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecovery {
    pub source: RecoverySource,
    pub restored_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryPlan {
    pub units: Vec<UnitRecovery>,
}

impl RecoveryPlan {
    pub fn get(&self, id: UnitId) -> UnitRecovery {
        self.units[id.0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecoveryError {
    #[error("no complete persisted version exists")]
    NoCompleteVersion,
    #[error("non-expert unit {0} exists in no surviving source")]
    MissingUnit(String),
}

/// Resolves every unit to its newest surviving copy.
///
/// In-memory copies count only when every rank holding one of the unit's
/// ranges is on a surviving node. Durable versions always count. Ties prefer
/// memory. Experts found nowhere restore to iteration 0; any other missing
/// unit is an error.
pub fn resolve_recovery(
    layout: &RankLayout,
    failed: &BTreeSet<NodeId>,
    persisted: &[PersistedVersion],
    snapshots: &[MemorySnapshot],
) -> Result<RecoveryPlan, RecoveryError> {
    if persisted.is_empty() {
        return Err(RecoveryError::NoCompleteVersion);
    }
    let mut units = Vec::with_capacity(layout.units.len());
    for unit in &layout.units {
        let mut best: Option<UnitRecovery> = None;
        for snap in snapshots {
            let Some(holders) = snap.holders.get(&unit.id) else {
                continue;
            };
            if holders.iter().any(|&r| layout.rank_failed(r, failed)) {
                continue;
            }
            if best.is_none_or(|b| snap.iteration > b.restored_iteration) {
                let first = *holders.iter().next().expect("non-empty holders");
                best = Some(UnitRecovery {
                    source: RecoverySource::MemorySnapshot {
                        node: layout.rank_info[first].node,
                        version: snap.version,
                    },
                    restored_iteration: snap.iteration,
                });
            }
        }
        for v in persisted {
            if !v.units.contains(&unit.id) {
                continue;
            }
            if best.is_none_or(|b| v.iteration > b.restored_iteration) {
                best = Some(UnitRecovery {
                    source: RecoverySource::PersistentStore { version: v.version },
                    restored_iteration: v.iteration,
                });
            }
        }
        let resolved = match best {
            Some(b) => b,
            None if unit.kind.is_expert() || unit.size_bytes == 0 => UnitRecovery {
                source: RecoverySource::Initial,
                restored_iteration: 0,
            },
            None => return Err(RecoveryError::MissingUnit(unit.kind.key())),
        };
        units.push(resolved);
    }
    Ok(RecoveryPlan { units })
}
