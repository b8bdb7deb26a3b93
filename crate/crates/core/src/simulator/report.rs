//! Simulation results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::planner::Strategy;
use crate::scenario::Mode;
use crate::topology::Rank;

pub const TICKS_PER_SECOND: u64 = 1_000_000;

/// Seconds to whole ticks, rounding up. Values within a millionth of a tick
/// of an integer snap to it so that decimal inputs such as `1.1` do not
/// gain a tick from binary rounding.
pub fn to_ticks(seconds: f64) -> u64 {
    let t = seconds * TICKS_PER_SECOND as f64;
    let r = t.round();
    if (t - r).abs() < 1e-6 {
        r.max(0.0) as u64
    } else {
        t.ceil().max(0.0) as u64
    }
}

pub fn to_seconds(ticks: u64) -> f64 {
    ticks as f64 / TICKS_PER_SECOND as f64
}

/// Ticks needed to move `bytes` at `bandwidth` bytes per second.
pub fn transfer_ticks(bytes: u64, bandwidth: f64) -> u64 {
    to_ticks(bytes as f64 / bandwidth)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time: u64,
    /// `None` for events that concern the whole job.
    pub rank: Option<Rank>,
    pub event: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    /// Global checkpoint counter.
    pub index: u64,
    pub iteration: u64,
    pub version: u64,
    pub begin_time: u64,
    pub k_snapshot: u64,
    pub k_persist: u64,
    pub snapshot_bottleneck_rank: Rank,
    pub snapshot_bottleneck_bytes: u64,
    pub persist_bottleneck_rank: Rank,
    pub persist_bottleneck_bytes: u64,
    /// Bytes copied to host memory, all ranks.
    pub snapshot_bytes: u64,
    /// Bytes written to storage, all ranks.
    pub persist_bytes: u64,
    pub snapshot_ticks: u64,
    pub persist_ticks: u64,
    /// Time spent waiting for a free buffer before the snapshot could start.
    pub buffer_wait_ticks: u64,
    /// Time the next update waited for this snapshot (blocking mode: the
    /// whole snapshot and persist).
    pub stall_ticks: u64,
    pub persisted: bool,
}

impl CheckpointRecord {
    /// Saving overhead charged to this checkpoint.
    pub fn o_save_ticks(&self) -> u64 {
        self.buffer_wait_ticks + self.stall_ticks
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub iteration: u64,
    pub time: u64,
    pub nodes: Vec<u64>,
    /// Iteration training resumes from.
    pub rewind_to: u64,
    pub lost_iterations: u64,
    /// Restored iteration of every expert, `[layer][expert]`.
    pub restored: Vec<Vec<u64>>,
    /// Tokens lost by this fault, per layer.
    pub lost_tokens: Vec<u64>,
    pub plt_added: f64,
    /// Units restored from host memory rather than storage.
    pub units_from_memory: usize,
    /// Spread of restored iterations across non-expert units.
    pub version_skew: u64,
    pub k_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PltSummary {
    pub per_layer: Vec<f64>,
    pub lost_tokens_per_layer: Vec<u64>,
    /// `T · TopK` summed over the scheduled run, per layer.
    pub denominator: u64,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBottleneck {
    pub phase: u64,
    pub rank: Rank,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub strategy: Strategy,
    pub mode: Mode,
    pub i_ckpt: u64,
    pub i_total: u64,
    pub iteration_ticks: u64,
    pub fb_ticks: u64,
    pub end_time_ticks: u64,
    pub iterations_executed: u64,

    pub o_save_ticks: u64,
    pub o_restart_ticks: u64,
    pub o_lost_ticks: u64,
    pub o_lost_iterations: u64,
    pub o_ckpt_ticks: u64,
    pub o_save_s: f64,
    pub o_restart_s: f64,
    pub o_lost_s: f64,
    pub o_ckpt_s: f64,

    pub plt: PltSummary,
    pub faults: Vec<FaultRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub plan_bottlenecks: Vec<PhaseBottleneck>,
    pub min_feasible_i_ckpt: u64,
    pub k_trace: Vec<u64>,
    pub max_version_skew: u64,
    pub timeline: Vec<TimelineEvent>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Timeline as `time,rank,event,detail` CSV; time in microseconds, rank
    /// `*` for job-wide events.
    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("time,rank,event,detail\n");
        for e in &self.timeline {
            let rank = e.rank.map_or_else(|| "*".to_string(), |r| r.to_string());
            let detail = if e.detail.contains([',', '"', '\n']) {
                format!("\"{}\"", e.detail.replace('"', "\"\""))
            } else {
                e.detail.clone()
            };
            writeln!(out, "{},{},{},{}", e.time, rank, e.event, detail).expect("string write");
        }
        out
    }

    /// Mean per-checkpoint saving overhead in seconds.
    pub fn mean_o_save_s(&self) -> f64 {
        if self.checkpoints.is_empty() {
            0.0
        } else {
            self.o_save_s / self.checkpoints.len() as f64
        }
    }

    /// Mean wall time per scheduled iteration, in seconds.
    pub fn mean_iteration_s(&self) -> f64 {
        to_seconds(self.end_time_ticks) / self.i_total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_round_up_without_float_noise() {
        assert_eq!(to_ticks(1.1), 1_100_000);
        assert_eq!(to_ticks(0.1), 100_000);
        assert_eq!(to_ticks(1e-7), 1);
        assert_eq!(to_ticks(2.0000015), 2_000_002);
        assert_eq!(transfer_ticks(3, 1e6), 3);
        assert_eq!(transfer_ticks(1, 3e6), 1);
    }
}
