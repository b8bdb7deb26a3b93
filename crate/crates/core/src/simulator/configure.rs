//! Picks PEC tiers and the checkpoint interval from cluster timings.

use serde::{Deserialize, Serialize};

use crate::engine::snapshot_content;
use crate::error::ValidationError;
use crate::planner::{bottleneck_of, pec_imbalance, plan_for, PecConfig, Strategy};
use crate::scenario::Scenario;
use crate::selector::{select_tiers_sequential, Selection, SelectionSchedule};
use crate::simulator::report::{to_ticks, transfer_ticks};
use crate::topology::{build_layout, RankLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigureOutcome {
    pub pec: PecConfig,
    pub i_ckpt: u64,
    /// Set when even one expert per layer cannot hide behind forward/backward.
    pub snapshot_infeasible: bool,
    /// Set when a persist target was given and `k_persist = 1` misses it.
    pub persist_target_missed: bool,
    pub snapshot_ticks: u64,
    pub persist_ticks: u64,
}

fn pec_strategy(strategy: Strategy) -> Strategy {
    if strategy.is_pec() {
        strategy
    } else {
        Strategy::EqualShardedPec
    }
}

/// Largest per-phase snapshot bottleneck when saving `k` experts per layer.
pub fn snapshot_bottleneck(layout: &RankLayout, strategy: Strategy, k: u64) -> u64 {
    plan_for(layout, pec_strategy(strategy), k)
        .phases
        .iter()
        .map(|p| bottleneck_of(&p.workload_bytes).1)
        .max()
        .unwrap_or(0)
}

/// Largest persist bottleneck over the sequential two-tier schedule, scanned
/// until both the snapshot phase and the persist rotation have repeated.
pub fn persist_bottleneck(layout: &RankLayout, strategy: Strategy, ks: u64, kp: u64) -> u64 {
    let n = layout.num_experts();
    let plan = plan_for(layout, pec_strategy(strategy), ks);
    let window = (n as u64).div_ceil(ks);
    let rotations = SelectionSchedule::new(n, kp as usize, 1).period();
    let span = plan.period() * window * rotations;
    let mut worst = 0;
    for c in 0..span {
        let persist: Vec<Vec<usize>> = (0..layout.num_layers())
            .map(|m| select_tiers_sequential(c, m, n, ks as usize, kp as usize).persist)
            .collect();
        let content = snapshot_content(layout, &plan.phase(c).assignments, &persist);
        let mut load = vec![0u64; layout.num_ranks()];
        for e in content.iter().filter(|e| e.persist) {
            load[e.rank] += e.end - e.start;
        }
        worst = worst.max(bottleneck_of(&load).1);
    }
    worst
}

/// Chooses the largest `k_snapshot` whose snapshot hides behind one
/// forward/backward pass, the smallest `k_persist` (raised while the
/// imbalance predicate leaves spare ranks at no bottleneck cost), and the
/// shortest interval that lets each persist finish before the next begins.
/// `persist_target` is an optional persist-time budget in seconds.
pub fn adaptive_configure(
    scenario: &Scenario,
    persist_target: Option<f64>,
) -> Result<ConfigureOutcome, ValidationError> {
    let layout = build_layout(&scenario.model, &scenario.parallel, &scenario.cluster)?;
    let cl = &scenario.cluster;
    let n = layout.num_experts() as u64;
    let fb = to_ticks(cl.fb_time);
    let snap_ticks = |k| transfer_ticks(snapshot_bottleneck(&layout, scenario.strategy, k), cl.snapshot_bandwidth);

    let fitting = (1..=n).filter(|&k| snap_ticks(k) <= fb).max();
    let snapshot_infeasible = fitting.is_none();
    let ks = fitting.unwrap_or(1);

    let persist_bytes = |kp| persist_bottleneck(&layout, scenario.strategy, ks, kp);
    let mut kp = 1;
    let base = persist_bytes(1);
    if pec_imbalance(&scenario.model, &scenario.parallel, 1) {
        if let Some(k) = (2..=ks).filter(|&k| persist_bytes(k) == base).max() {
            kp = k;
        }
    }
    let persist_ticks = transfer_ticks(base, cl.persist_bandwidth);
    let persist_target_missed = persist_target.is_some_and(|t| persist_ticks > to_ticks(t));
    let iteration = to_ticks(cl.fb_time) + to_ticks(cl.update_time);
    let i_ckpt = persist_ticks.div_ceil(iteration).max(1);

    let selection = scenario.pec.as_ref().map_or(Selection::Sequential, |p| p.selection);
    Ok(ConfigureOutcome {
        pec: PecConfig {
            k_pec: kp,
            selection,
            k_snapshot: ks,
            k_persist: kp,
        },
        i_ckpt,
        snapshot_infeasible,
        persist_target_missed,
        snapshot_ticks: snap_ticks(ks),
        persist_ticks,
    })
}
