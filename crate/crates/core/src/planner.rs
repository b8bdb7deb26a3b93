//! Checkpoint sizes and per-rank shard plans.
//!
//! A [`ShardPlan`] lists, for each phase of the selection schedule, which
//! byte ranges of which units every rank writes. Four strategies exist:
//!
//! * `Baseline`: rank 0 writes every non-expert module, only EP group 0
//!   writes expert state, every rank writes its own optimizer shard.
//! * `EqualShardedFull`: all experts every time, each expert weight split
//!   across its EP-group replicas, modules dealt round-robin.
//! * `EqualShardedPec`: as above but only the scheduled `K` experts.
//! * `AdaptivePec`: PEC with modules placed greedily on the least loaded rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::selector::{Selection, SelectionSchedule};
use crate::topology::{split_ranges, ExpertId, ModelSpec, ParallelSpec, Rank, RankLayout, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    EqualShardedFull,
    EqualShardedPec,
    AdaptivePec,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::EqualShardedFull,
        Strategy::EqualShardedPec,
        Strategy::AdaptivePec,
    ];

    /// Whether the strategy saves a subset of experts per checkpoint.
    pub fn is_pec(self) -> bool {
        matches!(self, Strategy::EqualShardedPec | Strategy::AdaptivePec)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::EqualShardedFull => "equal_sharded_full",
            Strategy::EqualShardedPec => "equal_sharded_pec",
            Strategy::AdaptivePec => "adaptive_pec",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                format!("unknown strategy {s:?}; expected baseline, equal_sharded_full, equal_sharded_pec or adaptive_pec")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PecConfigFile {
    k_pec: u64,
    #[serde(default)]
    selection: Selection,
    #[serde(default)]
    k_snapshot: Option<u64>,
    #[serde(default)]
    k_persist: Option<u64>,
}

impl From<PecConfigFile> for PecConfig {
    fn from(f: PecConfigFile) -> Self {
        PecConfig {
            k_pec: f.k_pec,
            selection: f.selection,
            k_snapshot: f.k_snapshot.unwrap_or(f.k_pec),
            k_persist: f.k_persist.unwrap_or(f.k_pec),
        }
    }
}

/// Partial-experts settings. `k_snapshot` and `k_persist` default to `k_pec`
/// when omitted from a scenario file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "PecConfigFile")]
pub struct PecConfig {
    pub k_pec: u64,
    pub selection: Selection,
    pub k_snapshot: u64,
    pub k_persist: u64,
}

impl PecConfig {
    pub fn uniform(k: u64, selection: Selection) -> Self {
        PecConfig {
            k_pec: k,
            selection,
            k_snapshot: k,
            k_persist: k,
        }
    }

    pub fn validate(&self, experts: u64) -> Result<(), ValidationError> {
        if self.k_pec == 0 || self.k_pec > experts {
            return Err(ValidationError::KOutOfRange {
                k: self.k_pec,
                experts,
            });
        }
        if !(1 <= self.k_persist && self.k_persist <= self.k_snapshot && self.k_snapshot <= experts)
        {
            return Err(ValidationError::PecOrder {
                k_persist: self.k_persist,
                k_snapshot: self.k_snapshot,
                experts,
            });
        }
        Ok(())
    }
}

/// Size in bytes of a checkpoint holding every unit once.
pub fn full_checkpoint_size(model: &ModelSpec) -> u64 {
    (model.non_expert_params + model.expert_params_total()) * model.bytes_per_param()
        + model.other_states_bytes
}

/// Size in bytes of a checkpoint holding `k` experts per MoE layer.
pub fn pec_checkpoint_size(model: &ModelSpec, k: u64) -> Result<u64, ValidationError> {
    if k == 0 || k > model.experts_per_layer {
        return Err(ValidationError::KOutOfRange {
            k,
            experts: model.experts_per_layer,
        });
    }
    let expert_params = k * model.expert_params_per_expert * model.num_moe_layers;
    Ok((model.non_expert_params + expert_params) * model.bytes_per_param()
        + model.other_states_bytes)
}

/// Per-rank byte workload of a perfectly balanced full checkpoint.
pub fn ideal_rank_workload(model: &ModelSpec, parallel: &ParallelSpec) -> f64 {
    let p_ne = model.non_expert_params as f64;
    let p_e = model.expert_params_total() as f64;
    let (bw, bo) = (model.bytes_weight as f64, model.bytes_optim as f64);
    let (dp, ep) = (parallel.dp_degree as f64, parallel.ep_degree as f64);
    (p_ne + p_e) * bo / ep + p_ne * bw / dp + p_e * bw / ep
}

/// True when saving `k` experts per layer cannot spread evenly over ranks.
pub fn pec_imbalance(model: &ModelSpec, parallel: &ParallelSpec, k: u64) -> bool {
    let saves = k * model.num_moe_layers;
    let ep = parallel.ep_degree;
    if !saves.is_multiple_of(ep) {
        return true;
    }
    !(saves / ep).is_multiple_of(parallel.ep_groups())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub unit: UnitId,
    /// Store key; carries a `.part<i>` suffix when the unit is split.
    pub key: String,
    pub start: u64,
    pub end: u64,
}

impl Assignment {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// The expert this assignment belongs to, if any.
    pub fn expert(&self, layout: &RankLayout) -> Option<ExpertId> {
        layout.unit(self.unit).kind.expert()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub index: u64,
    /// Experts due at this phase, per layer, ascending.
    pub selection: Vec<Vec<usize>>,
    /// Ranges each rank writes.
    pub assignments: Vec<Vec<Assignment>>,
    pub workload_bytes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub strategy: Strategy,
    pub k: u64,
    pub phases: Vec<Phase>,
}

impl ShardPlan {
    pub fn period(&self) -> u64 {
        self.phases.len() as u64
    }

    /// Phase used by checkpoint `c`.
    pub fn phase(&self, c: u64) -> &Phase {
        &self.phases[(c % self.period()) as usize]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans always serialize")
    }
}

/// Rank with the largest workload at `phase`; ties go to the lowest rank.
pub fn bottleneck_workload(plan: &ShardPlan, phase: u64) -> (Rank, u64) {
    bottleneck_of(&plan.phase(phase).workload_bytes)
}

pub fn bottleneck_of(workloads: &[u64]) -> (Rank, u64) {
    let mut best = (0, 0);
    for (r, &w) in workloads.iter().enumerate() {
        if w > best.1 {
            best = (r, w);
        }
    }
    best
}

/// Units due at a phase with the given per-layer expert selection.
pub fn due_units(layout: &RankLayout, selection: &[Vec<usize>]) -> Vec<UnitId> {
    let mut due: Vec<UnitId> = layout.non_expert_units().collect();
    for (layer, experts) in selection.iter().enumerate() {
        for &e in experts {
            let id = ExpertId::new(layer, e);
            due.push(layout.expert_weight_unit(id));
            due.push(layout.expert_optim_unit(id));
        }
    }
    due.sort_unstable();
    due
}

fn whole(layout: &RankLayout, unit: UnitId) -> Assignment {
    let u = layout.unit(unit);
    Assignment {
        unit,
        key: u.kind.key(),
        start: 0,
        end: u.size_bytes,
    }
}

/// Expert-state ranges for a per-layer selection, appended to `out`.
///
/// With `split`, each expert weight is cut into one contiguous range per EP
/// group replica; otherwise the EP group 0 host writes it whole. Expert
/// optimizer state has a single replica and is always written whole.
pub fn assign_experts(
    layout: &RankLayout,
    selection: &[Vec<usize>],
    split: bool,
    out: &mut [Vec<Assignment>],
) {
    let groups = layout.ep_groups() as u64;
    for (layer, experts) in selection.iter().enumerate() {
        for &e in experts {
            let id = ExpertId::new(layer, e);
            let ew = layout.expert_weight_unit(id);
            let unit = layout.unit(ew);
            if split && groups > 1 {
                let ranges = split_ranges(unit.size_bytes, groups);
                for (g, (start, end)) in ranges.into_iter().enumerate() {
                    if start == end {
                        continue;
                    }
                    out[layout.host_rank(g, e)].push(Assignment {
                        unit: ew,
                        key: format!("{}.part{g}", unit.kind.key()),
                        start,
                        end,
                    });
                }
            } else {
                out[layout.host_rank(0, e)].push(whole(layout, ew));
            }
            let eo = layout.expert_optim_unit(id);
            out[layout.host_rank(0, e)].push(whole(layout, eo));
        }
    }
}

fn own_shards(layout: &RankLayout, out: &mut [Vec<Assignment>]) {
    for &id in layout
        .non_expert_optim_units()
        .iter()
        .chain(layout.other_units())
    {
        let unit = layout.unit(id);
        if unit.size_bytes > 0 {
            out[unit.replica_ranks[0]].push(whole(layout, id));
        }
    }
}

/// Module units sorted by descending size, ties by declaration order.
fn modules_descending(layout: &RankLayout) -> Vec<UnitId> {
    let mut modules = layout.non_expert_weight_units().to_vec();
    modules.sort_by(|&a, &b| {
        layout
            .unit(b)
            .size_bytes
            .cmp(&layout.unit(a).size_bytes)
            .then(a.cmp(&b))
    });
    modules
}

fn loads(assignments: &[Vec<Assignment>]) -> Vec<u64> {
    assignments
        .iter()
        .map(|a| a.iter().map(Assignment::len).sum())
        .collect()
}

fn round_robin_modules(layout: &RankLayout, out: &mut [Vec<Assignment>]) {
    let d = out.len();
    for (i, id) in modules_descending(layout).into_iter().enumerate() {
        out[i % d].push(whole(layout, id));
    }
}

fn greedy_modules(layout: &RankLayout, out: &mut [Vec<Assignment>]) {
    let mut load = loads(out);
    for id in modules_descending(layout) {
        let (r, _) = load
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("at least one rank");
        load[r] += layout.unit(id).size_bytes;
        out[r].push(whole(layout, id));
    }
}

/// Per-rank assignments for one checkpoint of `strategy` with the given
/// per-layer expert selection.
pub fn assign_checkpoint(
    layout: &RankLayout,
    strategy: Strategy,
    selection: &[Vec<usize>],
) -> Vec<Vec<Assignment>> {
    let d = layout.num_ranks();
    let mut out = vec![Vec::new(); d];
    match strategy {
        Strategy::Baseline => {
            for &id in layout.non_expert_weight_units() {
                out[0].push(whole(layout, id));
            }
            assign_experts(layout, selection, false, &mut out);
            own_shards(layout, &mut out);
        }
        Strategy::EqualShardedFull | Strategy::EqualShardedPec => {
            assign_experts(layout, selection, true, &mut out);
            own_shards(layout, &mut out);
            round_robin_modules(layout, &mut out);
        }
        Strategy::AdaptivePec => {
            assign_experts(layout, selection, true, &mut out);
            own_shards(layout, &mut out);
            let mut greedy = out.clone();
            greedy_modules(layout, &mut greedy);
            round_robin_modules(layout, &mut out);
            // List scheduling can lose to round-robin on some preload
            // patterns; keep whichever has the lower bottleneck.
            if bottleneck_of(&loads(&greedy)).1 <= bottleneck_of(&loads(&out)).1 {
                out = greedy;
            }
        }
    }
    for rank in &mut out {
        rank.sort_by(|a, b| a.unit.cmp(&b.unit).then(a.start.cmp(&b.start)));
    }
    out
}

fn build_plan(layout: &RankLayout, strategy: Strategy, schedule: &SelectionSchedule) -> ShardPlan {
    let phases = (0..schedule.period())
        .map(|c| {
            let mut selection = schedule.selected_all(c);
            for s in &mut selection {
                s.sort_unstable();
            }
            let assignments = assign_checkpoint(layout, strategy, &selection);
            Phase {
                index: c,
                workload_bytes: loads(&assignments),
                selection,
                assignments,
            }
        })
        .collect();
    ShardPlan {
        strategy,
        k: schedule.k as u64,
        phases,
    }
}

fn full_schedule(layout: &RankLayout) -> SelectionSchedule {
    SelectionSchedule::new(layout.num_experts(), layout.num_experts(), layout.num_layers())
}

pub fn plan_baseline(layout: &RankLayout) -> ShardPlan {
    build_plan(layout, Strategy::Baseline, &full_schedule(layout))
}

/// Equal sharding; full saves when `pec` is `None`.
pub fn plan_equal(layout: &RankLayout, pec: Option<&PecConfig>) -> ShardPlan {
    match pec {
        None => build_plan(layout, Strategy::EqualShardedFull, &full_schedule(layout)),
        Some(p) => build_plan(
            layout,
            Strategy::EqualShardedPec,
            &SelectionSchedule::new(layout.num_experts(), p.k_snapshot as usize, layout.num_layers()),
        ),
    }
}

pub fn plan_adaptive(layout: &RankLayout, schedule: &SelectionSchedule) -> ShardPlan {
    build_plan(layout, Strategy::AdaptivePec, schedule)
}

/// Plan for `strategy` saving `k` experts per layer (ignored by the full
/// strategies).
pub fn plan_for(layout: &RankLayout, strategy: Strategy, k: u64) -> ShardPlan {
    let schedule = || SelectionSchedule::new(layout.num_experts(), k as usize, layout.num_layers());
    match strategy {
        Strategy::Baseline => plan_baseline(layout),
        Strategy::EqualShardedFull => plan_equal(layout, None),
        Strategy::EqualShardedPec => build_plan(layout, strategy, &schedule()),
        Strategy::AdaptivePec => plan_adaptive(layout, &schedule()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoverageError {
    #[error("phase {phase}: unit {key} is due but has uncovered bytes")]
    Gap { phase: u64, key: String },
    #[error("phase {phase}: unit {key} has overlapping ranges")]
    Overlap { phase: u64, key: String },
    #[error("phase {phase}: unit {key} is assigned but not due")]
    NotDue { phase: u64, key: String },
    #[error("phase {phase}: rank {rank} workload does not match its ranges")]
    Workload { phase: u64, rank: Rank },
}

/// Checks that every phase covers each due unit exactly once, byte for byte.
pub fn verify_coverage(layout: &RankLayout, plan: &ShardPlan) -> Result<(), CoverageError> {
    for phase in &plan.phases {
        let p = phase.index;
        for (rank, a) in phase.assignments.iter().enumerate() {
            if a.iter().map(Assignment::len).sum::<u64>() != phase.workload_bytes[rank] {
                return Err(CoverageError::Workload { phase: p, rank });
            }
        }
        let mut ranges: BTreeMap<UnitId, Vec<(u64, u64)>> = BTreeMap::new();
        for a in phase.assignments.iter().flatten() {
            ranges.entry(a.unit).or_default().push((a.start, a.end));
        }
        for id in due_units(layout, &phase.selection) {
            let unit = layout.unit(id);
            let key = unit.kind.key();
            let mut rs = ranges.remove(&id).unwrap_or_default();
            rs.sort_unstable();
            let mut cursor = 0;
            for (start, end) in rs {
                if start < cursor {
                    return Err(CoverageError::Overlap { phase: p, key });
                }
                if start > cursor {
                    return Err(CoverageError::Gap { phase: p, key });
                }
                cursor = end;
            }
            if cursor != unit.size_bytes {
                return Err(CoverageError::Gap { phase: p, key });
            }
        }
        if let Some((&id, _)) = ranges.iter().next() {
            return Err(CoverageError::NotDue {
                phase: p,
                key: layout.unit(id).kind.key(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::fixtures::{cluster, layout, model};
    use crate::topology::build_layout;

    fn sized_model() -> ModelSpec {
        let mut m = model(1, 4, &[60, 40]);
        m.expert_params_per_expert = 75;
        m
    }

    #[test]
    fn full_size_direct() {
        let m = sized_model();
        assert_eq!(m.expert_params_total(), 300);
        assert_eq!(full_checkpoint_size(&m), 5600);
        assert_eq!(pec_checkpoint_size(&m, 1).unwrap(), 2450);
        assert_eq!(pec_checkpoint_size(&m, 4).unwrap(), 5600);
        assert!(pec_checkpoint_size(&m, 5).is_err());
        assert!(pec_checkpoint_size(&m, 0).is_err());
    }

    #[test]
    fn ideal_workload_direct() {
        let m = sized_model();
        assert_eq!(ideal_rank_workload(&m, &ParallelSpec::new(4, 2)), 2750.0);
        assert_eq!(
            ideal_rank_workload(&m, &ParallelSpec::new(1, 1)),
            full_checkpoint_size(&m) as f64
        );
    }

    #[test]
    fn imbalance_examples() {
        let m = model(4, 3, &[10]);
        assert!(pec_imbalance(&m, &ParallelSpec::new(3, 3), 1));
        let m = model(4, 4, &[10]);
        assert!(!pec_imbalance(&m, &ParallelSpec::new(4, 4), 2));
    }

    #[test]
    fn baseline_places_weights_on_rank_zero() {
        let l = layout(2, 4, 4, 2, &[30, 20, 10]);
        let plan = plan_baseline(&l);
        verify_coverage(&l, &plan).unwrap();
        let ph = plan.phase(0);
        for (r, a) in ph.assignments.iter().enumerate() {
            let has_new = a.iter().any(|x| x.key.starts_with("new."));
            assert_eq!(has_new, r == 0);
            let has_ew = a.iter().any(|x| x.key.starts_with("ew."));
            assert_eq!(has_ew, l.rank_info[r].ep_group == 0);
        }
        assert_eq!(bottleneck_workload(&plan, 0).0, 0);
    }

    #[test]
    fn equal_splits_expert_in_halves() {
        let mut m = model(1, 2, &[10]);
        m.expert_params_per_expert = 50;
        let l = build_layout(&m, &ParallelSpec::new(4, 2), &cluster(4, 1)).unwrap();
        let plan = plan_equal(&l, None);
        verify_coverage(&l, &plan).unwrap();
        let ew0: Vec<(Rank, u64)> = plan.phases[0]
            .assignments
            .iter()
            .enumerate()
            .flat_map(|(r, a)| {
                a.iter()
                    .filter(|x| x.key.starts_with("ew.L0.E0"))
                    .map(move |x| (r, x.len()))
            })
            .collect();
        assert_eq!(ew0, vec![(0, 50), (2, 50)]);
    }

    #[test]
    fn single_rank_gets_everything() {
        let l = layout(2, 2, 1, 1, &[5, 6]);
        for plan in [plan_baseline(&l), plan_equal(&l, None)] {
            verify_coverage(&l, &plan).unwrap();
            assert_eq!(plan.phases[0].workload_bytes, vec![l.total_bytes()]);
        }
    }

    #[test]
    fn adaptive_unloads_preloaded_rank() {
        // Three ranks, four layers, one expert per layer per checkpoint:
        // rank 0 saves two experts at phase 0.
        let l = layout(4, 3, 3, 3, &[100, 100, 100, 100, 100, 100]);
        let sched = SelectionSchedule::new(3, 1, 4);
        let plan = plan_adaptive(&l, &sched);
        verify_coverage(&l, &plan).unwrap();
        let ph = plan.phase(0);
        let ne = |r: usize| -> u64 {
            ph.assignments[r]
                .iter()
                .filter(|a| a.key.starts_with("new."))
                .map(Assignment::len)
                .sum()
        };
        assert!(ne(0) < ne(1) && ne(0) < ne(2));
    }

    #[test]
    fn pec_plan_period_and_keys() {
        let l = layout(2, 4, 4, 2, &[30, 20]);
        let plan = plan_for(&l, Strategy::EqualShardedPec, 1);
        assert_eq!(plan.period(), 4);
        verify_coverage(&l, &plan).unwrap();
        let keys: std::collections::BTreeSet<String> = plan
            .phases
            .iter()
            .flat_map(|p| p.assignments.iter().flatten())
            .map(|a| l.unit(a.unit).kind.key())
            .collect();
        let all: std::collections::BTreeSet<String> =
            l.units.iter().filter(|u| u.size_bytes > 0).map(|u| u.kind.key()).collect();
        assert_eq!(keys, all);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn pec_defaults_tiers_to_k() {
        let p: PecConfig = serde_json::from_str(r#"{"k_pec": 2}"#).unwrap();
        assert_eq!(p, PecConfig::uniform(2, Selection::Sequential));
        let back: PecConfig = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
