//! Model, parallel deployment and cluster descriptions, and the placement of
//! every saveable piece of model state across data-parallel ranks.
//!
//! Ranks in a [`RankLayout`] are data-parallel ranks. Tensor and pipeline
//! parallel degrees only multiply the GPU count behind each rank; state units
//! are never split along those axes.
//!
//! Experts are placed round-robin over the EP ranks of every EP group: expert
//! `e` of every MoE layer lives at `ep_rank = e mod ep_degree`. With this rule
//! consecutive expert indices land on consecutive EP ranks, which is what lets
//! the sequential selection schedule spread its saves evenly.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

pub type Rank = usize;
pub type NodeId = usize;

/// A named non-expert module (an attention block, a dense FFN, embeddings...).
/// These are the smallest partition units for non-expert weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonExpertModule {
    pub name: String,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_moe_layers: u64,
    pub experts_per_layer: u64,
    pub top_k: u64,
    pub non_expert_params: u64,
    pub expert_params_per_expert: u64,
    pub bytes_weight: u64,
    pub bytes_optim: u64,
    /// Total bytes of iteration counters, RNG states and similar; split over ranks.
    #[serde(default)]
    pub other_states_bytes: u64,
    pub non_expert_modules: Vec<NonExpertModule>,
}

impl ModelSpec {
    /// Total expert parameters across all MoE layers.
    pub fn expert_params_total(&self) -> u64 {
        self.expert_params_per_expert * self.experts_per_layer * self.num_moe_layers
    }

    pub fn expert_weight_bytes(&self) -> u64 {
        self.expert_params_per_expert * self.bytes_weight
    }

    pub fn expert_optim_bytes(&self) -> u64 {
        self.expert_params_per_expert * self.bytes_optim
    }

    pub fn bytes_per_param(&self) -> u64 {
        self.bytes_weight + self.bytes_optim
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let positive = [
            ("model.num_moe_layers", self.num_moe_layers),
            ("model.experts_per_layer", self.experts_per_layer),
            ("model.top_k", self.top_k),
            ("model.non_expert_params", self.non_expert_params),
            ("model.expert_params_per_expert", self.expert_params_per_expert),
            ("model.bytes_weight", self.bytes_weight),
            ("model.bytes_optim", self.bytes_optim),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ValidationError::Zero { field });
            }
        }
        if self.top_k > self.experts_per_layer {
            return Err(ValidationError::TopKExceedsExperts {
                top_k: self.top_k,
                experts: self.experts_per_layer,
            });
        }
        if self.non_expert_modules.is_empty() {
            return Err(ValidationError::NoModules);
        }
        let mut seen = BTreeSet::new();
        for module in &self.non_expert_modules {
            if module.name.is_empty()
                || !module
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(ValidationError::BadModuleName(module.name.clone()));
            }
            if !seen.insert(module.name.as_str()) {
                return Err(ValidationError::DuplicateModule(module.name.clone()));
            }
            if module.params == 0 {
                return Err(ValidationError::Zero {
                    field: "model.non_expert_modules[].params",
                });
            }
        }
        let sum: u64 = self.non_expert_modules.iter().map(|m| m.params).sum();
        if sum != self.non_expert_params {
            return Err(ValidationError::ModuleSumMismatch {
                sum,
                expected: self.non_expert_params,
            });
        }
        Ok(())
    }
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelSpec {
    pub dp_degree: u64,
    pub ep_degree: u64,
    #[serde(default = "one")]
    pub tp_degree: u64,
    #[serde(default = "one")]
    pub pp_degree: u64,
}

impl ParallelSpec {
    pub fn new(dp_degree: u64, ep_degree: u64) -> Self {
        ParallelSpec {
            dp_degree,
            ep_degree,
            tp_degree: 1,
            pp_degree: 1,
        }
    }

    /// Number of EP groups, each holding one full copy of every expert.
    pub fn ep_groups(&self) -> u64 {
        self.dp_degree / self.ep_degree
    }

    pub fn gpus_per_rank(&self) -> u64 {
        self.tp_degree * self.pp_degree
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<(), ValidationError> {
        for (field, value) in [
            ("parallel.dp_degree", self.dp_degree),
            ("parallel.ep_degree", self.ep_degree),
            ("parallel.tp_degree", self.tp_degree),
            ("parallel.pp_degree", self.pp_degree),
        ] {
            if value == 0 {
                return Err(ValidationError::Zero { field });
            }
        }
        if !self.dp_degree.is_multiple_of(self.ep_degree) {
            return Err(ValidationError::DpNotDivisibleByEp {
                dp: self.dp_degree,
                ep: self.ep_degree,
            });
        }
        if !model.experts_per_layer.is_multiple_of(self.ep_degree) {
            return Err(ValidationError::ExpertsNotDivisibleByEp {
                experts: model.experts_per_layer,
                ep: self.ep_degree,
            });
        }
        let optim = model.non_expert_params * model.bytes_optim;
        if optim < self.dp_degree {
            return Err(ValidationError::OptimShardTooSmall {
                bytes: optim,
                dp: self.dp_degree,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: u64,
    pub gpus_per_node: u64,
    /// GPU to host copy bandwidth per rank, bytes per second.
    pub snapshot_bandwidth: f64,
    /// Host to durable storage bandwidth per rank, bytes per second.
    pub persist_bandwidth: f64,
    /// Forward and backward time of one iteration, seconds.
    pub fb_time: f64,
    pub update_time: f64,
    pub restart_time: f64,
    /// Faults per iteration; 0 when faults are scripted.
    #[serde(default)]
    pub failure_rate: f64,
}

impl ClusterSpec {
    pub fn validate(&self, parallel: &ParallelSpec) -> Result<(), ValidationError> {
        if self.num_nodes == 0 {
            return Err(ValidationError::Zero {
                field: "cluster.num_nodes",
            });
        }
        if self.gpus_per_node == 0 {
            return Err(ValidationError::Zero {
                field: "cluster.gpus_per_node",
            });
        }
        let gpus = self.num_nodes * self.gpus_per_node;
        let ranks = parallel.dp_degree * parallel.gpus_per_rank();
        if gpus != ranks {
            return Err(ValidationError::GpuCountMismatch { gpus, ranks });
        }
        for (field, value) in [
            ("cluster.snapshot_bandwidth", self.snapshot_bandwidth),
            ("cluster.persist_bandwidth", self.persist_bandwidth),
            ("cluster.fb_time", self.fb_time),
            ("cluster.update_time", self.update_time),
            ("cluster.restart_time", self.restart_time),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ValidationError::NotPositive { field, value });
            }
        }
        if !(self.failure_rate.is_finite() && (0.0..1.0).contains(&self.failure_rate)) {
            return Err(ValidationError::FailureRate(self.failure_rate));
        }
        Ok(())
    }
}

/// Validates the three descriptions together.
pub fn validate_specs(
    model: &ModelSpec,
    parallel: &ParallelSpec,
    cluster: &ClusterSpec,
) -> Result<(), ValidationError> {
    model.validate()?;
    parallel.validate(model)?;
    cluster.validate(parallel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertId {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertId {
    pub fn new(layer: usize, expert: usize) -> Self {
        ExpertId { layer, expert }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitKind {
    ExpertWeight { layer: usize, expert: usize },
    ExpertOptim { layer: usize, expert: usize },
    NonExpertWeight { module: String },
    NonExpertOptimShard { dp_rank: Rank },
    OtherStates { rank: Rank },
}

impl UnitKind {
    /// Store key of the unit: `ew.L<l>.E<e>`, `eo.L<l>.E<e>`, `new.<module>`,
    /// `neo.r<rank>` or `other.r<rank>`.
    pub fn key(&self) -> String {
        match self {
            UnitKind::ExpertWeight { layer, expert } => format!("ew.L{layer}.E{expert}"),
            UnitKind::ExpertOptim { layer, expert } => format!("eo.L{layer}.E{expert}"),
            UnitKind::NonExpertWeight { module } => format!("new.{module}"),
            UnitKind::NonExpertOptimShard { dp_rank } => format!("neo.r{dp_rank}"),
            UnitKind::OtherStates { rank } => format!("other.r{rank}"),
        }
    }

    pub fn expert(&self) -> Option<ExpertId> {
        match *self {
            UnitKind::ExpertWeight { layer, expert } | UnitKind::ExpertOptim { layer, expert } => {
                Some(ExpertId { layer, expert })
            }
            _ => None,
        }
    }

    pub fn is_expert(&self) -> bool {
        self.expert().is_some()
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUnit {
    pub id: UnitId,
    pub kind: UnitKind,
    pub size_bytes: u64,
    /// Ranks holding a live copy, ascending.
    pub replica_ranks: Vec<Rank>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: Rank,
    /// Node of the rank's first GPU.
    pub node: NodeId,
    /// Every node the rank's GPUs live on (more than one only when a rank's
    /// TP x PP GPUs straddle a node boundary).
    pub nodes: Vec<NodeId>,
    pub dp_rank: Rank,
    pub ep_group: usize,
    pub ep_rank: usize,
}

/// Byte sizes of each class of state unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSizes {
    pub expert_weight: u64,
    pub expert_optim: u64,
    pub non_expert_weight: Vec<(String, u64)>,
    pub non_expert_optim_shards: Vec<u64>,
    pub other_states: Vec<u64>,
}

/// Splits `total` into `parts` sizes that differ by at most one; the leading
/// `total mod parts` shares are rounded up. Sums to `total` exactly.
pub fn split_balanced(total: u64, parts: u64) -> Vec<u64> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + u64::from(i < extra)).collect()
}

/// Splits `[0, total)` into `parts` contiguous ranges of `total / parts`
/// bytes; the last range absorbs the remainder.
pub fn split_ranges(total: u64, parts: u64) -> Vec<(u64, u64)> {
    let base = total / parts;
    (0..parts)
        .map(|i| {
            let start = i * base;
            let end = if i + 1 == parts { total } else { start + base };
            (start, end)
        })
        .collect()
}

pub fn unit_sizes(model: &ModelSpec, parallel: &ParallelSpec) -> UnitSizes {
    UnitSizes {
        expert_weight: model.expert_weight_bytes(),
        expert_optim: model.expert_optim_bytes(),
        non_expert_weight: model
            .non_expert_modules
            .iter()
            .map(|m| (m.name.clone(), m.params * model.bytes_weight))
            .collect(),
        non_expert_optim_shards: split_balanced(
            model.non_expert_params * model.bytes_optim,
            parallel.dp_degree,
        ),
        other_states: split_balanced(model.other_states_bytes, parallel.dp_degree),
    }
}

/// Placement of every state unit for one deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankLayout {
    pub model: ModelSpec,
    pub parallel: ParallelSpec,
    pub num_nodes: usize,
    pub rank_info: Vec<RankInfo>,
    pub hosted_experts: Vec<Vec<ExpertId>>,
    pub units: Vec<StateUnit>,
    expert_weight_ids: Vec<UnitId>,
    expert_optim_ids: Vec<UnitId>,
    non_expert_weight_ids: Vec<UnitId>,
    non_expert_optim_ids: Vec<UnitId>,
    other_ids: Vec<UnitId>,
}

impl RankLayout {
    pub fn num_ranks(&self) -> usize {
        self.rank_info.len()
    }

    pub fn num_layers(&self) -> usize {
        self.model.num_moe_layers as usize
    }

    pub fn num_experts(&self) -> usize {
        self.model.experts_per_layer as usize
    }

    pub fn ep_degree(&self) -> usize {
        self.parallel.ep_degree as usize
    }

    pub fn ep_groups(&self) -> usize {
        self.parallel.ep_groups() as usize
    }

    pub fn unit(&self, id: UnitId) -> &StateUnit {
        &self.units[id.0]
    }

    pub fn ep_rank_of_expert(&self, expert: usize) -> usize {
        expert % self.ep_degree()
    }

    /// The rank hosting `expert` inside EP group `group`.
    pub fn host_rank(&self, group: usize, expert: usize) -> Rank {
        group * self.ep_degree() + self.ep_rank_of_expert(expert)
    }

    pub fn expert_weight_unit(&self, id: ExpertId) -> UnitId {
        self.expert_weight_ids[id.layer * self.num_experts() + id.expert]
    }

    pub fn expert_optim_unit(&self, id: ExpertId) -> UnitId {
        self.expert_optim_ids[id.layer * self.num_experts() + id.expert]
    }

    pub fn non_expert_weight_units(&self) -> &[UnitId] {
        &self.non_expert_weight_ids
    }

    pub fn non_expert_optim_units(&self) -> &[UnitId] {
        &self.non_expert_optim_ids
    }

    pub fn other_units(&self) -> &[UnitId] {
        &self.other_ids
    }

    /// Units that are not expert state: module weights, optimizer shards and
    /// other states.
    pub fn non_expert_units(&self) -> impl Iterator<Item = UnitId> + '_ {
        self.non_expert_weight_ids
            .iter()
            .chain(&self.non_expert_optim_ids)
            .chain(&self.other_ids)
            .copied()
    }

    pub fn experts(&self) -> impl Iterator<Item = ExpertId> + '_ {
        let n = self.num_experts();
        (0..self.num_layers()).flat_map(move |l| (0..n).map(move |e| ExpertId::new(l, e)))
    }

    /// True when any node hosting part of `rank` is in `failed`.
    pub fn rank_failed(&self, rank: Rank, failed: &BTreeSet<NodeId>) -> bool {
        self.rank_info[rank].nodes.iter().any(|n| failed.contains(n))
    }

    /// Sum of one copy of every unit.
    pub fn total_bytes(&self) -> u64 {
        self.units.iter().map(|u| u.size_bytes).sum()
    }
}

/// Derives the placement of every state unit.
///
/// Expert weights are replicated once per EP group. Expert optimizer state is
/// a single replica owned by the EP group 0 host. Non-expert weights are
/// replicated on all ranks and their optimizer state is partitioned, one shard
/// per rank.
pub fn build_layout(
    model: &ModelSpec,
    parallel: &ParallelSpec,
    cluster: &ClusterSpec,
) -> Result<RankLayout, ValidationError> {
    validate_specs(model, parallel, cluster)?;

    let dp = parallel.dp_degree as usize;
    let ep = parallel.ep_degree as usize;
    let groups = dp / ep;
    let gpus_per_rank = parallel.gpus_per_rank() as usize;
    let gpus_per_node = cluster.gpus_per_node as usize;
    let n_layers = model.num_moe_layers as usize;
    let n_experts = model.experts_per_layer as usize;

    let rank_info: Vec<RankInfo> = (0..dp)
        .map(|rank| {
            let first = rank * gpus_per_rank;
            let mut nodes: Vec<NodeId> = (first..first + gpus_per_rank)
                .map(|gpu| gpu / gpus_per_node)
                .collect();
            nodes.dedup();
            RankInfo {
                rank,
                node: nodes[0],
                nodes,
                dp_rank: rank,
                ep_group: rank / ep,
                ep_rank: rank % ep,
            }
        })
        .collect();

    let hosted_experts: Vec<Vec<ExpertId>> = rank_info
        .iter()
        .map(|info| {
            (0..n_layers)
                .flat_map(|l| {
                    (0..n_experts)
                        .filter(move |e| e % ep == info.ep_rank)
                        .map(move |e| ExpertId::new(l, e))
                })
                .collect()
        })
        .collect();

    let sizes = unit_sizes(model, parallel);
    let mut units = Vec::new();
    let mut push = |kind: UnitKind, size_bytes: u64, replica_ranks: Vec<Rank>| {
        let id = UnitId(units.len());
        units.push(StateUnit {
            id,
            kind,
            size_bytes,
            replica_ranks,
        });
        id
    };

    let mut expert_weight_ids = Vec::with_capacity(n_layers * n_experts);
    let mut expert_optim_ids = Vec::with_capacity(n_layers * n_experts);
    for layer in 0..n_layers {
        for expert in 0..n_experts {
            let replicas = (0..groups).map(|g| g * ep + expert % ep).collect();
            expert_weight_ids.push(push(
                UnitKind::ExpertWeight { layer, expert },
                sizes.expert_weight,
                replicas,
            ));
        }
    }
    for layer in 0..n_layers {
        for expert in 0..n_experts {
            expert_optim_ids.push(push(
                UnitKind::ExpertOptim { layer, expert },
                sizes.expert_optim,
                vec![expert % ep],
            ));
        }
    }
    let non_expert_weight_ids = sizes
        .non_expert_weight
        .iter()
        .map(|(name, bytes)| {
            push(
                UnitKind::NonExpertWeight {
                    module: name.clone(),
                },
                *bytes,
                (0..dp).collect(),
            )
        })
        .collect();
    let non_expert_optim_ids = sizes
        .non_expert_optim_shards
        .iter()
        .enumerate()
        .map(|(r, bytes)| push(UnitKind::NonExpertOptimShard { dp_rank: r }, *bytes, vec![r]))
        .collect();
    let other_ids = sizes
        .other_states
        .iter()
        .enumerate()
        .map(|(r, bytes)| push(UnitKind::OtherStates { rank: r }, *bytes, vec![r]))
        .collect();

    Ok(RankLayout {
        model: model.clone(),
        parallel: *parallel,
        num_nodes: cluster.num_nodes as usize,
        rank_info,
        hosted_experts,
        units,
        expert_weight_ids,
        expert_optim_ids,
        non_expert_weight_ids,
        non_expert_optim_ids,
        other_ids,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn model(layers: u64, experts: u64, modules: &[u64]) -> ModelSpec {
        ModelSpec {
            num_moe_layers: layers,
            experts_per_layer: experts,
            top_k: 1,
            non_expert_params: modules.iter().sum(),
            expert_params_per_expert: 25,
            bytes_weight: 2,
            bytes_optim: 12,
            other_states_bytes: 0,
            non_expert_modules: modules
                .iter()
                .enumerate()
                .map(|(i, &params)| NonExpertModule {
                    name: format!("m{i}"),
                    params,
                })
                .collect(),
        }
    }

    pub fn cluster(nodes: u64, gpus_per_node: u64) -> ClusterSpec {
        ClusterSpec {
            num_nodes: nodes,
            gpus_per_node,
            snapshot_bandwidth: 1e6,
            persist_bandwidth: 1e5,
            fb_time: 1.0,
            update_time: 0.1,
            restart_time: 5.0,
            failure_rate: 0.0,
        }
    }

    pub fn layout(layers: u64, experts: u64, dp: u64, ep: u64, modules: &[u64]) -> RankLayout {
        build_layout(
            &model(layers, experts, modules),
            &ParallelSpec::new(dp, ep),
            &cluster(dp, 1),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn single_ep_group_hosts_one_expert_per_rank() {
        let l = layout(4, 3, 3, 3, &[10, 10]);
        assert_eq!(
            l.hosted_experts[0],
            (0..4).map(|layer| ExpertId::new(layer, 0)).collect::<Vec<_>>()
        );
        assert_eq!(l.hosted_experts[1][0], ExpertId::new(0, 1));
        assert_eq!(l.hosted_experts[2][3], ExpertId::new(3, 2));
    }

    #[test]
    fn degenerate_single_rank_holds_everything() {
        let l = layout(2, 1, 1, 1, &[7]);
        assert_eq!(l.num_ranks(), 1);
        assert!(l.units.iter().all(|u| u.replica_ranks == vec![0]));
    }

    #[test]
    fn two_ep_groups_replicate_each_expert_twice() {
        let l = layout(3, 16, 16, 8, &[10]);
        let target = ExpertId::new(1, 5);
        let hosts: Vec<Rank> = (0..16)
            .filter(|&r| l.hosted_experts[r].contains(&target))
            .collect();
        assert_eq!(hosts, vec![5, 13]);
        assert_eq!(l.unit(l.expert_weight_unit(target)).replica_ranks, hosts);
        assert_ne!(l.rank_info[5].ep_group, l.rank_info[13].ep_group);
    }

    #[test]
    fn optimizer_shards_split_exactly() {
        let m = model(1, 4, &[100]);
        let s = unit_sizes(&m, &ParallelSpec::new(4, 2));
        assert_eq!(s.non_expert_optim_shards, vec![300; 4]);
        assert_eq!(s.expert_weight, 50);

        let m = model(1, 4, &[101]);
        let s = unit_sizes(&m, &ParallelSpec::new(4, 2));
        assert_eq!(s.non_expert_optim_shards, vec![303; 4]);
        assert_eq!(s.non_expert_optim_shards.iter().sum::<u64>(), 1212);

        let m = model(1, 4, &[1]);
        let s = unit_sizes(&m, &ParallelSpec::new(5, 1));
        assert_eq!(s.non_expert_optim_shards, vec![3, 3, 2, 2, 2]);
    }

    #[test]
    fn ranges_give_remainder_to_last() {
        assert_eq!(split_ranges(100, 2), vec![(0, 50), (50, 100)]);
        assert_eq!(split_ranges(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let m = model(1, 4, &[10]);
        let err = build_layout(&m, &ParallelSpec::new(6, 4), &cluster(6, 1)).unwrap_err();
        assert_eq!(err, ValidationError::DpNotDivisibleByEp { dp: 6, ep: 4 });
        assert!(err.to_string().contains("parallel.dp_degree"));

        let err = build_layout(&m, &ParallelSpec::new(3, 3), &cluster(3, 1)).unwrap_err();
        assert!(matches!(err, ValidationError::ExpertsNotDivisibleByEp { .. }));

        let err = build_layout(&m, &ParallelSpec::new(4, 2), &cluster(3, 1)).unwrap_err();
        assert!(matches!(err, ValidationError::GpuCountMismatch { .. }));
    }

    #[test]
    fn rejects_module_sum_mismatch() {
        let mut m = model(1, 4, &[10, 20]);
        m.non_expert_params = 31;
        assert_eq!(
            m.validate(),
            Err(ValidationError::ModuleSumMismatch {
                sum: 30,
                expected: 31
            })
        );
    }

    #[test]
    fn tensor_parallel_ranks_span_nodes() {
        let m = model(1, 2, &[10]);
        let mut p = ParallelSpec::new(2, 2);
        p.tp_degree = 3;
        let l = build_layout(&m, &p, &cluster(3, 2)).unwrap();
        assert_eq!(l.rank_info[0].nodes, vec![0, 1]);
        assert_eq!(l.rank_info[1].nodes, vec![1, 2]);
        let failed: BTreeSet<NodeId> = [1].into();
        assert!(l.rank_failed(0, &failed) && l.rank_failed(1, &failed));
    }
}
