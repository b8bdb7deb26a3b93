use thiserror::Error;

/// A configuration value that violates one of the structural constraints
/// on model, parallel, cluster or scenario descriptions.
///
/// Every variant names the field (or pair of fields) that failed so the CLI
/// can report it verbatim.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("{field} must be at least 1")]
    Zero { field: &'static str },

    #[error("model.top_k ({top_k}) must not exceed model.experts_per_layer ({experts})")]
    TopKExceedsExperts { top_k: u64, experts: u64 },

    #[error("model.non_expert_modules sum to {sum} parameters but model.non_expert_params is {expected}")]
    ModuleSumMismatch { sum: u64, expected: u64 },

    #[error("model.non_expert_modules must not be empty")]
    NoModules,

    #[error("model.non_expert_modules contains duplicate name {0:?}")]
    DuplicateModule(String),

    #[error("module name {0:?} may only contain ASCII letters, digits, '_' and '-'")]
    BadModuleName(String),

    #[error("parallel.dp_degree ({dp}) must be divisible by parallel.ep_degree ({ep})")]
    DpNotDivisibleByEp { dp: u64, ep: u64 },

    #[error("model.experts_per_layer ({experts}) must be divisible by parallel.ep_degree ({ep})")]
    ExpertsNotDivisibleByEp { experts: u64, ep: u64 },

    #[error(
        "cluster.num_nodes x cluster.gpus_per_node ({gpus}) must equal dp_degree x tp_degree x pp_degree ({ranks})"
    )]
    GpuCountMismatch { gpus: u64, ranks: u64 },

    #[error("{field} must be positive and finite (got {value})")]
    NotPositive { field: &'static str, value: f64 },

    #[error("cluster.failure_rate must lie in [0, 1) (got {0})")]
    FailureRate(f64),

    #[error("model.non_expert_params x model.bytes_optim ({bytes}) must be at least dp_degree ({dp}) so every rank owns optimizer state")]
    OptimShardTooSmall { bytes: u64, dp: u64 },

    #[error("pec: require 1 <= k_persist ({k_persist}) <= k_snapshot ({k_snapshot}) <= experts_per_layer ({experts})")]
    PecOrder {
        k_persist: u64,
        k_snapshot: u64,
        experts: u64,
    },

    #[error("pec.k_pec ({k}) must lie in 1..={experts}")]
    KOutOfRange { k: u64, experts: u64 },

    #[error("i_total ({i_total}) must be at least i_ckpt ({i_ckpt})")]
    TotalBelowInterval { i_total: u64, i_ckpt: u64 },

    #[error("capacity_factor must be positive (got {0})")]
    CapacityFactor(f64),

    #[error("routing.zipf exponent must be finite and non-negative (got {0})")]
    ZipfExponent(f64),

    #[error("routing.scripted must have {layers} rows of {experts} counts")]
    ScriptedShape { layers: u64, experts: u64 },

    #[error("routing.scripted layer {layer} routes {sum} tokens, more than tokens_per_iteration x top_k ({max})")]
    ScriptedOverflow { layer: usize, sum: u64, max: u64 },

    #[error("faults.scripted entry {index}: iteration must lie in 1..=i_total")]
    FaultIteration { index: usize },

    #[error("faults.scripted entry {index}: node {node} does not exist")]
    FaultNode { index: usize, node: u64 },

    #[error("faults.scripted entry {index}: failed node set is empty")]
    FaultEmpty { index: usize },

    #[error("faults.scripted entries must be sorted by iteration")]
    FaultOrder,

    #[error("dynamic_k.threshold must lie in (0, 1) (got {0})")]
    Threshold(f64),
}
