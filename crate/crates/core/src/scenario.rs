//! Scenario description consumed by the simulator and the CLI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::planner::{PecConfig, Strategy};
use crate::selector::{Selection, DEFAULT_PLT_THRESHOLD};
use crate::topology::{validate_specs, ClusterSpec, ModelSpec, ParallelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Training waits for snapshot and persist at every checkpoint.
    Blocking,
    /// Snapshots overlap the next forward/backward pass; persists run in the
    /// background.
    #[default]
    Async,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Routing {
    /// Every expert receives the same share; remainders rotate.
    #[default]
    Uniform,
    /// Expert `j` is picked with weight `1 / (j + 1)^s`.
    Zipf { s: f64 },
    /// Fixed `[layer][expert]` token counts for every iteration.
    Scripted(Vec<Vec<u64>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFault {
    /// The fault strikes after this iteration's update.
    pub iteration: u64,
    pub nodes: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Faults {
    #[default]
    None,
    /// One node fails after any iteration with probability
    /// `cluster.failure_rate`.
    Poisson,
    Scripted(Vec<ScriptedFault>),
}

fn default_threshold() -> f64 {
    DEFAULT_PLT_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicK {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeline_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dump_plan: bool,
    /// When set, every persist is also written to a real store here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_root: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub parallel: ParallelSpec,
    pub cluster: ClusterSpec,
    /// Partial-experts settings; PEC strategies without it save every expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pec: Option<PecConfig>,
    pub strategy: Strategy,
    #[serde(default)]
    pub mode: Mode,
    /// Restore from surviving in-memory snapshots as well as storage.
    #[serde(default = "yes")]
    pub two_level_recovery: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic_k: Option<DynamicK>,
    pub i_ckpt: u64,
    pub i_total: u64,
    #[serde(default)]
    pub routing: Routing,
    pub tokens_per_iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_factor: Option<f64>,
    #[serde(default)]
    pub faults: Faults,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub output: OutputOptions,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios always serialize")
    }

    /// PEC settings in force: the configured ones for PEC strategies, all
    /// experts otherwise.
    pub fn effective_pec(&self) -> PecConfig {
        let n = self.model.experts_per_layer;
        match (&self.pec, self.strategy.is_pec()) {
            (Some(p), true) => p.clone(),
            (Some(p), false) => PecConfig::uniform(n, p.selection),
            (None, _) => PecConfig::uniform(n, Selection::Sequential),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        validate_specs(&self.model, &self.parallel, &self.cluster)?;
        if let Some(p) = &self.pec {
            p.validate(self.model.experts_per_layer)?;
        }
        if self.i_ckpt == 0 {
            return Err(ValidationError::Zero { field: "i_ckpt" });
        }
        if self.i_total < self.i_ckpt {
            return Err(ValidationError::TotalBelowInterval {
                i_total: self.i_total,
                i_ckpt: self.i_ckpt,
            });
        }
        if self.tokens_per_iteration == 0 {
            return Err(ValidationError::Zero {
                field: "tokens_per_iteration",
            });
        }
        if let Some(cf) = self.capacity_factor {
            if !(cf.is_finite() && cf > 0.0) {
                return Err(ValidationError::CapacityFactor(cf));
            }
        }
        match &self.routing {
            Routing::Uniform => {}
            Routing::Zipf { s } => {
                if !(s.is_finite() && *s >= 0.0) {
                    return Err(ValidationError::ZipfExponent(*s));
                }
            }
            Routing::Scripted(rows) => {
                let shape = ValidationError::ScriptedShape {
                    layers: self.model.num_moe_layers,
                    experts: self.model.experts_per_layer,
                };
                if rows.len() as u64 != self.model.num_moe_layers {
                    return Err(shape);
                }
                let max = self.tokens_per_iteration * self.model.top_k;
                for (layer, row) in rows.iter().enumerate() {
                    if row.len() as u64 != self.model.experts_per_layer {
                        return Err(shape);
                    }
                    let sum: u64 = row.iter().sum();
                    if sum > max || row.iter().any(|&c| c > self.tokens_per_iteration) {
                        return Err(ValidationError::ScriptedOverflow { layer, sum, max });
                    }
                }
            }
        }
        if let Faults::Scripted(list) = &self.faults {
            let mut prev = 0;
            for (index, f) in list.iter().enumerate() {
                if f.iteration == 0 || f.iteration > self.i_total {
                    return Err(ValidationError::FaultIteration { index });
                }
                if f.iteration < prev {
                    return Err(ValidationError::FaultOrder);
                }
                prev = f.iteration;
                if f.nodes.is_empty() {
                    return Err(ValidationError::FaultEmpty { index });
                }
                if let Some(&node) = f.nodes.iter().find(|&&n| n >= self.cluster.num_nodes) {
                    return Err(ValidationError::FaultNode { index, node });
                }
            }
        }
        if let Some(d) = &self.dynamic_k {
            if !(d.threshold > 0.0 && d.threshold < 1.0) {
                return Err(ValidationError::Threshold(d.threshold));
            }
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::small;
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut s = small();
        s.routing = Routing::Zipf { s: 1.2 };
        s.faults = Faults::Scripted(vec![ScriptedFault {
            iteration: 35,
            nodes: vec![1],
        }]);
        s.dynamic_k = Some(DynamicK { threshold: 0.02 });
        let text = s.to_json();
        let back = Scenario::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(Scenario::from_json(&back.to_json()).unwrap(), back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&small().to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(Scenario::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&small().to_json()).unwrap();
        v["cluster"]["bogus"] = serde_json::json!(1);
        assert!(Scenario::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let mut s = small();
        s.i_total = 5;
        assert!(s.validate().unwrap_err().to_string().contains("i_total"));
        let mut s = small();
        s.faults = Faults::Scripted(vec![ScriptedFault {
            iteration: 3,
            nodes: vec![9],
        }]);
        assert_eq!(
            s.validate(),
            Err(ValidationError::FaultNode { index: 0, node: 9 })
        );
        let mut s = small();
        s.pec = Some(PecConfig {
            k_pec: 1,
            selection: Selection::Sequential,
            k_snapshot: 1,
            k_persist: 2,
        });
        assert!(matches!(s.validate(), Err(ValidationError::PecOrder { .. })));
        assert!(small().validate().is_ok());
    }
}
