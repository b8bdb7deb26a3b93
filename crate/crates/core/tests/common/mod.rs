//! Shared fixtures and the brute-force token ledger used by the integration
//! tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use moc_core::simulator::route_tokens;
use moc_core::{
    ClusterSpec, Faults, Mode, ModelSpec, NonExpertModule, ParallelSpec, PecConfig, Routing,
    Scenario, ScriptedFault, Selection, SimReport, Strategy,
};
use moc_core::scenario::{DynamicK, OutputOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One MoE layer set with modules summing to `p_ne`.
pub fn model(layers: u64, experts: u64, top_k: u64, modules: &[u64]) -> ModelSpec {
    ModelSpec {
        num_moe_layers: layers,
        experts_per_layer: experts,
        top_k,
        non_expert_params: modules.iter().sum(),
        expert_params_per_expert: 10,
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
        persist_bandwidth: 1e6,
        fb_time: 1.0,
        update_time: 0.5,
        restart_time: 10.0,
        failure_rate: 0.0,
    }
}

/// A single-fault scenario: `layers` MoE layers of `n` experts, one GPU per
/// node, `dp = ep = n.min(4)`.
pub fn base(layers: u64, n: u64, k: u64, i_ckpt: u64, i_total: u64) -> Scenario {
    let ranks = n.min(4);
    Scenario {
        model: model(layers, n, 1, &[30, 10]),
        parallel: ParallelSpec::new(ranks, ranks),
        cluster: cluster(ranks, 1),
        pec: Some(PecConfig::uniform(k, Selection::Sequential)),
        strategy: Strategy::EqualShardedPec,
        mode: Mode::Async,
        two_level_recovery: false,
        dynamic_k: None,
        i_ckpt,
        i_total,
        routing: Routing::Uniform,
        tokens_per_iteration: 64,
        capacity_factor: None,
        faults: Faults::None,
        rng_seed: 7,
        output: OutputOptions::default(),
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    *items.choose(rng).expect("non-empty")
}

/// A random valid scenario: at most 3 layers, N ≤ 8, I_total ≤ 200 and at
/// most 3 scripted faults.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(1..=3);
    let n = pick(&mut rng, &[2u64, 4, 8]);
    let ep = pick(&mut rng, &[1u64, 2, 4].map(|e| e.min(n)));
    let dp = ep * pick(&mut rng, &[1u64, 2]);
    let gpn = if dp % 2 == 0 { pick(&mut rng, &[1u64, 2]) } else { 1 };
    let nodes = dp / gpn;
    let top_k = rng.gen_range(1..=n.min(2));
    let modules: Vec<u64> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=40)).collect();

    let strategy = pick(&mut rng, &Strategy::ALL);
    let ks = rng.gen_range(1..=n);
    let kp = rng.gen_range(1..=ks);
    let selection = pick(&mut rng, &[Selection::Sequential, Selection::LoadAware]);
    let i_ckpt = rng.gen_range(1..=20);
    let i_total = rng.gen_range(i_ckpt.max(10)..=200);
    let fault_count = rng.gen_range(0..=3);
    let mut iterations: Vec<u64> = (0..fault_count).map(|_| rng.gen_range(1..=i_total)).collect();
    iterations.sort_unstable();
    let faults = iterations
        .into_iter()
        .map(|iteration| {
            let mut all: Vec<u64> = (0..nodes).collect();
            all.shuffle(&mut rng);
            all.truncate(rng.gen_range(1..=nodes as usize));
            all.sort_unstable();
            ScriptedFault {
                iteration,
                nodes: all,
            }
        })
        .collect::<Vec<_>>();

    let mut cl = cluster(nodes, gpn);
    cl.snapshot_bandwidth = pick(&mut rng, &[100.0, 500.0, 1e4]);
    cl.persist_bandwidth = pick(&mut rng, &[20.0, 200.0, 1e4]);
    cl.restart_time = pick(&mut rng, &[0.5, 3.0]);
    Scenario {
        model: model(layers, n, top_k, &modules),
        parallel: ParallelSpec::new(dp, ep),
        cluster: cl,
        pec: Some(PecConfig {
            k_pec: kp,
            selection,
            k_snapshot: ks,
            k_persist: kp,
        }),
        strategy,
        mode: pick(&mut rng, &[Mode::Async, Mode::Blocking]),
        two_level_recovery: rng.gen_bool(0.5),
        dynamic_k: rng
            .gen_bool(0.3)
            .then(|| DynamicK { threshold: pick(&mut rng, &[0.01, 0.0375]) }),
        i_ckpt,
        i_total,
        routing: if rng.gen_bool(0.5) {
            Routing::Uniform
        } else {
            Routing::Zipf {
                s: pick(&mut rng, &[0.5, 1.0, 1.5]),
            }
        },
        tokens_per_iteration: rng.gen_range(1..=50),
        capacity_factor: rng.gen_bool(0.3).then(|| pick(&mut rng, &[1.0, 1.25])),
        faults: if faults.is_empty() {
            Faults::None
        } else {
            Faults::Scripted(faults)
        },
        rng_seed: seed,
        output: OutputOptions::default(),
    }
}

/// Brute-force PLT: replays the executed iteration sequence implied by the
/// report's fault records, keeping each expert's full state as the list of
/// (execution step, tokens) it has absorbed and a copy of that state for
/// every iteration label. A restore to label `r` reinstates the latest copy
/// taken at `r`; the lost tokens are those in the current state but not in
/// the restored one. Returns the lost tokens per layer and the PLT.
pub fn oracle_plt(sc: &Scenario, report: &SimReport) -> (Vec<u64>, f64) {
    let layers = sc.model.num_moe_layers as usize;
    let n = sc.model.experts_per_layer as usize;
    type State = Vec<(u64, u64)>;
    let mut state: Vec<State> = vec![Vec::new(); layers * n];
    let mut copies: Vec<BTreeMap<u64, State>> = vec![BTreeMap::new(); layers * n];
    for c in &mut copies {
        c.insert(0, Vec::new());
    }
    let mut lost = vec![0u64; layers];
    let mut faults = report.faults.iter();
    let mut next = faults.next();
    let mut step = 0u64;
    let mut i = 0;
    while i < sc.i_total {
        let it = i + 1;
        step += 1;
        let counts = route_tokens(it, sc);
        for (x, &t) in counts.iter().enumerate() {
            state[x].push((step, t));
            copies[x].insert(it, state[x].clone());
        }
        i = it;
        if let Some(f) = next.filter(|f| f.iteration == it) {
            for (l, lost) in lost.iter_mut().enumerate() {
                for e in 0..n {
                    let x = l * n + e;
                    let r = f.restored[l][e];
                    let restored = copies[x][&r].clone();
                    let dropped: u64 = state[x]
                        .iter()
                        .filter(|s| !restored.contains(s))
                        .map(|s| s.1)
                        .sum();
                    *lost += dropped;
                    state[x] = restored;
                }
            }
            i = f.rewind_to;
            next = faults.next();
        }
    }
    assert!(next.is_none(), "report lists a fault the replay never reached");
    let denom = (sc.tokens_per_iteration * sc.model.top_k * sc.i_total) as f64;
    let mut sum = 0.0;
    for &l in &lost {
        sum += l as f64 / denom;
    }
    let plt = sum / layers as f64;
    (lost, plt)
}
