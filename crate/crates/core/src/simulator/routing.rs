//! Per-iteration token routing.
//!
//! Each iteration draws from its own ChaCha8 stream (`seed`, stream =
//! iteration), so an iteration replayed after a fault routes exactly as it
//! did the first time.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scenario::{Routing, Scenario};

/// Random source for `iteration`.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Per-expert token cap, `ceil(cf · TopK · T / N)`.
pub fn capacity(capacity_factor: f64, top_k: u64, tokens: u64, experts: u64) -> u64 {
    (capacity_factor * (top_k * tokens) as f64 / experts as f64).ceil() as u64
}

/// Cumulative Zipf weights of `n` experts.
pub fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let mut acc = 0.0;
    (0..n)
        .map(|j| {
            acc += 1.0 / ((j + 1) as f64).powf(s);
            acc
        })
        .collect()
}

/// Picks `top_k` distinct experts for one token by repeated draws against
/// `cdf`, discarding repeats.
pub fn sample_distinct(rng: &mut ChaCha8Rng, cdf: &[f64], top_k: usize, out: &mut Vec<usize>) {
    out.clear();
    let total = *cdf.last().expect("at least one expert");
    while out.len() < top_k {
        let u = rng.gen::<f64>() * total;
        let j = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        if !out.contains(&j) {
            out.push(j);
        }
    }
}

/// Routed tokens per `[layer][expert]` before any capacity cap, flattened.
pub fn route_raw(iteration: u64, sc: &Scenario) -> Vec<u64> {
    let layers = sc.model.num_moe_layers as usize;
    let n = sc.model.experts_per_layer as usize;
    let k = sc.model.top_k as usize;
    let t = sc.tokens_per_iteration;
    let mut counts = vec![0u64; layers * n];
    match &sc.routing {
        Routing::Uniform => {
            let total = t * k as u64;
            let base = total / n as u64;
            let extra = (total % n as u64) as usize;
            for layer in 0..layers {
                let row = &mut counts[layer * n..(layer + 1) * n];
                row.fill(base);
                let offset = ((iteration + layer as u64) % n as u64) as usize;
                for j in 0..extra {
                    row[(offset + j) % n] += 1;
                }
            }
        }
        Routing::Zipf { s } => {
            let cdf = zipf_cdf(n, *s);
            let mut rng = iteration_rng(sc.rng_seed, iteration);
            let mut picked = Vec::with_capacity(k);
            for layer in 0..layers {
                for _ in 0..t {
                    sample_distinct(&mut rng, &cdf, k, &mut picked);
                    for &e in &picked {
                        counts[layer * n + e] += 1;
                    }
                }
            }
        }
        Routing::Scripted(rows) => {
            for (layer, row) in rows.iter().enumerate() {
                counts[layer * n..(layer + 1) * n].copy_from_slice(row);
            }
        }
    }
    counts
}

/// Tokens each expert actually processes in `iteration`, after dropping
/// whatever exceeds the capacity cap.
pub fn route_tokens(iteration: u64, sc: &Scenario) -> Vec<u64> {
    let mut counts = route_raw(iteration, sc);
    if let Some(cf) = sc.capacity_factor {
        let cap = capacity(
            cf,
            sc.model.top_k,
            sc.tokens_per_iteration,
            sc.model.experts_per_layer,
        );
        for c in &mut counts {
            *c = (*c).min(cap);
        }
    }
    counts
}
