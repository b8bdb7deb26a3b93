//! Which experts each checkpoint saves.
//!
//! The sequential schedule hands layer `m` at checkpoint `c` the `K`
//! consecutive experts starting at `(m + c)·K mod N`. Layers are offset by
//! one block of `K`, so at any checkpoint the saved experts of successive
//! layers walk around the expert ring; combined with the `e mod D_ep` expert
//! placement this spreads saves over EP ranks as evenly as the counts allow.

use serde::{Deserialize, Serialize};

use crate::topology::ExpertId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Sequential,
    LoadAware,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Experts saved for layer `m` at checkpoint `c`, in schedule order.
pub fn select_sequential(c: u64, m: usize, n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= n, "k must lie in 1..=n");
    let n64 = n as u64;
    let start = ((m as u64 + c) % n64) * (k as u64) % n64;
    (0..k as u64).map(|j| ((start + j) % n64) as usize).collect()
}

/// Stateless sequential schedule over `num_layers` MoE layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSchedule {
    pub n_experts: usize,
    pub k: usize,
    pub num_layers: usize,
}

impl SelectionSchedule {
    pub fn new(n_experts: usize, k: usize, num_layers: usize) -> Self {
        assert!(k >= 1 && k <= n_experts);
        SelectionSchedule {
            n_experts,
            k,
            num_layers,
        }
    }

    pub fn selected(&self, c: u64, m: usize) -> Vec<usize> {
        select_sequential(c, m, self.n_experts, self.k)
    }

    /// Selection for every layer at checkpoint `c`.
    pub fn selected_all(&self, c: u64) -> Vec<Vec<usize>> {
        (0..self.num_layers).map(|m| self.selected(c, m)).collect()
    }

    /// Number of checkpoints after which the schedule repeats: `N / gcd(N, K)`.
    pub fn period(&self) -> u64 {
        let n = self.n_experts as u64;
        n / gcd(n, self.k as u64)
    }

    /// Number of consecutive checkpoints guaranteed to save every expert of
    /// every layer at least once: `ceil(N / K)`.
    pub fn coverage_window(&self) -> u64 {
        (self.n_experts as u64).div_ceil(self.k as u64)
    }
}

/// Tokens delivered to each expert since its last save at one tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadCounters {
    n_experts: usize,
    unsaved_tokens: Vec<u64>,
}

impl LoadCounters {
    pub fn new(num_layers: usize, n_experts: usize) -> Self {
        LoadCounters {
            n_experts,
            unsaved_tokens: vec![0; num_layers * n_experts],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.unsaved_tokens.len() / self.n_experts
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn get(&self, id: ExpertId) -> u64 {
        self.unsaved_tokens[id.layer * self.n_experts + id.expert]
    }

    pub fn set(&mut self, id: ExpertId, tokens: u64) {
        self.unsaved_tokens[id.layer * self.n_experts + id.expert] = tokens;
    }

    pub fn add(&mut self, id: ExpertId, tokens: u64) {
        self.unsaved_tokens[id.layer * self.n_experts + id.expert] += tokens;
    }

    pub fn reset(&mut self, id: ExpertId) {
        self.set(id, 0);
    }

    pub fn layer(&self, m: usize) -> &[u64] {
        &self.unsaved_tokens[m * self.n_experts..(m + 1) * self.n_experts]
    }
}

/// The `k` experts of `candidates` with the most unsaved tokens; ties go to
/// the lower expert index. Returned in ascending expert order.
pub fn top_k_by_load(counts: &[u64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    ranked.truncate(k);
    ranked.sort_unstable();
    ranked
}

/// The `k` experts of layer `m` with the most unsaved tokens.
pub fn select_load_aware(counters: &LoadCounters, m: usize, k: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..counters.n_experts()).collect();
    top_k_by_load(counters.layer(m), &all, k)
}

/// Which experts of one layer to snapshot and which of those to persist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSelection {
    pub snapshot: Vec<usize>,
    pub persist: Vec<usize>,
}

/// Sequential two-tier selection. The snapshot tier follows the sequential
/// schedule with `k_snapshot`. Within each snapshot set, the persisted
/// positions advance by `k_persist` every time the snapshot schedule
/// completes a coverage window, offset per layer, so every expert is
/// eventually persisted.
pub fn select_tiers_sequential(
    c: u64,
    m: usize,
    n: usize,
    k_snapshot: usize,
    k_persist: usize,
) -> TierSelection {
    assert!(k_persist >= 1 && k_persist <= k_snapshot);
    let snapshot = select_sequential(c, m, n, k_snapshot);
    let round = c / (n as u64).div_ceil(k_snapshot as u64);
    let ks = k_snapshot as u64;
    let start = ((m as u64 + round) % ks) * (k_persist as u64) % ks;
    let mut persist: Vec<usize> = (0..k_persist as u64)
        .map(|j| snapshot[((start + j) % ks) as usize])
        .collect();
    persist.sort_unstable();
    let mut snapshot = snapshot;
    snapshot.sort_unstable();
    TierSelection { snapshot, persist }
}

/// Load-aware two-tier selection: snapshot the `k_snapshot` experts with the
/// most tokens unsaved in memory, persist the `k_persist` of those with the
/// most tokens unsaved on storage.
pub fn select_tiers_load_aware(
    snapshot_counters: &LoadCounters,
    persist_counters: &LoadCounters,
    m: usize,
    k_snapshot: usize,
    k_persist: usize,
) -> TierSelection {
    let snapshot = select_load_aware(snapshot_counters, m, k_snapshot);
    let persist = top_k_by_load(persist_counters.layer(m), &snapshot, k_persist);
    TierSelection { snapshot, persist }
}

/// PLT threshold used when none is configured.
pub const DEFAULT_PLT_THRESHOLD: f64 = 0.0375;

/// Dynamic-K controller.
///
/// Each doubling level `j` (with `k = k0·2^j`) may run until the cumulative
/// PLT reaches `threshold·(1 − 2^(−j−1))`; crossing it doubles `k`. The caps
/// approach but never reach `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicKState {
    pub k0: usize,
    pub current_k: usize,
    pub max_k: usize,
    pub doublings: u32,
    pub threshold: f64,
    pub cumulative_plt: f64,
}

impl DynamicKState {
    pub fn new(k0: usize, max_k: usize, threshold: f64) -> Self {
        DynamicKState {
            k0,
            current_k: k0.min(max_k),
            max_k,
            doublings: 0,
            threshold,
            cumulative_plt: 0.0,
        }
    }

    /// Cumulative PLT allowed before leaving the current level.
    pub fn cap(&self) -> f64 {
        self.threshold * (1.0 - 0.5f64.powi(self.doublings as i32 + 1))
    }

    /// Budget slice of the current level alone.
    pub fn plt_budget_per_k(&self) -> f64 {
        self.threshold * 0.5f64.powi(self.doublings as i32 + 1)
    }
}

/// Adds the PLT of one fault and doubles `k` while the cumulative PLT
/// exceeds the current level's cap.
pub fn dynamic_k_step(state: &DynamicKState, plt_added: f64) -> DynamicKState {
    let mut next = state.clone();
    next.cumulative_plt += plt_added.max(0.0);
    while next.current_k < next.max_k && next.cumulative_plt > next.cap() {
        next.current_k = (next.current_k * 2).min(next.max_k);
        next.doublings += 1;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn reproduces_interleaved_example() {
        let c0: Vec<usize> = (0..4).map(|m| select_sequential(0, m, 3, 1)[0]).collect();
        let c1: Vec<usize> = (0..4).map(|m| select_sequential(1, m, 3, 1)[0]).collect();
        assert_eq!(c0, vec![0, 1, 2, 0]);
        assert_eq!(c1, vec![1, 2, 0, 1]);
    }

    #[test]
    fn full_k_selects_everything() {
        for c in 0..5 {
            for m in 0..3 {
                let s: BTreeSet<usize> = select_sequential(c, m, 6, 6).into_iter().collect();
                assert_eq!(s, (0..6).collect());
            }
        }
    }

    #[test]
    fn period_and_window() {
        let s = SelectionSchedule::new(6, 4, 1);
        assert_eq!(s.period(), 3);
        assert_eq!(s.coverage_window(), 2);
        let s = SelectionSchedule::new(16, 4, 1);
        assert_eq!(s.period(), 4);
        assert_eq!(s.coverage_window(), 4);
    }

    #[test]
    fn load_aware_ties_and_order() {
        let mut lc = LoadCounters::new(1, 4);
        for (e, t) in [10, 40, 40, 5].into_iter().enumerate() {
            lc.set(ExpertId::new(0, e), t);
        }
        assert_eq!(select_load_aware(&lc, 0, 2), vec![1, 2]);
        assert_eq!(select_load_aware(&LoadCounters::new(1, 4), 0, 1), vec![0]);
    }

    #[test]
    fn load_aware_skips_just_saved_expert() {
        let mut lc = LoadCounters::new(1, 3);
        for e in 0..3 {
            lc.add(ExpertId::new(0, e), 7);
        }
        let first = select_load_aware(&lc, 0, 1)[0];
        lc.reset(ExpertId::new(0, first));
        assert_ne!(select_load_aware(&lc, 0, 1)[0], first);
    }

    #[test]
    fn persist_tier_is_subset_and_covers() {
        let (n, ks, kp) = (8, 4, 1);
        let mut persisted = BTreeSet::new();
        for c in 0..16 {
            let t = select_tiers_sequential(c, 0, n, ks, kp);
            assert_eq!(t.persist.len(), kp);
            assert!(t.persist.iter().all(|e| t.snapshot.contains(e)));
            persisted.extend(t.persist);
        }
        assert_eq!(persisted, (0..n).collect());
    }

    #[test]
    fn equal_tiers_match_plain_schedule() {
        for c in 0..6 {
            for m in 0..3 {
                let t = select_tiers_sequential(c, m, 6, 2, 2);
                let mut plain = select_sequential(c, m, 6, 2);
                plain.sort_unstable();
                assert_eq!(t.persist, plain);
                let t = select_tiers_sequential(c, m, 6, 6, 2);
                assert_eq!(t.persist, plain);
            }
        }
    }

    #[test]
    fn dynamic_k_doubles_and_caps() {
        let s = DynamicKState::new(1, 4, 0.0375);
        let s = dynamic_k_step(&s, 0.01);
        assert_eq!(s.current_k, 1);
        let s = dynamic_k_step(&s, 0.01);
        assert_eq!(s.current_k, 2);
        let s = dynamic_k_step(&s, 0.5);
        assert_eq!(s.current_k, 4);
        let s = dynamic_k_step(&s, 0.5);
        assert_eq!(s.current_k, 4);
        assert!((s.cumulative_plt - 1.02).abs() < 1e-12);
    }
}
