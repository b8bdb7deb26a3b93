mod common;

use common::{cluster, model};
use moc_core::planner::{
    bottleneck_workload, full_checkpoint_size, pec_checkpoint_size, pec_imbalance, plan_for,
    verify_coverage,
};
use moc_core::selector::{select_sequential, SelectionSchedule};
use moc_core::topology::build_layout;
use moc_core::{ParallelSpec, RankLayout, Strategy as Scheme};
use proptest::prelude::*;

fn arb_layout() -> impl Strategy<Value = (RankLayout, u64)> {
    (
        1u64..=3,
        prop::sample::select(vec![2u64, 4, 8, 16]),
        prop::sample::select(vec![1u64, 2, 4]),
        prop::sample::select(vec![1u64, 2, 3]),
        prop::collection::vec(1u64..500, 1..5),
        1u64..40,
    )
        .prop_filter_map("ep must divide N", |(layers, n, ep, g, modules, ppe)| {
            if n % ep != 0 {
                return None;
            }
            let mut m = model(layers, n, 1, &modules);
            m.expert_params_per_expert = ppe;
            let dp = ep * g;
            let layout = build_layout(&m, &ParallelSpec::new(dp, ep), &cluster(dp, 1)).ok()?;
            Some((layout, n))
        })
}

fn loads_sum(plan: &moc_core::ShardPlan, phase: usize) -> u64 {
    plan.phases[phase].workload_bytes.iter().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_plan_covers_due_units_once((layout, n) in arb_layout(), k in 1u64..=16) {
        let k = k.min(n);
        for s in Scheme::ALL {
            let plan = plan_for(&layout, s, k);
            prop_assert_eq!(verify_coverage(&layout, &plan), Ok(()));
        }
    }

    #[test]
    fn phase_bytes_equal_size_formula((layout, n) in arb_layout(), k in 1u64..=16) {
        let k = k.min(n);
        let m = model_of(&layout);
        for s in [Scheme::EqualShardedPec, Scheme::AdaptivePec] {
            let plan = plan_for(&layout, s, k);
            for p in 0..plan.phases.len() {
                prop_assert_eq!(loads_sum(&plan, p), pec_checkpoint_size(&m, k).unwrap());
            }
        }
        for s in [Scheme::Baseline, Scheme::EqualShardedFull] {
            let plan = plan_for(&layout, s, k);
            prop_assert_eq!(loads_sum(&plan, 0), full_checkpoint_size(&m));
        }
    }

    #[test]
    fn period_covers_every_expert_equally((layout, n) in arb_layout(), k in 1u64..=16) {
        let k = k.min(n) as usize;
        let n = n as usize;
        let sched = SelectionSchedule::new(n, k, layout.num_layers());
        let period = sched.period();
        for m in 0..layout.num_layers() {
            let mut hits = vec![0u64; n];
            for c in 0..period {
                for e in select_sequential(c, m, n, k) {
                    hits[e] += 1;
                }
            }
            prop_assert!(hits.iter().all(|&h| h == period * k as u64 / n as u64));
        }
    }

    #[test]
    fn adaptive_never_worse_than_equal_and_within_slack((layout, n) in arb_layout(), k in 1u64..=16) {
        let k = k.min(n);
        let eq = plan_for(&layout, Scheme::EqualShardedPec, k);
        let ad = plan_for(&layout, Scheme::AdaptivePec, k);
        let max_module = layout
            .non_expert_weight_units()
            .iter()
            .map(|&u| layout.unit(u).size_bytes)
            .max()
            .unwrap();
        let ranks = layout.num_ranks() as u64;
        for p in 0..eq.period() {
            let (_, b_eq) = bottleneck_workload(&eq, p);
            let (_, b_ad) = bottleneck_workload(&ad, p);
            prop_assert!(b_ad <= b_eq);
            let total: u64 = ad.phases[p as usize].workload_bytes.iter().sum();
            let preload_max = preload_max(&ad, p as usize, &layout);
            let bound = preload_max.max(total.div_ceil(ranks) + max_module);
            prop_assert!(b_ad <= bound, "{} > {}", b_ad, bound);
        }
    }

    #[test]
    fn equal_beats_baseline_with_data_parallelism((layout, _n) in arb_layout()) {
        prop_assume!(layout.num_ranks() >= 2 && layout.non_expert_weight_units().len() >= 2);
        let base = plan_for(&layout, Scheme::Baseline, 0);
        let eq = plan_for(&layout, Scheme::EqualShardedFull, 0);
        prop_assert!(bottleneck_workload(&eq, 0).1 < bottleneck_workload(&base, 0).1);
    }
}

fn model_of(layout: &RankLayout) -> moc_core::ModelSpec {
    layout.model.clone()
}

/// Largest per-rank load before any module is placed.
fn preload_max(plan: &moc_core::ShardPlan, phase: usize, layout: &RankLayout) -> u64 {
    let modules: std::collections::BTreeSet<_> =
        layout.non_expert_weight_units().iter().copied().collect();
    plan.phases[phase]
        .assignments
        .iter()
        .map(|a| a.iter().filter(|x| !modules.contains(&x.unit)).map(|x| x.len()).sum::<u64>())
        .max()
        .unwrap()
}

#[test]
fn imbalance_predicate_matches_examples() {
    let m = model(4, 8, 1, &[10, 10]);
    assert!(pec_imbalance(&m, &ParallelSpec::new(8, 8), 1));
    assert!(!pec_imbalance(&m, &ParallelSpec::new(4, 4), 1));
    assert!(pec_imbalance(&m, &ParallelSpec::new(8, 4), 1));
    assert!(!pec_imbalance(&m, &ParallelSpec::new(8, 4), 2));
}

#[test]
fn interleaved_schedule_over_four_layers() {
    let picks = |c| -> Vec<usize> { (0..4).map(|m| select_sequential(c, m, 3, 1)[0]).collect() };
    assert_eq!(picks(0), vec![0, 1, 2, 0]);
    assert_eq!(picks(1), vec![1, 2, 0, 1]);
}
