//! Shared fixtures for the benchmarks.

use moc_core::topology::build_layout;
use moc_core::{RankLayout, Scenario};

const CASE2: &str = include_str!("../../../scenarios/gpt350m16e_case2.json");
const ZIPF: &str = include_str!("../../../scenarios/small_zipf.json");

fn parse(text: &str) -> Scenario {
    Scenario::from_json(text).expect("bundled scenario parses")
}

/// 12 MoE layers of 16 experts on 16 ranks, shortened to `i_total` iterations.
pub fn gpt_case2(i_total: u64) -> Scenario {
    let mut sc = parse(CASE2);
    sc.i_total = i_total;
    sc.faults = moc_core::Faults::None;
    sc
}

/// Small skewed-routing scenario with two faults.
pub fn small_zipf() -> Scenario {
    parse(ZIPF)
}

pub fn layout(sc: &Scenario) -> RankLayout {
    build_layout(&sc.model, &sc.parallel, &sc.cluster).expect("bundled scenario is valid")
}
