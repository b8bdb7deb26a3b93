//! Three-regime comparison: blocking full saves, asynchronous full saves and
//! asynchronous partial-expert saves. Every column comes from a `SimReport`.

use moc_core::simulator::{analytic_overhead, run, to_seconds, AnalyticParams};
use moc_core::{Faults, Mode, PecConfig, Scenario, SimReport, Strategy};
use serde_json::json;

use crate::{emit, simulation, Outcome};

pub struct Row {
    pub regime: &'static str,
    pub report: SimReport,
}

impl Row {
    fn checkpoint_ticks(&self) -> u64 {
        self.report
            .checkpoints
            .iter()
            .map(|c| c.snapshot_ticks + c.persist_ticks)
            .sum()
    }

    fn stall_ticks(&self) -> u64 {
        self.report.checkpoints.iter().map(|c| c.stall_ticks).sum()
    }

    /// Share of checkpoint time hidden behind training.
    fn overlap(&self) -> f64 {
        let total = self.checkpoint_ticks();
        if total == 0 {
            1.0
        } else {
            1.0 - self.report.o_save_ticks as f64 / total as f64
        }
    }

    fn json(&self) -> serde_json::Value {
        let r = &self.report;
        json!({
            "regime": self.regime,
            "strategy": r.strategy.name(),
            "iteration_s": r.mean_iteration_s(),
            "o_save_s": r.o_save_s,
            "mean_o_save_s": r.mean_o_save_s(),
            "stall_s": to_seconds(self.stall_ticks()),
            "checkpoint_s": to_seconds(self.checkpoint_ticks()),
            "overlap": self.overlap(),
            "min_feasible_i_ckpt": r.min_feasible_i_ckpt,
            "o_ckpt_s": r.o_ckpt_s,
            "plt": r.plt.average,
        })
    }
}

fn regime(sc: &Scenario, strategy: Strategy, mode: Mode) -> Scenario {
    let mut s = sc.clone();
    s.strategy = strategy;
    s.mode = mode;
    s.output = Default::default();
    if strategy.is_pec() && s.pec.is_none() {
        s.pec = Some(PecConfig::uniform(1, Default::default()));
    }
    s
}

pub fn rows(sc: &Scenario) -> Result<Vec<Row>, moc_core::SimError> {
    let pec = if sc.strategy.is_pec() {
        sc.strategy
    } else {
        Strategy::AdaptivePec
    };
    let regimes = [
        ("blocking-full", Strategy::Baseline, Mode::Blocking),
        ("async-full", Strategy::Baseline, Mode::Async),
        ("async-pec", pec, Mode::Async),
    ];
    regimes
        .into_iter()
        .map(|(name, strategy, mode)| {
            Ok(Row {
                regime: name,
                report: run(&regime(sc, strategy, mode))?,
            })
        })
        .collect()
}

/// Faults per iteration: the configured rate, or the scripted count spread
/// over the run.
fn failure_rate(sc: &Scenario) -> f64 {
    match &sc.faults {
        Faults::Poisson => sc.cluster.failure_rate,
        Faults::Scripted(list) => list.len() as f64 / sc.i_total as f64,
        Faults::None => 0.0,
    }
}

pub fn cmd_compare(sc: &Scenario, as_json: bool) -> Outcome {
    let rows = rows(sc).map_err(simulation)?;
    let (full, moc) = (&rows[1].report, &rows[2].report);
    let verdict = analytic_overhead(&AnalyticParams {
        o_save_full: full.mean_o_save_s(),
        i_ckpt_full: full.i_ckpt as f64,
        o_save_moc: moc.mean_o_save_s(),
        i_ckpt_moc: moc.i_ckpt as f64,
        failure_rate: failure_rate(sc),
        o_restart: sc.cluster.restart_time,
        i_total: sc.i_total as f64,
        iteration_time: to_seconds(moc.iteration_ticks),
    })
    .map_err(simulation)?;

    if as_json {
        let out = json!({
            "regimes": rows.iter().map(Row::json).collect::<Vec<_>>(),
            "analytic": verdict,
        });
        return emit(&serde_json::to_string_pretty(&out).map_err(simulation)?);
    }
    println!(
        "{:<14} {:>12} {:>12} {:>12} {:>9} {:>8} {:>12} {:>9}",
        "regime", "iter_s", "o_save_s", "stall_s", "overlap", "min_I", "o_ckpt_s", "plt_%"
    );
    for row in &rows {
        let r = &row.report;
        println!(
            "{:<14} {:>12.6} {:>12.6} {:>12.6} {:>8.2}% {:>8} {:>12.6} {:>9.4}",
            row.regime,
            r.mean_iteration_s(),
            r.o_save_s,
            to_seconds(row.stall_ticks()),
            row.overlap() * 100.0,
            r.min_feasible_i_ckpt,
            r.o_ckpt_s,
            r.plt.average * 100.0
        );
    }
    println!(
        "analytic: O_ckpt full {:.6} s, partial {:.6} s; partial wins: {}",
        verdict.o_ckpt_full,
        verdict.o_ckpt_moc,
        if verdict.moc_wins { "yes" } else { "no" }
    );
    Ok(())
}
