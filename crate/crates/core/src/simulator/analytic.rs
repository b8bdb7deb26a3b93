//! Closed-form overhead model for full versus partial checkpointing.

use serde::{Deserialize, Serialize};

/// Inputs of the closed-form model. Times are seconds, intervals are
/// iterations, `failure_rate` is faults per iteration and
/// `iteration_time` converts lost iterations to seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticParams {
    pub o_save_full: f64,
    pub i_ckpt_full: f64,
    pub o_save_moc: f64,
    pub i_ckpt_moc: f64,
    pub failure_rate: f64,
    pub o_restart: f64,
    pub i_total: f64,
    pub iteration_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOutcome {
    pub o_ckpt_full: f64,
    pub o_ckpt_moc: f64,
    pub moc_wins: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticError {
    #[error("{field} must be positive (got {value})")]
    NonPositive { field: &'static str, value: f64 },
}

/// Expected total overhead with `N_fault = λ·I_total` faults, each losing
/// half an interval on average.
pub fn expected_overhead(
    o_save: f64,
    i_ckpt: f64,
    failure_rate: f64,
    o_restart: f64,
    i_total: f64,
    iteration_time: f64,
) -> f64 {
    o_save * i_total / i_ckpt
        + failure_rate * i_total * (o_restart + iteration_time * i_ckpt / 2.0)
}

/// Evaluates both totals; `moc_wins` is the reduced per-iteration condition
/// `O_s^M/I^M + λ·t·I^M/2 < O_s^F/I^F + λ·t·I^F/2` (restart cost cancels).
pub fn analytic_overhead(p: &AnalyticParams) -> Result<AnalyticOutcome, AnalyticError> {
    for (field, value) in [
        ("i_ckpt_full", p.i_ckpt_full),
        ("i_ckpt_moc", p.i_ckpt_moc),
        ("i_total", p.i_total),
        ("iteration_time", p.iteration_time),
    ] {
        if value.is_nan() || value <= 0.0 {
            return Err(AnalyticError::NonPositive { field, value });
        }
    }
    let full = expected_overhead(
        p.o_save_full,
        p.i_ckpt_full,
        p.failure_rate,
        p.o_restart,
        p.i_total,
        p.iteration_time,
    );
    let moc = expected_overhead(
        p.o_save_moc,
        p.i_ckpt_moc,
        p.failure_rate,
        p.o_restart,
        p.i_total,
        p.iteration_time,
    );
    let lhs = p.o_save_moc / p.i_ckpt_moc + p.failure_rate * p.iteration_time * p.i_ckpt_moc / 2.0;
    let rhs =
        p.o_save_full / p.i_ckpt_full + p.failure_rate * p.iteration_time * p.i_ckpt_full / 2.0;
    Ok(AnalyticOutcome {
        o_ckpt_full: full,
        o_ckpt_moc: moc,
        moc_wins: lhs < rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> AnalyticParams {
        AnalyticParams {
            o_save_full: 2.0,
            i_ckpt_full: 10.0,
            o_save_moc: 0.0,
            i_ckpt_moc: 10.0,
            failure_rate: 0.01,
            o_restart: 5.0,
            i_total: 1000.0,
            iteration_time: 1.0,
        }
    }

    #[test]
    fn zero_save_wins() {
        assert!(analytic_overhead(&base()).unwrap().moc_wins);
    }

    #[test]
    fn equal_inputs_do_not_win() {
        let mut p = base();
        p.o_save_moc = p.o_save_full;
        let out = analytic_overhead(&p).unwrap();
        assert!(!out.moc_wins);
        assert_eq!(out.o_ckpt_full, out.o_ckpt_moc);
    }

    #[test]
    fn totals_by_hand() {
        let out = analytic_overhead(&base()).unwrap();
        // 2·100 + 10·(5 + 5)
        assert!((out.o_ckpt_full - 300.0).abs() < 1e-9);
        assert!((out.o_ckpt_moc - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_interval() {
        let mut p = base();
        p.i_ckpt_moc = 0.0;
        assert!(analytic_overhead(&p).is_err());
    }

    #[test]
    fn predicate_agrees_with_totals() {
        for i_m in 1..30 {
            for s in 0..20 {
                let mut p = base();
                p.i_ckpt_moc = i_m as f64;
                p.o_save_moc = s as f64 * 0.25;
                let out = analytic_overhead(&p).unwrap();
                let gap = out.o_ckpt_full - out.o_ckpt_moc;
                if gap.abs() > 1e-9 {
                    assert_eq!(out.moc_wins, gap > 0.0);
                }
            }
        }
    }
}
