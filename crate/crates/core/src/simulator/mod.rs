//! Deterministic discrete-event simulation of MoE training with two-level
//! checkpointing, node faults and recovery.
//!
//! Every iteration runs forward/backward, waits for any snapshot still in
//! flight, applies the update, and absorbs its routed tokens. A fault strikes
//! after an iteration's update; a checkpoint begins after the update of every
//! `i_ckpt`-th iteration and, in async mode, overlaps the next
//! forward/backward pass. Time is kept in integer microsecond ticks.

pub mod analytic;
pub mod configure;
pub mod ledger;
pub mod report;
pub mod routing;

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use analytic::{analytic_overhead, AnalyticOutcome, AnalyticParams};
pub use configure::{adaptive_configure, ConfigureOutcome};
pub use ledger::{PltLedger, Segment};
pub use report::{
    to_seconds, to_ticks, transfer_ticks, CheckpointRecord, FaultRecord, PhaseBottleneck,
    PltSummary, SimReport, TimelineEvent, TICKS_PER_SECOND,
};
pub use routing::route_tokens;

use crate::engine::{
    buffer_workload, resolve_recovery, snapshot_content, BufferError, CheckpointEngine, FsStore,
    RecoveryError, RecoverySource, StoreError,
};
use crate::error::ValidationError;
use crate::planner::{assign_checkpoint, bottleneck_of, plan_for, PecConfig, ShardPlan};
use crate::scenario::{Faults, Mode, Scenario};
use crate::selector::{
    dynamic_k_step, select_tiers_load_aware, select_tiers_sequential, DynamicKState,
    LoadCounters, Selection, TierSelection,
};
use crate::topology::{build_layout, ExpertId, NodeId, Rank, RankLayout};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("recovery: {0}")]
    Recovery(#[from] RecoveryError),
    #[error("buffers: {0}")]
    Buffer(#[from] BufferError),
}

/// Stream reserved for fault arrivals; routing uses one stream per iteration.
const FAULT_STREAM: u64 = u64::MAX;

struct InFlight {
    buffer: usize,
    done_at: u64,
    record: usize,
}

pub struct Simulator<'a> {
    sc: &'a Scenario,
    layout: RankLayout,
    pec: PecConfig,
    plan: ShardPlan,
    engine: CheckpointEngine,
    ledger: PltLedger,
    snap_counters: LoadCounters,
    persist_counters: LoadCounters,
    dyn_k: Option<DynamicKState>,

    fb: u64,
    upd: u64,
    restart: u64,
    now: u64,
    checkpoint_counter: u64,
    snapshot: Option<InFlight>,
    persist: Option<InFlight>,
    /// Persist duration and record index of each buffer's pending persist.
    pending: [(u64, usize); crate::engine::buffers::NUM_BUFFERS],
    next_fault: usize,
    fault_rng: ChaCha8Rng,

    o_save: u64,
    o_restart: u64,
    o_lost: u64,
    o_lost_iterations: u64,
    executed: u64,
    checkpoints: Vec<CheckpointRecord>,
    faults: Vec<FaultRecord>,
    k_trace: Vec<u64>,
    timeline: Vec<TimelineEvent>,
}

impl<'a> Simulator<'a> {
    pub fn new(sc: &'a Scenario) -> Result<Self, SimError> {
        sc.validate()?;
        let layout = build_layout(&sc.model, &sc.parallel, &sc.cluster)?;
        let pec = sc.effective_pec();
        let plan = plan_for(&layout, sc.strategy, pec.k_snapshot);
        let layers = layout.num_layers();
        let n = layout.num_experts();
        let store = sc.output.store_root.as_ref().map(FsStore::new);
        let dyn_k = match (&sc.dynamic_k, sc.strategy.is_pec()) {
            (Some(d), true) => Some(DynamicKState::new(
                pec.k_persist as usize,
                n,
                d.threshold,
            )),
            _ => None,
        };
        let mut fault_rng = ChaCha8Rng::seed_from_u64(sc.rng_seed);
        fault_rng.set_stream(FAULT_STREAM);
        Ok(Simulator {
            sc,
            ledger: PltLedger::new(
                layers,
                n,
                sc.tokens_per_iteration * sc.model.top_k * sc.i_total,
            ),
            snap_counters: LoadCounters::new(layers, n),
            persist_counters: LoadCounters::new(layers, n),
            k_trace: vec![pec.k_persist],
            dyn_k,
            pec,
            plan,
            layout,
            engine: CheckpointEngine::new(store),
            fb: to_ticks(sc.cluster.fb_time),
            upd: to_ticks(sc.cluster.update_time),
            restart: to_ticks(sc.cluster.restart_time),
            now: 0,
            checkpoint_counter: 0,
            snapshot: None,
            persist: None,
            pending: [(0, 0); crate::engine::buffers::NUM_BUFFERS],
            next_fault: 0,
            fault_rng,
            o_save: 0,
            o_restart: 0,
            o_lost: 0,
            o_lost_iterations: 0,
            executed: 0,
            checkpoints: Vec::new(),
            faults: Vec::new(),
            timeline: Vec::new(),
        })
    }

    pub fn layout(&self) -> &RankLayout {
        &self.layout
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    fn event(&mut self, rank: Option<Rank>, event: &str, detail: String) {
        self.timeline.push(TimelineEvent {
            time: self.now,
            rank,
            event: event.to_string(),
            detail,
        });
    }

    /// Applies every snapshot and persist completion due by `t`, in time
    /// order, leaving `now` at `t` (or later if it already was).
    fn advance_to(&mut self, t: u64) -> Result<(), SimError> {
        let target = t.max(self.now);
        loop {
            let snap_due = self.snapshot.as_ref().map(|s| s.done_at).filter(|&d| d <= target);
            let persist_due = self.persist.as_ref().map(|p| p.done_at).filter(|&d| d <= target);
            match (snap_due, persist_due) {
                (None, None) => break,
                (Some(s), p) if p.is_none_or(|p| s <= p) => {
                    let f = self.snapshot.take().expect("due snapshot");
                    self.now = self.now.max(s);
                    let v = self.checkpoints[f.record].version;
                    self.event(None, "snapshot_complete", format!("v{v}"));
                    if let Some(next) = self.engine.complete_snapshot(f.buffer)? {
                        self.start_persist(next);
                    }
                }
                (_, Some(p)) => {
                    let f = self.persist.take().expect("due persist");
                    self.now = self.now.max(p);
                    let (pv, next) = self.engine.persist(f.buffer)?;
                    self.checkpoints[f.record].persisted = true;
                    self.event(None, "persist_complete", format!("v{}", pv.version));
                    if let Some(next) = next {
                        self.start_persist(next);
                    }
                }
                (Some(_), None) => unreachable!("guard covers a lone snapshot"),
            }
        }
        self.now = target;
        Ok(())
    }

    fn start_persist(&mut self, buffer: usize) {
        let (ticks, record) = self.pending[buffer];
        let rank = self.checkpoints[record].persist_bottleneck_rank;
        let v = self.checkpoints[record].version;
        self.event(Some(rank), "persist_begin", format!("v{v} {ticks}us"));
        self.persist = Some(InFlight {
            buffer,
            done_at: self.now + ticks,
            record,
        });
    }

    fn tiers(&self, c: u64) -> Vec<TierSelection> {
        let n = self.layout.num_experts();
        let ks = self.pec.k_snapshot as usize;
        let kp = self.pec.k_persist as usize;
        (0..self.layout.num_layers())
            .map(|m| match self.pec.selection {
                Selection::Sequential => select_tiers_sequential(c, m, n, ks, kp),
                Selection::LoadAware => select_tiers_load_aware(
                    &self.snap_counters,
                    &self.persist_counters,
                    m,
                    ks,
                    kp,
                ),
            })
            .collect()
    }

    fn checkpoint(&mut self, iteration: u64) -> Result<(), SimError> {
        let c = self.checkpoint_counter;
        self.checkpoint_counter += 1;
        let version = self.checkpoint_counter;
        let tiers = self.tiers(c);
        let snap_sel: Vec<Vec<usize>> = tiers.iter().map(|t| t.snapshot.clone()).collect();
        let persist_sel: Vec<Vec<usize>> = tiers.iter().map(|t| t.persist.clone()).collect();
        let phase = self.plan.phase(c);
        let assignments = if phase.selection == snap_sel {
            phase.assignments.clone()
        } else {
            assign_checkpoint(&self.layout, self.sc.strategy, &snap_sel)
        };
        let content = snapshot_content(&self.layout, &assignments, &persist_sel);

        let ranks = self.layout.num_ranks();
        let mut snap_load = vec![0u64; ranks];
        let mut persist_load = vec![0u64; ranks];
        for e in &content {
            snap_load[e.rank] += e.end - e.start;
            if e.persist {
                persist_load[e.rank] += e.end - e.start;
            }
        }
        let (snap_rank, snap_bytes) = bottleneck_of(&snap_load);
        let (persist_rank, persist_bytes) = bottleneck_of(&persist_load);
        let snap_ticks = transfer_ticks(snap_bytes, self.sc.cluster.snapshot_bandwidth);
        let persist_ticks = transfer_ticks(persist_bytes, self.sc.cluster.persist_bandwidth);

        for (m, t) in tiers.iter().enumerate() {
            for &e in &t.snapshot {
                self.snap_counters.reset(ExpertId::new(m, e));
            }
            for &e in &t.persist {
                self.persist_counters.reset(ExpertId::new(m, e));
            }
        }
        self.ledger.cut();

        let record = self.checkpoints.len();
        self.checkpoints.push(CheckpointRecord {
            index: c,
            iteration,
            version,
            begin_time: self.now,
            k_snapshot: self.pec.k_snapshot,
            k_persist: self.pec.k_persist,
            snapshot_bottleneck_rank: snap_rank,
            snapshot_bottleneck_bytes: snap_bytes,
            persist_bottleneck_rank: persist_rank,
            persist_bottleneck_bytes: persist_bytes,
            snapshot_bytes: snap_load.iter().sum(),
            persist_bytes: persist_load.iter().sum(),
            snapshot_ticks: snap_ticks,
            persist_ticks,
            buffer_wait_ticks: 0,
            stall_ticks: 0,
            persisted: false,
        });

        match self.sc.mode {
            Mode::Blocking => {
                let buffer = self.engine.begin_snapshot(version, iteration, content)?;
                self.pending[buffer] = (persist_ticks, record);
                self.event(Some(snap_rank), "snapshot_begin", format!("v{version} it{iteration}"));
                let stall = snap_ticks + persist_ticks;
                self.now += snap_ticks;
                self.event(None, "snapshot_complete", format!("v{version}"));
                let started = self.engine.complete_snapshot(buffer)?;
                debug_assert_eq!(started, Some(buffer));
                self.now += persist_ticks;
                self.engine.persist(buffer)?;
                self.checkpoints[record].persisted = true;
                self.checkpoints[record].stall_ticks = stall;
                self.o_save += stall;
                self.event(None, "persist_complete", format!("v{version}"));
                self.event(None, "stall", format!("{stall}us blocking checkpoint"));
            }
            Mode::Async => {
                let start = self.now;
                while !self.engine.buffers.has_free() {
                    let done = self
                        .persist
                        .as_ref()
                        .map(|p| p.done_at)
                        .expect("a full buffer set always has a persist running");
                    self.advance_to(done)?;
                }
                let wait = self.now - start;
                if wait > 0 {
                    self.o_save += wait;
                    self.checkpoints[record].buffer_wait_ticks = wait;
                    self.event(None, "stall", format!("{wait}us waiting for a free buffer"));
                }
                let buffer = self.engine.begin_snapshot(version, iteration, content)?;
                self.pending[buffer] = (persist_ticks, record);
                self.event(
                    Some(snap_rank),
                    "snapshot_begin",
                    format!("v{version} it{iteration} {snap_ticks}us"),
                );
                self.snapshot = Some(InFlight {
                    buffer,
                    done_at: self.now + snap_ticks,
                    record,
                });
            }
        }
        Ok(())
    }

    fn due_fault(&mut self, iteration: u64) -> Option<Vec<u64>> {
        match &self.sc.faults {
            Faults::None => None,
            Faults::Scripted(list) => {
                let f = list.get(self.next_fault)?;
                if f.iteration == iteration {
                    self.next_fault += 1;
                    Some(f.nodes.clone())
                } else {
                    None
                }
            }
            Faults::Poisson => {
                let p = self.sc.cluster.failure_rate;
                if p > 0.0 && self.fault_rng.gen_bool(p) {
                    Some(vec![self.fault_rng.gen_range(0..self.sc.cluster.num_nodes)])
                } else {
                    None
                }
            }
        }
    }

    /// Restores state after `nodes` fail at the end of `iteration` and
    /// returns the iteration training resumes from.
    fn recover(&mut self, iteration: u64, nodes: Vec<u64>) -> Result<u64, SimError> {
        let failed: BTreeSet<NodeId> = nodes.iter().map(|&n| n as NodeId).collect();
        let failed_ranks: BTreeSet<Rank> = (0..self.layout.num_ranks())
            .filter(|&r| self.layout.rank_failed(r, &failed))
            .collect();
        self.event(None, "fault", format!("nodes {nodes:?} after it{iteration}"));
        self.snapshot = None;
        self.persist = None;

        let layers = self.layout.num_layers();
        let n = self.layout.num_experts();
        let mut restored = vec![vec![0u64; n]; layers];
        let mut rewind = 0;
        let mut skew = 0;
        let mut from_memory = 0;
        if !self.engine.persisted().is_empty() {
            let memory = if self.sc.two_level_recovery {
                self.engine.memory_snapshots()
            } else {
                Vec::new()
            };
            let plan = resolve_recovery(&self.layout, &failed, self.engine.persisted(), &memory)?;
            from_memory = plan
                .units
                .iter()
                .filter(|u| matches!(u.source, RecoverySource::MemorySnapshot { .. }))
                .count();
            let ne: Vec<u64> = self
                .layout
                .non_expert_units()
                .filter(|&u| self.layout.unit(u).size_bytes > 0)
                .map(|u| plan.get(u).restored_iteration)
                .collect();
            rewind = ne.iter().copied().max().unwrap_or(0);
            skew = rewind - ne.iter().copied().min().unwrap_or(0);
            for (l, row) in restored.iter_mut().enumerate() {
                for (e, r) in row.iter_mut().enumerate() {
                    let id = ExpertId::new(l, e);
                    let ew = plan.get(self.layout.expert_weight_unit(id)).restored_iteration;
                    let eo = plan.get(self.layout.expert_optim_unit(id)).restored_iteration;
                    *r = ew.min(eo).min(rewind);
                }
            }
        }

        let mut lost_tokens = vec![0u64; layers];
        for (l, row) in restored.iter().enumerate() {
            for (e, &r) in row.iter().enumerate() {
                lost_tokens[l] += self.ledger.restore(ExpertId::new(l, e), r);
            }
        }
        self.ledger.cut();
        let plt_added = ledger::plt_from_lost(&lost_tokens, self.ledger.denominator());

        let lost_iterations = iteration - rewind;
        self.o_restart += self.restart;
        self.o_lost += lost_iterations * (self.fb + self.upd);
        self.o_lost_iterations += lost_iterations;
        self.now += self.restart;
        self.engine.reset_after_fault(&failed_ranks);
        self.event(
            None,
            "restart",
            format!("resume after it{rewind}, {from_memory} units from memory, skew {skew}"),
        );

        // Counters: the snapshot tier restarts from the restored state; the
        // persist tier counts tokens since the newest durable copy.
        let mut durable = vec![0u64; layers * n];
        for v in self.engine.persisted() {
            for &u in &v.units {
                if let Some(id) = self.layout.unit(u).kind.expert() {
                    let slot = &mut durable[id.layer * n + id.expert];
                    *slot = (*slot).max(v.iteration);
                }
            }
        }
        for l in 0..layers {
            for e in 0..n {
                let id = ExpertId::new(l, e);
                self.snap_counters.reset(id);
                let label = durable[l * n + e].min(restored[l][e]);
                self.persist_counters.set(id, self.ledger.tokens_after(id, label));
            }
        }

        if let Some(state) = &self.dyn_k {
            let next = dynamic_k_step(state, plt_added);
            if next.current_k != state.current_k {
                let k = next.current_k as u64;
                self.pec.k_pec = k;
                self.pec.k_persist = k;
                self.pec.k_snapshot = self.pec.k_snapshot.max(k);
                self.plan = plan_for(&self.layout, self.sc.strategy, self.pec.k_snapshot);
                self.event(None, "dynamic_k", format!("k {} -> {k}", state.current_k));
            }
            self.dyn_k = Some(next);
        }
        self.k_trace.push(self.pec.k_persist);

        self.faults.push(FaultRecord {
            iteration,
            time: self.now,
            nodes,
            rewind_to: rewind,
            lost_iterations,
            restored,
            lost_tokens,
            plt_added,
            units_from_memory: from_memory,
            version_skew: skew,
            k_after: self.pec.k_persist,
        });
        Ok(rewind)
    }

    /// Runs the whole scenario.
    pub fn run(mut self) -> Result<SimReport, SimError> {
        let sc = self.sc;
        let mut i = 0;
        while i < sc.i_total {
            let it = i + 1;
            self.advance_to(self.now + self.fb)?;
            if let Some(s) = &self.snapshot {
                let (done, record) = (s.done_at, s.record);
                let stall = done.saturating_sub(self.now);
                self.advance_to(done)?;
                if stall > 0 {
                    self.checkpoints[record].stall_ticks += stall;
                    self.o_save += stall;
                    self.event(None, "stall", format!("{stall}us waiting for snapshot"));
                }
            }
            self.advance_to(self.now + self.upd)?;
            let counts = route_tokens(it, sc);
            self.ledger.absorb(it, &counts);
            for (idx, &t) in counts.iter().enumerate() {
                let id = ExpertId::new(idx / self.layout.num_experts(), idx % self.layout.num_experts());
                self.snap_counters.add(id, t);
                self.persist_counters.add(id, t);
            }
            self.executed += 1;
            i = it;
            if let Some(nodes) = self.due_fault(it) {
                i = self.recover(it, nodes)?;
                continue;
            }
            if it % sc.i_ckpt == 0 {
                self.checkpoint(it)?;
            }
        }
        // The last snapshot has no following forward/backward pass to hide
        // behind; charge what it would have stalled.
        if let Some(s) = &self.snapshot {
            let (done, record) = (s.done_at, s.record);
            let stall = (done - self.now).saturating_sub(self.fb);
            if stall > 0 {
                self.checkpoints[record].stall_ticks += stall;
                self.o_save += stall;
                self.event(None, "stall", format!("{stall}us final snapshot"));
            }
            self.now += stall;
        }
        let end = self.now;
        // Let outstanding work finish so persisted flags are final.
        while self.snapshot.is_some() || self.persist.is_some() {
            let next = [&self.snapshot, &self.persist]
                .into_iter()
                .flatten()
                .map(|f| f.done_at)
                .min()
                .expect("work outstanding");
            self.advance_to(next)?;
        }
        Ok(self.finish(end))
    }

    fn finish(self, end: u64) -> SimReport {
        let iteration_ticks = self.fb + self.upd;
        let o_ckpt = self.o_save + self.o_restart + self.o_lost;
        let max_persist = self.checkpoints.iter().map(|c| c.persist_ticks).max().unwrap_or(0);
        let plan_bottlenecks = self
            .plan
            .phases
            .iter()
            .map(|p| {
                let (rank, bytes) = bottleneck_of(&p.workload_bytes);
                PhaseBottleneck {
                    phase: p.index,
                    rank,
                    bytes,
                }
            })
            .collect();
        SimReport {
            strategy: self.sc.strategy,
            mode: self.sc.mode,
            i_ckpt: self.sc.i_ckpt,
            i_total: self.sc.i_total,
            iteration_ticks,
            fb_ticks: self.fb,
            end_time_ticks: end,
            iterations_executed: self.executed,
            o_save_ticks: self.o_save,
            o_restart_ticks: self.o_restart,
            o_lost_ticks: self.o_lost,
            o_lost_iterations: self.o_lost_iterations,
            o_ckpt_ticks: o_ckpt,
            o_save_s: to_seconds(self.o_save),
            o_restart_s: to_seconds(self.o_restart),
            o_lost_s: to_seconds(self.o_lost),
            o_ckpt_s: to_seconds(o_ckpt),
            plt: PltSummary {
                per_layer: self.ledger.plt_per_layer(),
                lost_tokens_per_layer: self.ledger.lost_per_layer().to_vec(),
                denominator: self.ledger.denominator(),
                average: self.ledger.plt(),
            },
            max_version_skew: self.faults.iter().map(|f| f.version_skew).max().unwrap_or(0),
            faults: self.faults,
            checkpoints: self.checkpoints,
            plan_bottlenecks,
            min_feasible_i_ckpt: max_persist.div_ceil(iteration_ticks).max(1),
            k_trace: self.k_trace,
            timeline: self.timeline,
        }
    }
}

/// Runs `scenario` to completion.
pub fn run(scenario: &Scenario) -> Result<SimReport, SimError> {
    Simulator::new(scenario)?.run()
}

/// Per-rank snapshot workload of the buffers currently held, for inspection.
pub fn held_workloads(engine: &CheckpointEngine, ranks: usize) -> Vec<Vec<u64>> {
    engine
        .buffers
        .buffers
        .iter()
        .map(|b| buffer_workload(b, ranks, false))
        .collect()
}
