//! Token accounting for the proportion of lost tokens.
//!
//! Each expert keeps its lineage: the runs of iterations whose tokens its
//! current state has absorbed, cut at every checkpoint. Restoring an expert
//! to a copy saved at iteration `r` drops the runs that start after `r`; the
//! tokens in them are lost. Replayed iterations are absorbed again as new
//! runs, and the denominator counts scheduled tokens once.

use serde::{Deserialize, Serialize};

use crate::topology::ExpertId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PltLedger {
    layers: usize,
    experts: usize,
    lineage: Vec<Vec<Segment>>,
    delivered: Vec<u64>,
    lost: Vec<u64>,
    denominator: u64,
    cut: bool,
}

impl PltLedger {
    /// `denominator` is `T · TopK` over the whole run, per layer.
    pub fn new(layers: usize, experts: usize, denominator: u64) -> Self {
        PltLedger {
            layers,
            experts,
            lineage: vec![Vec::new(); layers * experts],
            delivered: vec![0; layers * experts],
            lost: vec![0; layers],
            denominator,
            cut: true,
        }
    }

    fn idx(&self, id: ExpertId) -> usize {
        id.layer * self.experts + id.expert
    }

    /// Records the tokens of `iteration`, flattened `[layer][expert]`.
    pub fn absorb(&mut self, iteration: u64, counts: &[u64]) {
        for (i, &tokens) in counts.iter().enumerate() {
            self.delivered[i] += tokens;
            let line = &mut self.lineage[i];
            match line.last_mut() {
                Some(seg) if !self.cut => {
                    debug_assert_eq!(seg.end + 1, iteration);
                    seg.end = iteration;
                    seg.tokens += tokens;
                }
                _ => line.push(Segment {
                    start: iteration,
                    end: iteration,
                    tokens,
                }),
            }
        }
        self.cut = false;
    }

    /// Starts new runs at the next absorbed iteration; called at every
    /// checkpoint and every restore.
    pub fn cut(&mut self) {
        self.cut = true;
    }

    /// Rolls expert `id` back to its state after iteration `r` and returns
    /// the tokens lost.
    pub fn restore(&mut self, id: ExpertId, r: u64) -> u64 {
        let i = self.idx(id);
        let line = &mut self.lineage[i];
        let mut lost = 0;
        while line.last().is_some_and(|s| s.start > r) {
            lost += line.pop().expect("checked").tokens;
        }
        debug_assert!(line.last().is_none_or(|s| s.end <= r), "restore point inside a run");
        self.lost[id.layer] += lost;
        lost
    }

    /// Tokens absorbed after iteration `label`.
    pub fn tokens_after(&self, id: ExpertId, label: u64) -> u64 {
        self.lineage[self.idx(id)]
            .iter()
            .rev()
            .take_while(|s| s.start > label)
            .map(|s| s.tokens)
            .sum()
    }

    pub fn lineage(&self, id: ExpertId) -> &[Segment] {
        &self.lineage[self.idx(id)]
    }

    pub fn delivered(&self, id: ExpertId) -> u64 {
        self.delivered[self.idx(id)]
    }

    pub fn lost_per_layer(&self) -> &[u64] {
        &self.lost
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    pub fn plt_per_layer(&self) -> Vec<f64> {
        self.lost
            .iter()
            .map(|&l| l as f64 / self.denominator as f64)
            .collect()
    }

    /// Mean over layers of lost / (T · TopK).
    pub fn plt(&self) -> f64 {
        plt_from_lost(&self.lost, self.denominator)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
}

/// Mean over layers of `lost[l] / denominator`, summed in layer order.
pub fn plt_from_lost(lost: &[u64], denominator: u64) -> f64 {
    let sum: f64 = lost.iter().map(|&l| l as f64 / denominator as f64).sum();
    sum / lost.len() as f64
}
