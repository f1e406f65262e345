//! Two-tier expert residency: a byte-budgeted fast tier in front of an
//! unbounded slow tier, with FIFO eviction and a linear transfer cost model.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::vec::Vec;

use crate::error::ensure;
use crate::model::MoEConfig;
use crate::predictor::ExpertHashTable;
use crate::{Error, Result};

/// `(layer, expert)`; the unit of placement.
pub type ExpertKey = (usize, usize);

pub const DEFAULT_BANDWIDTH: f64 = 16e9;
pub const DEFAULT_LATENCY: f64 = 50e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryBudget {
    pub fast_tier_bytes: u64,
    pub bandwidth_bytes_per_s: f64,
    pub per_transfer_latency_s: f64,
}

impl MemoryBudget {
    /// Budget with the default 16 GB/s link and 50 µs per transfer.
    pub fn new(fast_tier_bytes: u64) -> Self {
        Self {
            fast_tier_bytes,
            bandwidth_bytes_per_s: DEFAULT_BANDWIDTH,
            per_transfer_latency_s: DEFAULT_LATENCY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.bandwidth_bytes_per_s.is_finite() && self.bandwidth_bytes_per_s > 0.0, || {
            "bandwidth must be positive".into()
        })?;
        ensure(self.per_transfer_latency_s.is_finite() && self.per_transfer_latency_s >= 0.0, || {
            "per-transfer latency must be non-negative".into()
        })
    }

    /// Simulated seconds to move `count` experts totalling `bytes`.
    pub fn transfer_seconds(&self, bytes: u64, count: usize) -> f64 {
        bytes as f64 / self.bandwidth_bytes_per_s + self.per_transfer_latency_s * count as f64
    }
}

/// What currently sits in the fast tier, in arrival order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResidencyState {
    resident: BTreeMap<ExpertKey, u64>,
    fifo: VecDeque<ExpertKey>,
    used_bytes: u64,
}

impl ResidencyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn contains(&self, key: ExpertKey) -> bool {
        self.resident.contains_key(&key)
    }

    /// Residents, oldest first.
    pub fn fifo_order(&self) -> impl Iterator<Item = ExpertKey> + '_ {
        self.fifo.iter().copied()
    }

    pub fn resident(&self) -> impl Iterator<Item = (ExpertKey, u64)> + '_ {
        self.resident.iter().map(|(&k, &b)| (k, b))
    }

    fn load(&mut self, key: ExpertKey, bytes: u64, budget: u64) -> Result<()> {
        if self.resident.contains_key(&key) {
            return Err(Error::PlanMismatch(format!("load of resident expert {key:?}")));
        }
        if self.used_bytes + bytes > budget {
            return Err(Error::PlanMismatch(format!("loading {key:?} would exceed the budget")));
        }
        self.resident.insert(key, bytes);
        self.fifo.push_back(key);
        self.used_bytes += bytes;
        Ok(())
    }

    fn evict(&mut self, key: ExpertKey) -> Result<()> {
        let bytes = self
            .resident
            .remove(&key)
            .ok_or_else(|| Error::PlanMismatch(format!("eviction of non-resident expert {key:?}")))?;
        self.fifo.retain(|&k| k != key);
        self.used_bytes -= bytes;
        Ok(())
    }

    /// Executes `plan` step by step. On error the state is left untouched.
    pub fn apply(&mut self, plan: &PlacementPlan) -> Result<f64> {
        let mut next = self.clone();
        for step in &plan.steps {
            match step.action {
                Action::Evict => next.evict(step.key)?,
                Action::Load => next.load(step.key, step.bytes, plan.fast_tier_bytes)?,
            }
        }
        *self = next;
        Ok(plan.estimated_transfer_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Evict,
    Load,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanStep {
    /// Layer whose forward pass this step prepares.
    pub phase: usize,
    pub action: Action,
    pub key: ExpertKey,
    pub bytes: u64,
}

/// Ordered evictions and loads, grouped by the layer they serve. Within a
/// phase every eviction precedes every load.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub steps: Vec<PlanStep>,
    pub estimated_transfer_s: f64,
    /// Simulated transfer time of each phase's loads.
    pub phase_transfer_s: Vec<f64>,
    fast_tier_bytes: u64,
}

impl PlacementPlan {
    pub fn loads(&self) -> Vec<ExpertKey> {
        self.keys(Action::Load)
    }

    pub fn evictions(&self) -> Vec<ExpertKey> {
        self.keys(Action::Evict)
    }

    fn keys(&self, action: Action) -> Vec<ExpertKey> {
        self.steps.iter().filter(|s| s.action == action).map(|s| s.key).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn loaded_bytes(&self) -> u64 {
        self.steps.iter().filter(|s| s.action == Action::Load).map(|s| s.bytes).sum()
    }

    pub fn num_phases(&self) -> usize {
        self.phase_transfer_s.len()
    }

    /// The steps of one phase as a plan of their own, so residency can follow
    /// a forward pass layer by layer.
    pub fn phase(&self, phase: usize) -> PlacementPlan {
        let secs = self.phase_transfer_s.get(phase).copied().unwrap_or(0.0);
        PlacementPlan {
            steps: self.steps.iter().filter(|s| s.phase == phase).copied().collect(),
            estimated_transfer_s: secs,
            phase_transfer_s: alloc::vec![secs],
            fast_tier_bytes: self.fast_tier_bytes,
        }
    }
}

/// Plans residency for a batch needing `required[layer]` experts, each of
/// `expert_bytes`.
///
/// Layers are prepared in order. Room for layer `ℓ` comes first from the
/// oldest residents the batch does not need at all, then from the oldest
/// residents needed only by layers before `ℓ`, and as a last resort from
/// residents of later layers, which are then reloaded in their own phase.
/// A batch is unservable only if a single layer's experts exceed the budget.
pub fn plan_required(
    required: &[Vec<usize>],
    state: &ResidencyState,
    budget: &MemoryBudget,
    expert_bytes: u64,
) -> Result<PlacementPlan> {
    budget.validate()?;
    let cap = budget.fast_tier_bytes;
    let needed: BTreeSet<ExpertKey> =
        required.iter().enumerate().flat_map(|(l, es)| es.iter().map(move |&e| (l, e))).collect();
    if expert_bytes > cap {
        if let Some(&(layer, expert)) = needed.iter().next() {
            return Err(Error::Unservable { layer, expert, bytes: expert_bytes, budget: cap });
        }
    }
    let mut sim = state.clone();
    let mut steps = Vec::new();
    let mut phase_transfer_s = Vec::with_capacity(required.len());
    for (phase, experts) in required.iter().enumerate() {
        let mut missing: Vec<usize> = experts.iter().copied().filter(|&e| !sim.contains((phase, e))).collect();
        missing.sort_unstable();
        missing.dedup();
        let want = missing.len() as u64 * expert_bytes;
        let evictable = |k: &ExpertKey, pass: u8| match pass {
            0 => !needed.contains(k),
            1 => needed.contains(k) && k.0 < phase,
            _ => k.0 > phase,
        };
        for pass in 0..3 {
            while sim.used_bytes + want > cap {
                let Some(victim) = sim.fifo.iter().copied().find(|k| evictable(k, pass)) else { break };
                let bytes = sim.resident[&victim];
                sim.evict(victim)?;
                steps.push(PlanStep { phase, action: Action::Evict, key: victim, bytes });
            }
        }
        if sim.used_bytes + want > cap {
            let expert = missing[((cap - sim.used_bytes.min(cap)) / expert_bytes.max(1)) as usize];
            return Err(Error::Unservable { layer: phase, expert, bytes: expert_bytes, budget: cap });
        }
        for &e in &missing {
            sim.load((phase, e), expert_bytes, cap)?;
            steps.push(PlanStep { phase, action: Action::Load, key: (phase, e), bytes: expert_bytes });
        }
        phase_transfer_s.push(budget.transfer_seconds(want, missing.len()));
    }
    Ok(PlacementPlan {
        steps,
        estimated_transfer_s: phase_transfer_s.iter().sum(),
        phase_transfer_s,
        fast_tier_bytes: cap,
    })
}

/// Plans residency for the experts named in `table`.
pub fn plan_placement(
    table: &ExpertHashTable,
    state: &ResidencyState,
    budget: &MemoryBudget,
    expert_bytes: u64,
) -> Result<PlacementPlan> {
    plan_required(&table.required_experts(), state, budget, expert_bytes)
}

/// Applies `plan` to a copy of `state`, returning it and the simulated seconds.
pub fn apply_plan(state: &ResidencyState, plan: &PlacementPlan) -> Result<(ResidencyState, f64)> {
    let mut next = state.clone();
    let elapsed = next.apply(plan)?;
    Ok((next, elapsed))
}

/// Share of resident bytes belonging to `activated` experts.
pub fn effective_utilization(state: &ResidencyState, activated: &BTreeSet<ExpertKey>) -> Result<f64> {
    let mut bytes = 0u64;
    for k in activated {
        bytes += *state
            .resident
            .get(k)
            .ok_or_else(|| Error::Contract(format!("activated expert {k:?} is not resident")))?;
    }
    if state.used_bytes == 0 {
        return Err(Error::Degenerate("no experts resident".into()));
    }
    Ok(bytes as f64 / state.used_bytes as f64)
}

/// `1 − required / total` expert bytes for one batch.
pub fn memory_reduction(table: &ExpertHashTable, config: &MoEConfig) -> Result<f64> {
    ensure(table.num_layers() == config.num_layers, || {
        format!("table has {} layers, model {}", table.num_layers(), config.num_layers)
    })?;
    let required: usize = table.required_experts().iter().map(Vec::len).sum();
    Ok(1.0 - (required as u64 * config.expert_bytes()) as f64 / config.total_expert_bytes() as f64)
}

#[cfg(test)]
mod tests;
