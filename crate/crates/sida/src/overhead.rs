//! Wall-clock share of inference spent computing router scores and picking
//! experts.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sida_core::model::{MoEModel, Routing, SequenceBatch};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadSample {
    pub num_experts: usize,
    /// Mean seconds per forward pass.
    pub total_s: f64,
    /// Mean seconds per forward pass inside routing and selection.
    pub selection_s: f64,
}

impl OverheadSample {
    pub fn fraction(&self) -> f64 {
        self.selection_s / self.total_s
    }
}

/// Runs `batch` through the router-mode forward `repetitions` times and
/// splits the time between selection and everything else.
pub fn selection_overhead_probe(model: &MoEModel, batch: &SequenceBatch, repetitions: usize) -> Result<OverheadSample> {
    if repetitions == 0 {
        return Err(Error::Config("at least one repetition is required".into()));
    }
    let mut total = Duration::ZERO;
    let mut selection = Duration::ZERO;
    for _ in 0..repetitions {
        let start = Instant::now();
        let mut state = model.begin(batch)?;
        for _ in 0..model.config().num_layers {
            let mixed = model.mix_next(&state)?;
            let t = Instant::now();
            let entries = model.select_layer(&mixed, &state, Routing::Router)?;
            selection += t.elapsed();
            model.apply_layer(&mut state, mixed, &entries, None)?;
        }
        std::hint::black_box(model.finish(&state)?);
        total += start.elapsed();
    }
    let n = repetitions as f64;
    Ok(OverheadSample {
        num_experts: model.config().num_experts,
        total_s: total.as_secs_f64() / n,
        selection_s: selection.as_secs_f64() / n,
    })
}
