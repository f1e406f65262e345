//! Sequence-level sparsity probes: how many other positions can flip a
//! token's expert choice, estimated by corrupting the sequence.

use alloc::format;
use alloc::vec::Vec;

use crate::error::ensure;
use crate::model::MoEModel;
use crate::numkit::Rng;
use crate::{Error, Result};

/// One point of a probe curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityProbe {
    pub len: usize,
    pub p: f64,
    pub p_hat: f64,
    pub c_hat: usize,
}

/// Number of positions corrupted at fraction `p` of a length-`len`
/// sequence. Position `i` itself is never touched, so at most `len − 1`.
pub fn corrupted_count(len: usize, p: f64) -> usize {
    (libm::floor(p * len as f64) as usize).min(len.saturating_sub(1))
}

/// Probability that corrupting `⌊pL⌋` of the other `L − 1` positions hits
/// at least one of `c` critical ones: `1 − C(L−1−c, m) / C(L−1, m)`.
pub fn expected_change_prob(len: usize, c: usize, p: f64) -> Result<f64> {
    ensure(len >= 1, || "sequence length must be positive".into())?;
    ensure(c < len, || format!("c = {c} exceeds L − 1 = {}", len - 1))?;
    ensure(p > 0.0 && p <= 1.0, || format!("p = {p} outside (0, 1]"))?;
    let m = corrupted_count(len, p);
    let others = len - 1;
    if m > others - c {
        return Ok(1.0);
    }
    // C(n−c, m)/C(n, m) = Π_{j<m} (n−c−j)/(n−j)
    let mut keep = 1.0;
    for j in 0..m {
        keep *= (others - c - j) as f64 / (others - j) as f64;
    }
    Ok(1.0 - keep)
}

/// Integer `c ∈ [0, L−1]` whose expected curve is closest in squared error
/// to the measured one; ties go to the smaller `c`.
pub fn estimate_c(p_grid: &[f64], p_hat: &[f64], len: usize) -> Result<usize> {
    ensure(p_grid.len() >= 2, || "need at least two grid points".into())?;
    ensure(p_grid.len() == p_hat.len(), || "grid and measurements differ in length".into())?;
    let mut best = (0, f64::INFINITY);
    for c in 0..len {
        let mut sse = 0.0;
        for (&p, &h) in p_grid.iter().zip(p_hat) {
            let d = expected_change_prob(len, c, p)? - h;
            sse += d * d;
        }
        if sse < best.1 {
            best = (c, sse);
        }
    }
    Ok(best.0)
}

/// Replaces `⌊pL⌋` uniformly chosen positions other than `i` with tokens
/// that differ from both the original and the token at `i`.
pub fn corrupt_tokens(tokens: &[u32], i: usize, p: f64, vocab_size: usize, rng: &mut Rng) -> Result<Vec<u32>> {
    let len = tokens.len();
    ensure(len >= 2, || "corruption needs at least two tokens".into())?;
    ensure(i < len, || format!("position {i} outside sequence of {len}"))?;
    ensure(vocab_size >= 3, || format!("vocabulary of {vocab_size} cannot supply distinct replacements"))?;
    ensure(p > 0.0 && p <= 1.0, || format!("p = {p} outside (0, 1]"))?;
    let mut out = tokens.to_vec();
    let anchor = tokens[i];
    for slot in rng.sample_indices(len - 1, corrupted_count(len, p)) {
        let pos = if slot >= i { slot + 1 } else { slot };
        let orig = tokens[pos];
        let banned = if orig == anchor { 1 } else { 2 };
        let mut pick = rng.below(vocab_size - banned) as u32;
        // step over the banned values in increasing order
        let (lo, hi) = if orig < anchor { (orig, anchor) } else { (anchor, orig) };
        if pick >= lo {
            pick += 1;
        }
        if banned == 2 && pick >= hi {
            pick += 1;
        }
        out[pos] = pick;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionCorruption {
    Permuted(Vec<u32>),
    /// No shuffle displaced every chosen token within the retry limit.
    Skipped,
}

pub const DERANGEMENT_TRIES: usize = 100;

/// Shuffles the tokens at `⌊pL⌋` chosen positions other than `i`, redrawing
/// until no chosen position keeps its token.
pub fn corrupt_positions(tokens: &[u32], i: usize, p: f64, rng: &mut Rng) -> Result<PositionCorruption> {
    let len = tokens.len();
    ensure(i < len, || format!("position {i} outside sequence of {len}"))?;
    ensure(p > 0.0 && p <= 1.0, || format!("p = {p} outside (0, 1]"))?;
    let m = corrupted_count(len, p);
    ensure(m >= 2, || format!("⌊pL⌋ = {m}; position swaps need at least two"))?;
    let chosen: Vec<usize> =
        rng.sample_indices(len - 1, m).into_iter().map(|s| if s >= i { s + 1 } else { s }).collect();
    let original: Vec<u32> = chosen.iter().map(|&pos| tokens[pos]).collect();
    if original.iter().all(|&t| t == original[0]) {
        return Ok(PositionCorruption::Skipped);
    }
    let mut shuffled = original.clone();
    for _ in 0..DERANGEMENT_TRIES {
        rng.shuffle(&mut shuffled);
        if shuffled.iter().zip(&original).all(|(a, b)| a != b) {
            let mut out = tokens.to_vec();
            for (&pos, &t) in chosen.iter().zip(&shuffled) {
                out[pos] = t;
            }
            return Ok(PositionCorruption::Permuted(out));
        }
    }
    Ok(PositionCorruption::Skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    Token,
    Position,
}

/// Anything whose per-position expert choice can be probed.
pub trait SelectionModel {
    type Selection: PartialEq;
    fn selection(&self, tokens: &[u32], position: usize) -> Result<Self::Selection>;
}

/// Top-1 router choice of an MoE model at one layer.
pub struct RouterProbe<'a> {
    pub model: &'a MoEModel,
    pub layer: usize,
}

impl SelectionModel for RouterProbe<'_> {
    type Selection = usize;

    fn selection(&self, tokens: &[u32], position: usize) -> Result<usize> {
        Ok(self.model.top1_at_layer(tokens, self.layer)?[position])
    }
}

/// Model whose position `i` selection depends on its own token and exactly
/// the tokens at `critical[i]`; any change to those changes the selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSetModel {
    pub critical: Vec<Vec<usize>>,
}

impl CriticalSetModel {
    /// Plants `c` distinct critical positions for each of `len` positions.
    pub fn planted(len: usize, c: usize, rng: &mut Rng) -> Result<Self> {
        ensure(c < len, || format!("c = {c} needs at least {} positions", c + 1))?;
        let critical = (0..len)
            .map(|i| rng.sample_indices(len - 1, c).into_iter().map(|s| if s >= i { s + 1 } else { s }).collect())
            .collect();
        Ok(Self { critical })
    }
}

impl SelectionModel for CriticalSetModel {
    type Selection = Vec<u32>;

    fn selection(&self, tokens: &[u32], position: usize) -> Result<Vec<u32>> {
        let crit = self
            .critical
            .get(position)
            .ok_or_else(|| Error::Contract(format!("position {position} outside planted model")))?;
        let mut key = Vec::with_capacity(crit.len() + 1);
        key.push(tokens[position]);
        key.extend(crit.iter().map(|&j| tokens[j]));
        Ok(key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub p_hat: f64,
    /// Trials that produced a corrupted sequence.
    pub trials: usize,
    /// Position-mode trials abandoned because no derangement was found.
    pub skipped: usize,
}

/// Fraction of corruption trials that change position `i`'s selection.
#[allow(clippy::too_many_arguments)]
pub fn measure_p_hat<M: SelectionModel>(
    model: &M,
    tokens: &[u32],
    i: usize,
    p: f64,
    trials: usize,
    mode: CorruptionMode,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<ProbeOutcome> {
    ensure(trials > 0, || "at least one trial is required".into())?;
    let base = model.selection(tokens, i)?;
    let (mut changed, mut done, mut skipped) = (0usize, 0usize, 0usize);
    for _ in 0..trials {
        let corrupted = match mode {
            CorruptionMode::Token => corrupt_tokens(tokens, i, p, vocab_size, rng)?,
            CorruptionMode::Position => match corrupt_positions(tokens, i, p, rng)? {
                PositionCorruption::Permuted(t) => t,
                PositionCorruption::Skipped => {
                    skipped += 1;
                    continue;
                }
            },
        };
        done += 1;
        if model.selection(&corrupted, i)? != base {
            changed += 1;
        }
    }
    let p_hat = if done == 0 { 0.0 } else { changed as f64 / done as f64 };
    Ok(ProbeOutcome { p_hat, trials: done, skipped })
}

#[cfg(test)]
mod tests;
