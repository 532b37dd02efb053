//! Training objectives: next-token cross-entropy and the trajectory
//! smoothness penalty in its three sampling flavors.
//!
//! The smoothness term averages 1 - cos(z_r - z_s, z_t - z_r) over index
//! triples s < r < t. The flavors differ only in where the triples come
//! from: consecutive step boundaries, random step boundaries, or random
//! (non-padding) token positions. Every flavor is differentiable through
//! the hidden states via the tape, and each has a plain-value twin used by
//! analysis code; the two agree bit for bit because they share kernels and
//! summation order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::experiment::GridVariant;
use crate::rng;
use crate::tensor::math;
use crate::tensor::{Tape, TensorError, Value};
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error("frozen variant is not trainable")]
    FrozenVariant,
    #[error("tensor op failed: {0}")]
    Tensor(#[from] TensorError),
}

/// Which positions the smoothness triples are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    None,
    RandomToken,
    RandomStep,
    ConsecutiveStep,
}

/// Weights and sampling knobs for the combined objective.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight on the smoothness term.
    pub beta: f64,
    /// Additive stabilizer in the cosine denominator.
    pub epsilon: f64,
    /// Triples per sequence for the random strategies; None means K-1,
    /// matching the triple count of the consecutive strategy.
    pub q: Option<usize>,
    pub sampler_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 1.0, epsilon: 1e-8, q: None, sampler_seed: 0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta >= 0.0) {
            return Err(LossError::BadConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(LossError::BadConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.q == Some(0) {
            return Err(LossError::BadConfig("q must be >= 1".into()));
        }
        Ok(())
    }
}

/// A smoothness loss attached to the tape, with bookkeeping.
pub struct StpTerms {
    pub loss: Value,
    pub terms: usize,
    /// Triples where a displacement had zero norm; their cosine collapses
    /// to ~0 via the epsilon denominator (term ~1) instead of a NaN.
    pub degenerate: usize,
}

/// Plain-value smoothness loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StpValue {
    pub value: f64,
    pub terms: usize,
    pub degenerate: usize,
}

// ── next-token loss ────────────────────────────────────────────────────────

/// Mean cross-entropy of position t's logits against token t+1, skipping
/// positions whose target is the padding token (and the final position,
/// which has no target).
pub fn ntp_loss_on(
    tape: &mut Tape,
    logits: Value,
    tokens: &[u32],
    pad_token: u32,
) -> Result<Value, TensorError> {
    let t_len = tokens.len();
    let mut targets = vec![0usize; t_len];
    let mut mask = vec![false; t_len];
    for t in 0..t_len.saturating_sub(1) {
        targets[t] = tokens[t + 1] as usize;
        mask[t] = tokens[t + 1] != pad_token;
    }
    tape.cross_entropy(logits, &targets, &mask)
}

// ── triple sampling ────────────────────────────────────────────────────────

fn triple_count(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

fn all_triples(n: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(triple_count(n));
    for s in 0..n {
        for r in s + 1..n {
            for t in r + 1..n {
                out.push((s, r, t));
            }
        }
    }
    out
}

/// Draws `q` distinct increasing triples over 0..n uniformly; returns every
/// triple (in lexicographic order) when q covers them all.
pub fn sample_triples(n: usize, q: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let total = triple_count(n);
    if total == 0 {
        return vec![];
    }
    if q >= total {
        return all_triples(n);
    }
    if q * 2 >= total {
        // dense: partial shuffle of the full enumeration
        let mut all = all_triples(n);
        for i in 0..q {
            let j = rng.gen_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(q);
        return all;
    }
    // sparse: rejection-sample sorted triples, deduplicating
    let mut out: Vec<(usize, usize, usize)> = Vec::with_capacity(q);
    while out.len() < q {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        if a == b || b == c || a == c {
            continue;
        }
        let mut t = [a, b, c];
        t.sort_unstable();
        let triple = (t[0], t[1], t[2]);
        if !out.contains(&triple) {
            out.push(triple);
        }
    }
    out
}

// ── shared cores ───────────────────────────────────────────────────────────

/// Tape-level mean of 1 - cos over the given triples of anchor rows.
fn stp_triples_on(
    tape: &mut Tape,
    hidden: Value,
    anchors: &[usize],
    triples: &[(usize, usize, usize)],
    epsilon: f64,
) -> Result<StpTerms, TensorError> {
    let mut terms = Vec::with_capacity(triples.len());
    let mut degenerate = 0usize;
    for &(s, r, t) in triples {
        let zs = tape.gather_rows(hidden, &[anchors[s]])?;
        let zr = tape.gather_rows(hidden, &[anchors[r]])?;
        let zt = tape.gather_rows(hidden, &[anchors[t]])?;
        let a = tape.sub(zr, zs)?;
        let b = tape.sub(zt, zr)?;
        if math::l2_norm(tape.data(a)) == 0.0 || math::l2_norm(tape.data(b)) == 0.0 {
            degenerate += 1;
        }
        let c = tape.cosine_sim(a, b, epsilon)?;
        terms.push(tape.affine(c, -1.0, 1.0));
    }
    let stacked = tape.stack_scalars(&terms)?;
    let loss = tape.mean_all(stacked);
    Ok(StpTerms { loss, terms: triples.len(), degenerate })
}

/// Plain-value twin of `stp_triples_on`, same kernels and summation order.
fn stp_triples_plain(
    rows: &[f64],
    dim: usize,
    anchors: &[usize],
    triples: &[(usize, usize, usize)],
    epsilon: f64,
) -> StpValue {
    let row = |i: usize| &rows[anchors[i] * dim..anchors[i] * dim + dim];
    let mut sum = 0.0;
    let mut degenerate = 0usize;
    for &(s, r, t) in triples {
        let (zs, zr, zt) = (row(s), row(r), row(t));
        let a: Vec<f64> = (0..dim).map(|j| zr[j] - zs[j]).collect();
        let b: Vec<f64> = (0..dim).map(|j| zt[j] - zr[j]).collect();
        let (na, nb) = (math::l2_norm(&a), math::l2_norm(&b));
        if na == 0.0 || nb == 0.0 {
            degenerate += 1;
        }
        let c = math::dot(&a, &b) / (na * nb + epsilon);
        sum += 1.0 - c;
    }
    StpValue { value: sum / triples.len() as f64, terms: triples.len(), degenerate }
}

fn consecutive_triples(n_anchors: usize) -> Vec<(usize, usize, usize)> {
    (1..n_anchors - 1).map(|k| (k - 1, k, k + 1)).collect()
}

// ── tape-level losses (training path) ──────────────────────────────────────

/// Smoothness over consecutive step boundaries: mean over k = 1..K-1 of
/// 1 - cos(z_k - z_{k-1}, z_{k+1} - z_k). None when K < 2.
pub fn stp_consecutive_on(
    tape: &mut Tape,
    hidden: Value,
    step_positions: &[usize],
    epsilon: f64,
) -> Result<Option<StpTerms>, TensorError> {
    if step_positions.len() < 3 {
        return Ok(None);
    }
    let triples = consecutive_triples(step_positions.len());
    stp_triples_on(tape, hidden, step_positions, &triples, epsilon).map(Some)
}

/// Smoothness over `q` random triples of step boundaries. None when K < 2.
pub fn stp_random_step_on(
    tape: &mut Tape,
    hidden: Value,
    step_positions: &[usize],
    q: usize,
    rng: &mut ChaCha8Rng,
    epsilon: f64,
) -> Result<Option<StpTerms>, TensorError> {
    if step_positions.len() < 3 {
        return Ok(None);
    }
    let triples = sample_triples(step_positions.len(), q, rng);
    stp_triples_on(tape, hidden, step_positions, &triples, epsilon).map(Some)
}

/// Smoothness over `q` random triples of (non-padding) token positions.
/// None when fewer than three such positions exist.
pub fn stp_random_token_on(
    tape: &mut Tape,
    hidden: Value,
    token_positions: &[usize],
    q: usize,
    rng: &mut ChaCha8Rng,
    epsilon: f64,
) -> Result<Option<StpTerms>, TensorError> {
    if token_positions.len() < 3 {
        return Ok(None);
    }
    let triples = sample_triples(token_positions.len(), q, rng);
    stp_triples_on(tape, hidden, token_positions, &triples, epsilon).map(Some)
}

// ── plain-value losses (analysis path) ─────────────────────────────────────

/// Plain smoothness over consecutive boundaries of a trajectory.
pub fn stp_consecutive(traj: &Trajectory, epsilon: f64) -> Option<StpValue> {
    if traj.k() < 2 {
        return None;
    }
    let anchors: Vec<usize> = (0..=traj.k()).collect();
    let triples = consecutive_triples(anchors.len());
    Some(stp_triples_plain(traj.points(), traj.dim(), &anchors, &triples, epsilon))
}

/// Plain smoothness over random step-boundary triples.
pub fn stp_random_step(traj: &Trajectory, q: usize, seed: u64, epsilon: f64) -> Option<StpValue> {
    if traj.k() < 2 {
        return None;
    }
    let anchors: Vec<usize> = (0..=traj.k()).collect();
    let mut r = rng::stream(&[seed]);
    let triples = sample_triples(anchors.len(), q, &mut r);
    Some(stp_triples_plain(traj.points(), traj.dim(), &anchors, &triples, epsilon))
}

/// Plain smoothness over random token-position triples of a hidden-state
/// matrix (`positions` lists the usable rows).
pub fn stp_random_token(
    hidden: &[f64],
    dim: usize,
    positions: &[usize],
    q: usize,
    seed: u64,
    epsilon: f64,
) -> Option<StpValue> {
    if positions.len() < 3 {
        return None;
    }
    let mut r = rng::stream(&[seed]);
    let triples = sample_triples(positions.len(), q, &mut r);
    Some(stp_triples_plain(hidden, dim, positions, &triples, epsilon))
}

// ── combined objective ─────────────────────────────────────────────────────

/// One training step's loss, with components split out for logging.
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Value,
    pub ntp: Option<Value>,
    pub stp: Option<Value>,
    pub total_value: f64,
    pub ntp_value: Option<f64>,
    pub stp_value: Option<f64>,
    pub stp_terms: usize,
    pub degenerate_pairs: usize,
}

/// Builds the objective for one sequence under the given grid variant:
/// NTP, beta-weighted smoothness, or their sum. Returns None when the
/// variant's objective is undefined for this sequence (smoothness-only with
/// K < 2). The random strategies derive their triples from
/// (sampler_seed, seq_index, epoch) so data order can't change them.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    variant: GridVariant,
    logits: Value,
    hidden: Value,
    tokens: &[u32],
    step_positions: &[usize],
    pad_token: u32,
    seq_index: u64,
    epoch: u64,
    cfg: &LossConfig,
) -> Result<Option<LossBreakdown>, LossError> {
    cfg.validate()?;
    if !variant.trains() {
        return Err(LossError::FrozenVariant);
    }
    let k = step_positions.len().saturating_sub(1);
    let default_q = k.saturating_sub(1).max(1);
    let q = cfg.q.unwrap_or(default_q);

    let stp = match variant.strategy() {
        Strategy::None => None,
        Strategy::ConsecutiveStep => {
            stp_consecutive_on(tape, hidden, step_positions, cfg.epsilon)?
        }
        Strategy::RandomStep => {
            let mut r = rng::stream(&[cfg.sampler_seed, seq_index, epoch]);
            stp_random_step_on(tape, hidden, step_positions, q, &mut r, cfg.epsilon)?
        }
        Strategy::RandomToken => {
            let positions: Vec<usize> =
                (0..tokens.len()).filter(|&t| tokens[t] != pad_token).collect();
            let mut r = rng::stream(&[cfg.sampler_seed, seq_index, epoch]);
            stp_random_token_on(tape, hidden, &positions, q, &mut r, cfg.epsilon)?
        }
    };
    let ntp = if variant.uses_ntp() {
        Some(ntp_loss_on(tape, logits, tokens, pad_token)?)
    } else {
        None
    };

    let total = match (&ntp, &stp) {
        (Some(n), Some(s)) => {
            let scaled = tape.affine(s.loss, cfg.beta, 0.0);
            Some(tape.add(*n, scaled)?)
        }
        (Some(n), None) => Some(*n),
        (None, Some(s)) => Some(tape.affine(s.loss, cfg.beta, 0.0)),
        (None, None) => None,
    };
    let Some(total) = total else {
        return Ok(None);
    };

    Ok(Some(LossBreakdown {
        total,
        ntp,
        stp: stp.as_ref().map(|s| s.loss),
        total_value: tape.scalar_value(total),
        ntp_value: ntp.map(|n| tape.scalar_value(n)),
        stp_value: stp.as_ref().map(|s| tape.scalar_value(s.loss)),
        stp_terms: stp.as_ref().map_or(0, |s| s.terms),
        degenerate_pairs: stp.as_ref().map_or(0, |s| s.degenerate),
    }))
}
