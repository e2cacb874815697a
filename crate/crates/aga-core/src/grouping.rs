//! Bidirectional similarity grouping with EMA threshold gates.
//!
//! For one image-text pair this module builds the token-patch similarity
//! matrix, min-max normalizes each row, zeroes entries below the gate
//! threshold, renormalizes the survivors into alignment weights, and forms
//! group embeddings as the weighted combinations of the aligned rows. The
//! token-grouped direction runs on the raw matrix; the patch-grouped
//! direction runs on its transpose with the second gate's threshold.
//!
//! Gate thresholds are exponential moving averages of the batch-mean
//! normalized similarity. They are bookkeeping state, not parameters: no
//! gradient flows into or out of a threshold, and the sparsification mask is
//! a constant of the backward pass.

use alloc::vec::Vec;

use crate::error::Error;
use crate::tape::{Tape, Tensor};
use crate::Result;

/// One grouping direction's threshold state.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    sigma: f64,
    gamma: f64,
    step_count: u64,
    trajectory: Vec<(u64, f64)>,
}

impl GateState {
    /// New gate at `sigma0` with momentum `gamma`.
    pub fn new(sigma0: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sigma0) || !sigma0.is_finite() {
            return Err(Error::ThresholdOutOfRange { sigma: sigma0 });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::MomentumOutOfRange { gamma });
        }
        Ok(GateState { sigma: sigma0, gamma, step_count: 0, trajectory: Vec::new() })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// `(step, sigma)` pairs recorded by [`GateState::update`], strictly
    /// increasing in step.
    pub fn trajectory(&self) -> &[(u64, f64)] {
        &self.trajectory
    }

    /// One EMA step from a batch of normalized similarity matrices:
    /// `sigma <- gamma * sigma + (1 - gamma) * mean(all entries)`.
    ///
    /// Every entry across the batch counts equally (matrices of different
    /// sizes are pooled, not averaged per pair).
    pub fn update(&mut self, s_hat_batch: &[&[f64]]) -> Result<()> {
        let count: usize = s_hat_batch.iter().map(|m| m.len()).sum();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let total: f64 = s_hat_batch.iter().map(|m| m.iter().sum::<f64>()).sum();
        let mean = total / count as f64;
        self.sigma = self.gamma * self.sigma + (1.0 - self.gamma) * mean;
        self.step_count += 1;
        self.trajectory.push((self.step_count, self.sigma));
        Ok(())
    }

    /// Rebuild from checkpointed fields.
    pub fn restore(sigma: f64, gamma: f64, step_count: u64, trajectory: Vec<(u64, f64)>) -> Result<Self> {
        let mut g = GateState::new(sigma, gamma)?;
        g.step_count = step_count;
        g.trajectory = trajectory;
        Ok(g)
    }
}

/// Per-pair tensors produced by the grouping pipeline, both directions.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentState {
    /// Raw similarities, tokens by patches.
    pub s: Tensor,
    /// Row-normalized similarities in `[0, 1]`.
    pub s_hat: Tensor,
    /// Thresholded similarities.
    pub s_tilde: Tensor,
    /// Token-to-patch alignment weights; rows sum to one.
    pub alpha: Tensor,
    /// Normalized transposed similarities (patches by tokens).
    pub s_hat_v: Tensor,
    pub s_tilde_v: Tensor,
    /// Patch-to-token alignment weights.
    pub alpha_v: Tensor,
}

/// Group embeddings for one pair.
#[derive(Debug, Clone, Copy)]
pub struct GroupEmbeddings {
    /// Token-grouped visual embeddings, one per real token.
    pub tgv: Tensor,
    /// Patch-grouped language embeddings, one per patch.
    pub pgl: Tensor,
}

/// Raw inner products between token and patch embeddings:
/// `out[m][n] = tokens[m] . patches[n]`.
pub fn similarity_matrix(tape: &mut Tape, tokens: Tensor, patches: Tensor) -> Result<Tensor> {
    let (st, sp) = (tape.shape(tokens).to_vec(), tape.shape(patches).to_vec());
    if st.len() != 2 || sp.len() != 2 || st[1] != sp[1] {
        return Err(Error::ShapeMismatch { op: "similarity_matrix", lhs: st, rhs: sp });
    }
    let pt = tape.transpose(patches)?;
    tape.matmul(tokens, pt)
}

/// Zero out entries below `sigma`, keeping the rest. The survivors' mask is
/// constant in the backward pass. Because every row of a min-max normalized
/// matrix attains 1 at its maximum, each row keeps at least one entry for
/// any `sigma <= 1`.
pub fn sparsify(tape: &mut Tape, s_hat: Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) || !sigma.is_finite() {
        return Err(Error::ThresholdOutOfRange { sigma });
    }
    let mask: Vec<f64> = tape
        .value(s_hat)
        .iter()
        .map(|&v| if v >= sigma { 1.0 } else { 0.0 })
        .collect();
    tape.mul_mask(s_hat, &mask)
}

/// Row-normalize a sparsified matrix into weights that sum to one per row.
pub fn alignment_weights(tape: &mut Tape, s_tilde: Tensor) -> Result<Tensor> {
    let sums = tape.row_sum(s_tilde)?;
    for (row, &s) in tape.value(sums).iter().enumerate() {
        if s == 0.0 {
            return Err(Error::ZeroSumRow { row });
        }
    }
    tape.div_rows(s_tilde, sums)
}

/// Weighted combination of source rows: `out[j] = sum_k alpha[j][k] * source[k]`.
pub fn group_embed(tape: &mut Tape, alpha: Tensor, source: Tensor) -> Result<Tensor> {
    tape.matmul(alpha, source)
}

/// Full per-pair grouping pipeline in both directions, at fixed thresholds.
///
/// `tokens` must already be restricted to the pair's real tokens. Gate
/// updates happen separately, once per optimization step, from the
/// normalized matrices this function leaves on the tape.
pub fn compute_groups(
    tape: &mut Tape,
    tokens: Tensor,
    patches: Tensor,
    sigma_tg: f64,
    sigma_vg: f64,
) -> Result<(AlignmentState, GroupEmbeddings)> {
    let s = similarity_matrix(tape, tokens, patches)?;

    // Token-grouped direction: rows index tokens.
    let s_hat = tape.minmax_rows(s)?;
    let s_tilde = sparsify(tape, s_hat, sigma_tg)?;
    let alpha = alignment_weights(tape, s_tilde)?;
    let tgv = group_embed(tape, alpha, patches)?;

    // Patch-grouped direction: transpose the raw similarities.
    let s_t = tape.transpose(s)?;
    let s_hat_v = tape.minmax_rows(s_t)?;
    let s_tilde_v = sparsify(tape, s_hat_v, sigma_vg)?;
    let alpha_v = alignment_weights(tape, s_tilde_v)?;
    let pgl = group_embed(tape, alpha_v, tokens)?;

    Ok((
        AlignmentState { s, s_hat, s_tilde, alpha, s_hat_v, s_tilde_v, alpha_v },
        GroupEmbeddings { tgv, pgl },
    ))
}
