//! Softmax top-K gating and the sort/re-index step that turns a device's
//! routed slots into contiguous per-expert chunks.

use std::cmp::Ordering;

use crate::config::{ModelParams, MoeConfig, TokenBatch};
use crate::error::{LlepError, Result};
use crate::tensor::{vec_mat_into, Matrix};

/// Per-token expert choices of one device. Row `t` occupies flat slots
/// `t*K .. (t+1)*K`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    pub device_id: usize,
    pub top_k: usize,
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
}

impl RouterOutput {
    pub fn new(device_id: usize, top_k: usize, indices: Vec<usize>, gates: Vec<f64>) -> Result<Self> {
        if top_k == 0 || indices.len() != gates.len() || !indices.len().is_multiple_of(top_k) {
            return Err(LlepError::shape(format!(
                "{} indices / {} gates do not form rows of {top_k}",
                indices.len(),
                gates.len()
            )));
        }
        Ok(Self {
            device_id,
            top_k,
            indices,
            gates,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.indices.len() / self.top_k
    }

    pub fn row_indices(&self, token: usize) -> &[usize] {
        &self.indices[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn row_gates(&self, token: usize) -> &[f64] {
        &self.gates[token * self.top_k..(token + 1) * self.top_k]
    }

    /// Number of slots routed to each expert.
    pub fn expert_counts(&self, n_experts: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; n_experts];
        for &e in &self.indices {
            *counts
                .get_mut(e)
                .ok_or(LlepError::ExpertOutOfRange { expert: e, n_experts })? += 1;
        }
        Ok(counts)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices of the `k` largest scores, highest first; equal scores prefer the
/// lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order.truncate(k);
    order
}

/// Routes every token of `batch`: `s = softmax(u^T W_r)`, keep the K largest
/// `s_i` as gates without renormalizing them.
pub fn route(batch: &TokenBatch, params: &ModelParams, config: &MoeConfig) -> Result<RouterOutput> {
    if batch.tokens.cols() != config.d_model {
        return Err(LlepError::shape(format!(
            "batch width {} but D = {}",
            batch.tokens.cols(),
            config.d_model
        )));
    }
    if params.router_weights.shape() != (config.d_model, config.n_experts) {
        return Err(LlepError::shape("router weights must be D x N"));
    }
    let k = config.top_k;
    let mut indices = Vec::with_capacity(batch.len() * k);
    let mut gates = Vec::with_capacity(batch.len() * k);
    let mut logits = vec![0.0; config.n_experts];
    for t in 0..batch.len() {
        vec_mat_into(batch.tokens.row(t), &params.router_weights, &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(LlepError::RouterOverflow {
                device: batch.device_id,
                token: t,
            });
        }
        let scores = softmax(&logits);
        for e in top_k(&scores, k) {
            indices.push(e);
            gates.push(scores[e]);
        }
    }
    RouterOutput::new(batch.device_id, k, indices, gates)
}

/// A device's routed slots, stably sorted by expert id.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedDispatch {
    pub device_id: usize,
    pub top_k: usize,
    pub sorted_experts: Vec<usize>,
    /// `permutation[s]` is the flat `(token, slot)` position of sorted row `s`.
    pub permutation: Vec<usize>,
    pub sorted_tokens: Matrix,
    pub sorted_gates: Vec<f64>,
    pub per_expert_counts: Vec<usize>,
    /// Prefix sums of `per_expert_counts`; expert `i` occupies
    /// `expert_offsets[i]..expert_offsets[i + 1]`.
    pub expert_offsets: Vec<usize>,
}

impl SortedDispatch {
    pub fn expert_range(&self, expert: usize) -> std::ops::Range<usize> {
        self.expert_offsets[expert]..self.expert_offsets[expert + 1]
    }

    pub fn num_slots(&self) -> usize {
        self.permutation.len()
    }
}

/// Flattens `(B_p, K)`, stably sorts slots by expert and gathers tokens and
/// gates into that order.
pub fn sort_reindex(batch: &TokenBatch, routing: &RouterOutput, config: &MoeConfig) -> Result<SortedDispatch> {
    if routing.device_id != batch.device_id {
        return Err(LlepError::shape(format!(
            "routing for device {} applied to batch of device {}",
            routing.device_id, batch.device_id
        )));
    }
    if routing.num_tokens() != batch.len() || routing.top_k != config.top_k {
        return Err(LlepError::shape(format!(
            "routing has {} tokens x {} slots, batch has {} tokens, K = {}",
            routing.num_tokens(),
            routing.top_k,
            batch.len(),
            config.top_k
        )));
    }
    let n = config.n_experts;
    let per_expert_counts = routing.expert_counts(n)?;
    let mut expert_offsets = Vec::with_capacity(n + 1);
    expert_offsets.push(0);
    for c in &per_expert_counts {
        expert_offsets.push(expert_offsets.last().unwrap() + c);
    }

    // Counting sort: stable by construction.
    let slots = routing.indices.len();
    let mut cursor = expert_offsets[..n].to_vec();
    let mut permutation = vec![0usize; slots];
    for (flat, &e) in routing.indices.iter().enumerate() {
        permutation[cursor[e]] = flat;
        cursor[e] += 1;
    }

    let k = routing.top_k;
    let token_of: Vec<usize> = permutation.iter().map(|&f| f / k).collect();
    let sorted_tokens = batch.tokens.gather_rows(&token_of);
    let sorted_gates = permutation.iter().map(|&f| routing.gates[f]).collect();
    let sorted_experts = permutation.iter().map(|&f| routing.indices[f]).collect();

    Ok(SortedDispatch {
        device_id: batch.device_id,
        top_k: k,
        sorted_experts,
        permutation,
        sorted_tokens,
        sorted_gates,
        per_expert_counts,
        expert_offsets,
    })
}

/// Undoes the sort and sums each token's K slot rows (slot order `0..K`).
pub fn combine_unsort(sorted_outputs: &Matrix, dispatch: &SortedDispatch) -> Result<Matrix> {
    let slots = dispatch.num_slots();
    if sorted_outputs.rows() != slots {
        return Err(LlepError::shape(format!(
            "{} output rows for {slots} dispatched slots",
            sorted_outputs.rows()
        )));
    }
    let width = sorted_outputs.cols();
    let k = dispatch.top_k;
    let mut unsorted = Matrix::zeros(slots, width);
    for (s, &flat) in dispatch.permutation.iter().enumerate() {
        unsorted.row_mut(flat).copy_from_slice(sorted_outputs.row(s));
    }
    let tokens = slots / k;
    let mut out = Matrix::zeros(tokens, width);
    for t in 0..tokens {
        let acc = out.row_mut(t);
        for slot in 0..k {
            for (a, v) in acc.iter_mut().zip(unsorted.row(t * k + slot)) {
                *a += v;
            }
        }
    }
    Ok(out)
}
