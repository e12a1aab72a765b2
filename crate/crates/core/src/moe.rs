//! Mixture-of-experts layer: shared experts that process every token,
//! optional experts routed per token by centroid affinity, and the balance
//! penalty that keeps routing from collapsing.
//!
//! Scores are a softmax over the optional experts only; gates keep the
//! top-K scores per token (ties broken toward the lowest expert index) and
//! zero the rest. Selection indicators are constants under differentiation;
//! gradients flow through the surviving score entries.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct MoeConfig {
    /// Total experts, shared + optional.
    pub num_experts: usize,
    /// Leading experts applied to every token.
    pub shared_experts: usize,
    /// Optional experts activated per token.
    pub top_k: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self { num_experts: 4, shared_experts: 1, top_k: 2 }
    }
}

impl MoeConfig {
    pub fn optional_experts(&self) -> usize {
        self.num_experts - self.shared_experts
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared_experts >= self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "shared experts {} must be < total experts {}",
                self.shared_experts, self.num_experts
            )));
        }
        if self.top_k == 0 || self.top_k > self.optional_experts() {
            return Err(Error::InvalidConfig(format!(
                "top_k {} outside 1..={}",
                self.top_k,
                self.optional_experts()
            )));
        }
        Ok(())
    }
}

/// Routing outcome for one forward pass of a MoE layer.
#[derive(Debug, Clone)]
pub struct RoutingResult {
    /// Softmax affinity scores, tokens x optional experts.
    pub scores: Tensor,
    /// Scores with non-top-K entries zeroed.
    pub gates: Tensor,
    /// Per-token selected optional-expert indices, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Tape node holding the scores, when the layer was built on a tape.
    pub scores_node: Option<NodeId>,
}

impl RoutingResult {
    /// Tokens routed to each optional expert.
    pub fn selection_counts(&self, optional: usize) -> Vec<u64> {
        let mut counts = vec![0u64; optional];
        for sel in &self.selected {
            for &e in sel {
                counts[e] += 1;
            }
        }
        counts
    }
}

/// Top-K indices of a score row, descending by score, ties toward the
/// lowest index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut sel: Vec<usize> = idx.into_iter().take(k.min(scores.len())).collect();
    sel.sort_unstable();
    sel
}

/// Gate a single token: softmax scores over the optional experts, top-K
/// selection, gates equal to the surviving scores.
pub fn gate(token: &[f64], centroids: &Tensor, top_k: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    assert!(centroids.rows() > 0, "gate requires at least one centroid");
    assert_eq!(centroids.cols(), token.len(), "gate dimension mismatch");
    let logits: Vec<f64> = (0..centroids.rows())
        .map(|e| {
            centroids
                .row_slice(e)
                .iter()
                .zip(token)
                .map(|(c, u)| c * u)
                .sum()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let scores: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let selected = top_k_indices(&scores, top_k);
    let mut gates = vec![0.0; scores.len()];
    for &e in &selected {
        gates[e] = scores[e];
    }
    (scores, gates, selected)
}

/// Parameter names for one MoE layer under `prefix` (e.g. `"l2.moe."`).
pub fn param_names(prefix: &str, cfg: &MoeConfig) -> Vec<String> {
    let mut names = vec![format!("{prefix}centroids")];
    for e in 0..cfg.num_experts {
        for part in ["w1", "b1", "w2", "b2"] {
            names.push(format!("{prefix}e{e}.{part}"));
        }
    }
    names
}

/// One expert feed-forward block on the tape.
fn expert_ffn(tape: &mut Tape, bound: &BoundParams, prefix: &str, e: usize, x: NodeId) -> NodeId {
    let w1 = bound.id(&format!("{prefix}e{e}.w1"));
    let b1 = bound.id(&format!("{prefix}e{e}.b1"));
    let w2 = bound.id(&format!("{prefix}e{e}.w2"));
    let b2 = bound.id(&format!("{prefix}e{e}.b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let h = tape.matmul(h, w2);
    tape.add_row(h, b2)
}

/// Build a MoE layer on the tape.
///
/// `h_t = Norm(u_t + Σ_shared FFN_i(u_t) + Σ_selected g_it FFN_i(u_t))`,
/// optionally scaled/shifted by layer-norm gain and bias nodes. Optional
/// experts are evaluated sparsely — only on the rows that selected them.
pub fn build_moe_layer(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    cfg: &MoeConfig,
    u: NodeId,
    gain_bias: Option<(NodeId, NodeId)>,
) -> (NodeId, RoutingResult) {
    let t = tape.value(u).rows();
    let optional = cfg.optional_experts();

    let centroids = bound.id(&format!("{prefix}centroids"));
    let centroids_t = tape.transpose(centroids);
    let logits = tape.matmul(u, centroids_t);
    let scores_node = tape.softmax_rows(logits);
    let scores = tape.value(scores_node).clone();

    let mut selected = Vec::with_capacity(t);
    let mut gates = vec![0.0; t * optional];
    for token in 0..t {
        let sel = top_k_indices(scores.row_slice(token), cfg.top_k);
        for &e in &sel {
            gates[token * optional + e] = scores.get(token, e);
        }
        selected.push(sel);
    }

    let mut out = u;
    for e in 0..cfg.shared_experts {
        let f = expert_ffn(tape, bound, prefix, e, u);
        out = tape.add(out, f);
    }
    for e in 0..optional {
        let rows: Vec<usize> = (0..t)
            .filter(|&token| selected[token].contains(&e))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let rows = Arc::new(rows);
        let u_e = tape.gather_rows(u, rows.clone());
        let f_e = expert_ffn(tape, bound, prefix, cfg.shared_experts + e, u_e);
        let score_col = tape.slice_cols(scores_node, e, 1);
        let g_e = tape.gather_rows(score_col, rows.clone());
        let weighted = tape.mul_col(f_e, g_e);
        let scattered = tape.scatter_add_rows(weighted, rows, t);
        out = tape.add(out, scattered);
    }

    let mut h = tape.normalize_rows(out, crate::encoder::LN_EPS);
    if let Some((gain, bias)) = gain_bias {
        h = tape.mul_row(h, gain);
        h = tape.add_row(h, bias);
    }

    let routing = RoutingResult {
        scores,
        gates: Tensor::from_vec(t, optional, gates),
        selected,
        scores_node: Some(scores_node),
    };
    (h, routing)
}

/// MoE layer forward without a surrounding tape (unit gain, zero bias).
pub fn moe_forward(
    u: &Tensor,
    params: &ParamSet,
    prefix: &str,
    cfg: &MoeConfig,
) -> Result<(Tensor, RoutingResult)> {
    cfg.validate()?;
    let centroids = params.expect(&format!("{prefix}centroids"));
    if centroids.cols() != u.cols() {
        return Err(Error::dim("moe_forward", u.cols(), centroids.cols()));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let u_id = tape.constant(u.clone());
    let (h, mut routing) = build_moe_layer(&mut tape, &bound, prefix, cfg, u_id, None);
    routing.scores_node = None;
    Ok((tape.value(h).clone(), routing))
}

/// Expert balance penalty over a routing result.
///
/// `λ Σ_i [ (optional/(K·T)) Σ_t 1{t selects i} ] · [ (1/T) Σ_t s_it ]`.
/// The selection counts are constants; the gradient flows through the
/// scores alone.
pub fn balance_loss(routing: &RoutingResult, top_k: usize, lambda: f64) -> f64 {
    let (t, optional) = routing.scores.shape();
    let counts = routing.selection_counts(optional);
    let mut loss = 0.0;
    for e in 0..optional {
        let freq = optional as f64 / (top_k as f64 * t as f64) * counts[e] as f64;
        let mean_score: f64 =
            (0..t).map(|token| routing.scores.get(token, e)).sum::<f64>() / t as f64;
        loss += freq * mean_score;
    }
    lambda * loss
}

/// Balance penalty as a tape node (requires the layer to have been built on
/// the same tape).
pub fn build_balance_loss(
    tape: &mut Tape,
    routing: &RoutingResult,
    top_k: usize,
    lambda: f64,
) -> NodeId {
    let scores_node = routing
        .scores_node
        .expect("balance loss on tape requires scores_node");
    let (t, optional) = routing.scores.shape();
    let counts = routing.selection_counts(optional);
    let freq: Vec<f64> = counts
        .iter()
        .map(|&c| optional as f64 / (top_k as f64 * t as f64) * c as f64)
        .collect();
    let freq_row = tape.constant(Tensor::row(&freq));
    let mean_scores = tape.mean_rows(scores_node);
    let weighted = tape.mul_elem(mean_scores, freq_row);
    let total = tape.sum_all(weighted);
    tape.scale(total, lambda)
}
