//! Transformer encoder for spatial spectra.
//!
//! Tokens are linear projections of 3x3 spectrum patches. Each token gets a
//! sinusoidal position code (scalar position `array + 36 * patch`, both
//! zero-based) plus a sinusoidal embedding of its array's physical origin.
//! Layers are pre-built as feed-forward strategies: a plain FFN stage or a
//! mixture-of-experts stage, chosen per layer from the config and
//! selectable by name through [`stage_by_name`].
//!
//! Attention uses 1/sqrt(d_k) score scaling and layer norms use biased
//! variance with epsilon 1e-5.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{build_moe_layer, MoeConfig, RoutingResult};
use crate::params::{init_bias, init_uniform, BoundParams, ParamSet};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const TOKENS_PER_ARRAY: usize = 36;
/// Meters-to-position scale for origin encodings (centimeter resolution).
pub const ORIGIN_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// 1-based layer indices that use the MoE stage.
    pub moe_layer_indices: BTreeSet<usize>,
    pub feature_dim: usize,
    pub mlp_dim: usize,
    pub tokens_per_array: usize,
    pub moe: MoeConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 256,
            moe_layer_indices: BTreeSet::from([2, 4]),
            feature_dim: 32,
            mlp_dim: 64,
            tokens_per_array: TOKENS_PER_ARRAY,
            moe: MoeConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.ffn_dim == 0 || self.feature_dim == 0 || self.mlp_dim == 0 {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig("embed_dim must be even for sinusoidal codes".into()));
        }
        if self.tokens_per_array != TOKENS_PER_ARRAY {
            return Err(Error::InvalidConfig(format!(
                "tokens_per_array must be {TOKENS_PER_ARRAY}"
            )));
        }
        if let Some(&bad) = self.moe_layer_indices.iter().find(|&&l| l == 0 || l > self.layers) {
            return Err(Error::InvalidConfig(format!(
                "moe layer index {bad} outside 1..={}",
                self.layers
            )));
        }
        if !self.moe_layer_indices.is_empty() {
            self.moe.validate()?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// A token sequence ready for the encoder: one row per token, token order
/// is array-major (array 0 patches 0..35, array 1 patches 0..35, ...).
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    /// (array index, patch index) per token row.
    pub patch_map: Vec<(usize, usize)>,
}

/// Position-relevant feature regressed from the encoder output.
#[derive(Debug, Clone)]
pub struct LocationFeature {
    pub values: Vec<f64>,
    pub array_index: usize,
}

/// Sinusoidal position code: entry 2k = sin(pos / 10000^(2k/d)),
/// entry 2k+1 = cos of the same argument.
pub fn positional_encoding(position: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::dim("positional_encoding", "even dim", dim));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let divisor = 10000f64.powf(2.0 * k as f64 / dim as f64);
        let arg = position / divisor;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Scalar token position for (array, patch), both zero-based.
pub fn token_position(array_index: usize, patch_index: usize) -> f64 {
    (array_index + TOKENS_PER_ARRAY * patch_index) as f64
}

/// Embed an array origin as the sum of per-coordinate sinusoidal codes at
/// centimeter resolution. Absolute, not translation invariant.
pub fn encode_origin(origin: [f64; 3], dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    for coord in origin {
        let pe = positional_encoding(coord * ORIGIN_SCALE, dim)?;
        for (o, p) in out.iter_mut().zip(pe) {
            *o += p;
        }
    }
    Ok(out)
}

/// Constant additive code for all 36 tokens of one array: position code per
/// patch plus the array's origin code.
pub fn array_position_codes(array_index: usize, origin_code: &[f64]) -> Tensor {
    let dim = origin_code.len();
    Tensor::from_fn(TOKENS_PER_ARRAY, dim, |patch, j| {
        let pe = positional_encoding(token_position(array_index, patch), dim).expect("even dim");
        pe[j] + origin_code[j]
    })
}

/// Combine raw tokens with position and origin codes for each array:
/// token = raw + code(position) + code(origin).
///
/// `raw_tokens[i]` holds array i's 36 raw token vectors; `origin_codes[i]`
/// its pre-encoded origin vector.
pub fn embed(raw_tokens: &[Vec<Vec<f64>>], origin_codes: &[Vec<f64>]) -> Result<TokenSequence> {
    if raw_tokens.len() != origin_codes.len() {
        return Err(Error::dim("embed arrays", raw_tokens.len(), origin_codes.len()));
    }
    if raw_tokens.is_empty() {
        return Err(Error::InvalidConfig("embed requires at least one array".into()));
    }
    let dim = origin_codes[0].len();
    let arrays = raw_tokens.len();
    let mut data = Vec::with_capacity(arrays * TOKENS_PER_ARRAY * dim);
    let mut patch_map = Vec::with_capacity(arrays * TOKENS_PER_ARRAY);
    for (i, (tokens, origin)) in raw_tokens.iter().zip(origin_codes).enumerate() {
        if tokens.len() != TOKENS_PER_ARRAY {
            return Err(Error::dim("embed tokens per array", TOKENS_PER_ARRAY, tokens.len()));
        }
        let codes = array_position_codes(i, origin);
        for (j, token) in tokens.iter().enumerate() {
            if token.len() != dim {
                return Err(Error::dim("embed token dim", dim, token.len()));
            }
            for (c, &x) in token.iter().enumerate() {
                data.push(x + codes.get(j, c));
            }
            patch_map.push((i, j));
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::from_vec(arrays * TOKENS_PER_ARRAY, dim, data),
        patch_map,
    })
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

/// Initialize all encoder parameters for a config.
///
/// Projections are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); layer-norm
/// gains start at 1 and all biases at 0.
pub fn init_encoder_params(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let d = cfg.embed_dim;
    let mut p = ParamSet::new();
    p.insert("token.w", init_uniform(rng, d, 9, 9));
    p.insert("token.b", init_bias(rng, d, 9));
    for l in 0..cfg.layers {
        for name in ["wq", "wk", "wv", "wout"] {
            p.insert(format!("l{l}.attn.{name}"), init_uniform(rng, d, d, d));
        }
        p.insert(format!("l{l}.ln1.g"), Tensor::from_vec(1, d, vec![1.0; d]));
        p.insert(format!("l{l}.ln1.b"), Tensor::zeros(1, d));
        p.insert(format!("l{l}.ln2.g"), Tensor::from_vec(1, d, vec![1.0; d]));
        p.insert(format!("l{l}.ln2.b"), Tensor::zeros(1, d));
        let stage = stage_for_layer(cfg, l);
        stage.init_params(&mut p, cfg, rng);
    }
    p.insert("reg.w1", init_uniform(rng, d, cfg.mlp_dim, d));
    p.insert("reg.b1", init_bias(rng, cfg.mlp_dim, d));
    p.insert("reg.w2", init_uniform(rng, cfg.mlp_dim, cfg.feature_dim, cfg.mlp_dim));
    p.insert("reg.b2", init_bias(rng, cfg.feature_dim, cfg.mlp_dim));
    p
}

// ---------------------------------------------------------------------------
// Feed-forward stage strategies
// ---------------------------------------------------------------------------

/// The post-attention stage of one encoder layer. Two interchangeable
/// strategies exist: the dense FFN and the mixture-of-experts layer.
pub trait FeedForwardStage: Send + Sync {
    fn name(&self) -> &'static str;

    /// Register this stage's parameter blocks.
    fn init_params(&self, params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut ChaCha8Rng);

    /// Build `u -> h^{l+1}` (residual + norm included) on the tape.
    fn build(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        cfg: &EncoderConfig,
        u: NodeId,
    ) -> (NodeId, Option<RoutingResult>);
}

/// Plain position-wise feed-forward stage.
pub struct DenseFfnStage {
    layer: usize,
}

impl FeedForwardStage for DenseFfnStage {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn init_params(&self, params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
        let l = self.layer;
        let (d, dff) = (cfg.embed_dim, cfg.ffn_dim);
        params.insert(format!("l{l}.ffn.w1"), init_uniform(rng, d, dff, d));
        params.insert(format!("l{l}.ffn.b1"), init_bias(rng, dff, d));
        params.insert(format!("l{l}.ffn.w2"), init_uniform(rng, dff, d, dff));
        params.insert(format!("l{l}.ffn.b2"), init_bias(rng, d, dff));
    }

    fn build(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        _cfg: &EncoderConfig,
        u: NodeId,
    ) -> (NodeId, Option<RoutingResult>) {
        let l = self.layer;
        let ff = build_ffn(
            tape,
            u,
            bound.id(&format!("l{l}.ffn.w1")),
            bound.id(&format!("l{l}.ffn.b1")),
            bound.id(&format!("l{l}.ffn.w2")),
            bound.id(&format!("l{l}.ffn.b2")),
        );
        let sum = tape.add(ff, u);
        let h = build_layer_norm(
            tape,
            sum,
            bound.id(&format!("l{l}.ln2.g")),
            bound.id(&format!("l{l}.ln2.b")),
        );
        (h, None)
    }
}

/// Mixture-of-experts stage.
pub struct MoeStage {
    layer: usize,
}

impl FeedForwardStage for MoeStage {
    fn name(&self) -> &'static str {
        "moe"
    }

    fn init_params(&self, params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
        let l = self.layer;
        let (d, dff) = (cfg.embed_dim, cfg.ffn_dim);
        params.insert(
            format!("l{l}.moe.centroids"),
            init_uniform(rng, cfg.moe.optional_experts(), d, d),
        );
        for e in 0..cfg.moe.num_experts {
            params.insert(format!("l{l}.moe.e{e}.w1"), init_uniform(rng, d, dff, d));
            params.insert(format!("l{l}.moe.e{e}.b1"), init_bias(rng, dff, d));
            params.insert(format!("l{l}.moe.e{e}.w2"), init_uniform(rng, dff, d, dff));
            params.insert(format!("l{l}.moe.e{e}.b2"), init_bias(rng, d, dff));
        }
    }

    fn build(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        cfg: &EncoderConfig,
        u: NodeId,
    ) -> (NodeId, Option<RoutingResult>) {
        let l = self.layer;
        let gain = bound.id(&format!("l{l}.ln2.g"));
        let bias = bound.id(&format!("l{l}.ln2.b"));
        let (h, routing) = build_moe_layer(
            tape,
            bound,
            &format!("l{l}.moe."),
            &cfg.moe,
            u,
            Some((gain, bias)),
        );
        (h, Some(routing))
    }
}

/// Construct a stage strategy by registered name ("dense" or "moe").
pub fn stage_by_name(name: &str, layer: usize) -> Result<Box<dyn FeedForwardStage>> {
    match name {
        "dense" => Ok(Box::new(DenseFfnStage { layer })),
        "moe" => Ok(Box::new(MoeStage { layer })),
        other => Err(Error::InvalidConfig(format!("unknown feed-forward stage {other}"))),
    }
}

/// Names of the available feed-forward stage strategies.
pub fn stage_names() -> &'static [&'static str] {
    &["dense", "moe"]
}

fn stage_for_layer(cfg: &EncoderConfig, layer: usize) -> Box<dyn FeedForwardStage> {
    // moe_layer_indices is 1-based.
    let name = if cfg.moe_layer_indices.contains(&(layer + 1)) { "moe" } else { "dense" };
    stage_by_name(name, layer).expect("built-in stage")
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.
pub fn build_attention(
    tape: &mut Tape,
    h: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
) -> NodeId {
    let dk = tape.value(wq).cols();
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt);
    let scaled = tape.scale(raw, 1.0 / (dk as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Multi-head attention with combined d x d projections sliced per head.
pub fn build_multi_head(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    layer: usize,
    h: NodeId,
) -> NodeId {
    let dh = cfg.head_dim();
    let wq = bound.id(&format!("l{layer}.attn.wq"));
    let wk = bound.id(&format!("l{layer}.attn.wk"));
    let wv = bound.id(&format!("l{layer}.attn.wv"));
    let wout = bound.id(&format!("l{layer}.attn.wout"));
    let mut heads = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let wq_m = tape.slice_cols(wq, m * dh, dh);
        let wk_m = tape.slice_cols(wk, m * dh, dh);
        let wv_m = tape.slice_cols(wv, m * dh, dh);
        heads.push(build_attention(tape, h, wq_m, wk_m, wv_m));
    }
    let concat = tape.concat_cols(&heads);
    tape.matmul(concat, wout)
}

/// Row-wise layer norm with gain and bias.
pub fn build_layer_norm(tape: &mut Tape, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
    let n = tape.normalize_rows(x, LN_EPS);
    let scaled = tape.mul_row(n, gain);
    tape.add_row(scaled, bias)
}

/// Two-layer ReLU feed-forward block.
pub fn build_ffn(
    tape: &mut Tape,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> NodeId {
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let h = tape.matmul(h, w2);
    tape.add_row(h, b2)
}

/// Output of a full encoder graph.
pub struct EncoderGraph {
    /// Final hidden states, T x d.
    pub hidden: NodeId,
    /// Regressed location feature, 1 x feature_dim.
    pub feature: NodeId,
    /// Routing telemetry from each MoE layer, in layer order.
    pub routing: Vec<RoutingResult>,
}

/// Build the full encoder on a tape: L stacked layers then the regression
/// head over mean-pooled tokens.
pub fn build_encoder(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    embedded: NodeId,
) -> EncoderGraph {
    let mut h = embedded;
    let mut routing = Vec::new();
    for l in 0..cfg.layers {
        let a = build_multi_head(tape, bound, cfg, l, h);
        let sum = tape.add(a, h);
        let u = build_layer_norm(
            tape,
            sum,
            bound.id(&format!("l{l}.ln1.g")),
            bound.id(&format!("l{l}.ln1.b")),
        );
        let stage = stage_for_layer(cfg, l);
        let (next, r) = stage.build(tape, bound, cfg, u);
        if let Some(r) = r {
            routing.push(r);
        }
        h = next;
    }
    let pooled = tape.mean_rows(h);
    let feature = build_ffn(
        tape,
        pooled,
        bound.id("reg.w1"),
        bound.id("reg.b1"),
        bound.id("reg.w2"),
        bound.id("reg.b2"),
    );
    EncoderGraph { hidden: h, feature, routing }
}

/// Build raw tokens from constant patches: `patches * W^T + b`, 36 x d.
pub fn build_tokenize(
    tape: &mut Tape,
    patches: NodeId,
    token_w: NodeId,
    token_b: NodeId,
) -> NodeId {
    let wt = tape.transpose(token_w);
    let projected = tape.matmul(patches, wt);
    tape.add_row(projected, token_b)
}

// ---------------------------------------------------------------------------
// Plain (tape-free) entry points
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over a T x d sequence.
pub fn attention(h: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    if wq.rows() != h.cols() || wk.rows() != h.cols() || wv.rows() != h.cols() {
        return Err(Error::dim("attention", h.cols(), wq.rows()));
    }
    if wq.cols() != wk.cols() {
        return Err(Error::dim("attention key dim", wq.cols(), wk.cols()));
    }
    let mut tape = Tape::new();
    let h_id = tape.constant(h.clone());
    let wq_id = tape.constant(wq.clone());
    let wk_id = tape.constant(wk.clone());
    let wv_id = tape.constant(wv.clone());
    let out = build_attention(&mut tape, h_id, wq_id, wk_id, wv_id);
    Ok(tape.value(out).clone())
}

/// Multi-head attention with combined projections.
pub fn multi_head(
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wout: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let d = h.cols();
    if d % heads != 0 {
        return Err(Error::dim("multi_head", format!("d divisible by {heads}"), d));
    }
    for w in [wq, wk, wv, wout] {
        if w.shape() != (d, d) {
            return Err(Error::dim("multi_head weights", format!("{d}x{d}"), format!("{:?}", w.shape())));
        }
    }
    let mut cfg = EncoderConfig { embed_dim: d, heads, ..EncoderConfig::default() };
    cfg.layers = 1;
    let mut params = ParamSet::new();
    params.insert("l0.attn.wq", wq.clone());
    params.insert("l0.attn.wk", wk.clone());
    params.insert("l0.attn.wv", wv.clone());
    params.insert("l0.attn.wout", wout.clone());
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params);
    let h_id = tape.constant(h.clone());
    let out = build_multi_head(&mut tape, &bound, &cfg, 0, h_id);
    Ok(tape.value(out).clone())
}

/// Layer norm of a single vector: (x - mean)/sqrt(var + eps) * gain + bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

/// Position-wise feed-forward on a single vector.
pub fn ffn(x: &[f64], w1: &Tensor, b1: &[f64], w2: &Tensor, b2: &[f64]) -> Result<Vec<f64>> {
    if w1.rows() != x.len() || w1.cols() != b1.len() || w2.rows() != w1.cols() || w2.cols() != b2.len() {
        return Err(Error::dim("ffn", "consistent shapes", "mismatch"));
    }
    let mut hidden = vec![0.0; w1.cols()];
    for (j, h) in hidden.iter_mut().enumerate() {
        let mut acc = b1[j];
        for (i, &xi) in x.iter().enumerate() {
            acc += xi * w1.get(i, j);
        }
        *h = acc.max(0.0);
    }
    let mut out = vec![0.0; w2.cols()];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = b2[j];
        for (i, &hi) in hidden.iter().enumerate() {
            acc += hi * w2.get(i, j);
        }
        *o = acc;
    }
    Ok(out)
}

/// Run the full encoder over an embedded sequence; returns the final hidden
/// states and per-MoE-layer routing telemetry.
pub fn encoder_forward(
    sequence: &TokenSequence,
    params: &ParamSet,
    cfg: &EncoderConfig,
) -> Result<(Tensor, Vec<RoutingResult>)> {
    cfg.validate()?;
    if sequence.tokens.rows() == 0 {
        return Err(Error::InvalidConfig("empty token sequence".into()));
    }
    if sequence.tokens.cols() != cfg.embed_dim {
        return Err(Error::dim("encoder_forward", cfg.embed_dim, sequence.tokens.cols()));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let embedded = tape.constant(sequence.tokens.clone());
    let graph = build_encoder(&mut tape, &bound, cfg, embedded);
    let routing = graph
        .routing
        .into_iter()
        .map(|mut r| {
            r.scores_node = None;
            r
        })
        .collect();
    Ok((tape.value(graph.hidden).clone(), routing))
}

/// Mean-pool the final hidden states and regress the location feature.
pub fn regress_feature(
    hidden: &Tensor,
    params: &ParamSet,
    array_index: usize,
) -> Result<LocationFeature> {
    if hidden.rows() == 0 {
        return Err(Error::InvalidConfig("regress_feature on empty sequence".into()));
    }
    let d = hidden.cols();
    let mut pooled = vec![0.0; d];
    for i in 0..hidden.rows() {
        for (p, &x) in pooled.iter_mut().zip(hidden.row_slice(i)) {
            *p += x;
        }
    }
    for p in pooled.iter_mut() {
        *p /= hidden.rows() as f64;
    }
    let values = ffn(
        &pooled,
        params.expect("reg.w1"),
        params.expect("reg.b1").data(),
        params.expect("reg.w2"),
        params.expect("reg.b2").data(),
    )?;
    Ok(LocationFeature { values, array_index })
}
