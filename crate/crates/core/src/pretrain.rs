//! Masked-autoencoder pretraining.
//!
//! One shared encoder, one decoder per scene. A step takes a batch of
//! same-scene samples; for each array of each sample the spectrum is
//! patch-tokenized, position codes are added to all 36 tokens, a random
//! subset of tokens is dropped, the encoder regresses a latent code, and
//! the scene decoder renders the full spectrum from that code. The loss is
//! reconstruction + expert balance + latent norm; one Adam update touches
//! the encoder and that scene's decoder only.
//!
//! All trained state is rounded to f32 precision after each update so a
//! saved checkpoint resumes bit-exactly.

use std::collections::BTreeMap;
use std::sync::Arc;


use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SceneSample;
use crate::encoder::{
    array_position_codes, build_encoder, build_tokenize, encode_origin, EncoderConfig,
    TokenSequence, TOKENS_PER_ARRAY,
};
use crate::error::{Error, Result};
use crate::moe::build_balance_loss;
use crate::params::{BoundParams, ParamSet};
use crate::rfnerf::{
    build_field_march, build_magnitudes, init_field_params, spectrum_ray_bundle, CondNode,
    DecoderConfig, FieldParams, RayBundle,
};
use crate::spectrum::{patchify, Aabb, SpatialSpectrum, NUM_BINS};
use crate::subseed;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Which patches each array keeps after random masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Per array, kept patch indices, ascending.
    pub kept: Vec<Vec<usize>>,
    /// Per array, masked patch indices, ascending.
    pub masked: Vec<Vec<usize>>,
}

impl MaskPlan {
    /// Draw a plan: `round(ratio * 36)` patches masked per array.
    pub fn generate(ratio: f64, arrays: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
            return Err(Error::InvalidConfig(format!("mask ratio {ratio} outside (0, 1)")));
        }
        let masked_count = (ratio * TOKENS_PER_ARRAY as f64).round() as usize;
        if masked_count >= TOKENS_PER_ARRAY {
            return Err(Error::EmptyMask { ratio });
        }
        let mut kept = Vec::with_capacity(arrays);
        let mut masked = Vec::with_capacity(arrays);
        for _ in 0..arrays {
            let mut chosen =
                rand::seq::index::sample(rng, TOKENS_PER_ARRAY, masked_count).into_vec();
            chosen.sort_unstable();
            let keep: Vec<usize> =
                (0..TOKENS_PER_ARRAY).filter(|i| !chosen.contains(i)).collect();
            masked.push(chosen);
            kept.push(keep);
        }
        Ok(Self { ratio, kept, masked })
    }

    /// Kept token rows of array `i` within a concatenated sequence laid out
    /// array-major.
    pub fn kept_rows(&self, array: usize) -> Vec<usize> {
        self.kept[array].iter().map(|&p| array * TOKENS_PER_ARRAY + p).collect()
    }
}

/// Drop masked tokens from an embedded sequence; position and origin codes
/// were already added to every token, so kept tokens carry their original
/// embeddings and order.
pub fn mask_patches(sequence: &TokenSequence, plan: &MaskPlan) -> TokenSequence {
    let arrays = sequence.tokens.rows() / TOKENS_PER_ARRAY;
    assert_eq!(plan.kept.len(), arrays, "mask plan array count mismatch");
    let d = sequence.tokens.cols();
    let mut data = Vec::new();
    let mut patch_map = Vec::new();
    for array in 0..arrays {
        for &p in &plan.kept[array] {
            let row = array * TOKENS_PER_ARRAY + p;
            data.extend_from_slice(sequence.tokens.row_slice(row));
            patch_map.push(sequence.patch_map[row]);
        }
    }
    TokenSequence {
        tokens: Tensor::from_vec(patch_map.len(), d, data),
        patch_map,
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub consistency: f64,
    pub balance: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { consistency: 1.0, balance: 0.01, latent: 0.01 }
    }
}

/// Composite loss terms; each already carries its weight.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompositeLoss {
    pub cons: f64,
    pub bal: f64,
    pub lat: f64,
    pub total: f64,
}

impl CompositeLoss {
    pub fn new(cons: f64, bal: f64, lat: f64) -> Self {
        Self { cons, bal, lat, total: cons + bal + lat }
    }
}

/// Weighted sum over arrays of squared entrywise spectrum differences.
pub fn consistency_loss(
    truth: &[SpatialSpectrum],
    recon: &[SpatialSpectrum],
    lambda: f64,
) -> Result<f64> {
    if truth.len() != recon.len() {
        return Err(Error::dim("consistency_loss arrays", truth.len(), recon.len()));
    }
    let mut total = 0.0;
    for (a, b) in truth.iter().zip(recon) {
        for (x, y) in a.values().iter().zip(b.values()) {
            let d = x - y;
            total += d * d;
        }
    }
    Ok(lambda * total)
}

/// Squared-norm penalty on a latent code.
pub fn latent_loss(z: &[f64], lambda: f64) -> f64 {
    lambda * z.iter().map(|x| x * x).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 0.001, epsilon: 1e-8 }
    }
}

/// First/second-moment accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

/// Adam state across every trained block, keyed by a qualified name
/// (`enc|...` for the encoder, `dec|<scene>|...` for decoders).
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub entries: BTreeMap<String, Moments>,
    /// Completed training steps (drives the learning-rate schedule).
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, entries: BTreeMap::new(), step: 0 }
    }

    /// One Adam update of `params` from `grads` under the key prefix.
    ///
    /// Weight decay enters the gradient (g + wd * p) before the moment
    /// updates. Updated parameters and moments are rounded to f32
    /// precision.
    pub fn update(&mut self, prefix: &str, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        let cfg = self.config;
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let grad = grads.expect(&name);
            let p = params.expect(&name);
            let key = format!("{prefix}{name}");
            let entry = self.entries.entry(key).or_insert_with(|| Moments {
                m: Tensor::zeros(p.rows(), p.cols()),
                v: Tensor::zeros(p.rows(), p.cols()),
                step: 0,
            });
            entry.step += 1;
            let t = entry.step;
            let g = grad.zip(p, |g, p| g + cfg.weight_decay * p);
            entry.m = entry.m.zip(&g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g);
            entry.v = entry.v.zip(&g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g);
            let bc1 = 1.0 - cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32);
            let update = entry.m.zip(&entry.v, |m, v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                lr * m_hat / (v_hat.sqrt() + cfg.epsilon)
            });
            let next = p.zip(&update, |p, u| p - u).quantize_f32();
            params.set(&name, next);
            entry.m = entry.m.quantize_f32();
            entry.v = entry.v.quantize_f32();
        }
    }
}

/// Warmup-then-cosine learning rate.
///
/// Linear from `lr_min` to `lr_max` over `warmup` steps, then cosine decay
/// back to `lr_min` at `total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, lr_min: f64, lr_max: f64) -> f64 {
    debug_assert!(step <= total && warmup <= total);
    if warmup > 0 && step <= warmup {
        return lr_min + (lr_max - lr_min) * step as f64 / warmup as f64;
    }
    if total == warmup {
        return lr_max;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Structural similarity
// ---------------------------------------------------------------------------

/// Global structural similarity between two spectra.
///
/// Single-window SSIM over all 324 entries with C1 = (0.01 L)^2 and
/// C2 = (0.03 L)^2, L the maximum entry of `a`. An all-zero `a` returns 1
/// for an identical pair and otherwise falls back to L = 1.
pub fn ssim(a: &SpatialSpectrum, b: &SpatialSpectrum) -> f64 {
    let mut l = a.max_value();
    if l <= 0.0 {
        if a.values() == b.values() {
            return 1.0;
        }
        l = 1.0;
    }
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);
    let n = NUM_BINS as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let mu_a = mean(a.values());
    let mu_b = mean(b.values());
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.values().iter().zip(b.values()) {
        var_a += (x - mu_a) * (x - mu_a);
        var_b += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

// ---------------------------------------------------------------------------
// Decoder registry and render cache
// ---------------------------------------------------------------------------

/// Scene-id-keyed decoder store; decoders initialize deterministically from
/// the registry seed on first sight.
#[derive(Debug, Clone)]
pub struct DecoderRegistry {
    pub seed: u64,
    pub decoders: BTreeMap<String, FieldParams>,
}

impl DecoderRegistry {
    pub fn new(seed: u64) -> Self {
        Self { seed, decoders: BTreeMap::new() }
    }

    pub fn get_or_init(
        &mut self,
        scene_id: &str,
        config: &DecoderConfig,
        bounds: Aabb,
    ) -> &mut FieldParams {
        self.decoders.entry(scene_id.to_string()).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(self.seed, scene_id));
            init_field_params(config, bounds, &mut rng)
        })
    }

    pub fn get(&self, scene_id: &str) -> Option<&FieldParams> {
        self.decoders.get(scene_id)
    }
}

use rand::SeedableRng;

/// Cached ray bundles per (scene, array). Array poses are fixed within a
/// scene, so the encodings never change across steps.
#[derive(Default)]
pub struct RenderCache {
    bundles: BTreeMap<(String, usize), Arc<RayBundle>>,
}

impl RenderCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &mut self,
        scene_id: &str,
        array_index: usize,
        field: &FieldParams,
        origin: [f64; 3],
        rotation: &[[f64; 3]; 3],
    ) -> Arc<RayBundle> {
        self.bundles
            .entry((scene_id.to_string(), array_index))
            .or_insert_with(|| Arc::new(spectrum_ray_bundle_at(field, origin, rotation)))
            .clone()
    }
}

fn spectrum_ray_bundle_at(
    field: &FieldParams,
    origin: [f64; 3],
    rotation: &[[f64; 3]; 3],
) -> RayBundle {
    spectrum_ray_bundle(field, origin, rotation)
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// Everything a pretraining step needs besides the mutable state.
pub struct PretrainContext<'a> {
    pub encoder_cfg: &'a EncoderConfig,
    pub decoder_cfg: &'a DecoderConfig,
    pub weights: LossWeights,
    pub mask_ratio: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub bounds: Aabb,
    /// Rays per render used to estimate the reconstruction term each step;
    /// `None` renders all 324 bins. Subsets are drawn uniformly per array
    /// and the estimate is rescaled to the full-spectrum sum.
    pub ray_subset: Option<usize>,
}

/// Loss and routing telemetry from one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: CompositeLoss,
    /// Tokens routed to each optional expert, summed over the batch and
    /// all MoE layers.
    pub expert_counts: Vec<u64>,
}

/// Embedded 36-token node for one array: tokenize(patches) + position and
/// origin codes, built on the tape with the encoder's token projection.
pub fn build_array_embedding(
    tape: &mut Tape,
    enc_bound: &BoundParams,
    cfg: &EncoderConfig,
    spectrum: &SpatialSpectrum,
    array_index: usize,
    origin: [f64; 3],
) -> NodeId {
    let patches = patchify(spectrum);
    let patch_matrix = Tensor::from_fn(TOKENS_PER_ARRAY, 9, |i, j| patches[i][j]);
    let patches_id = tape.constant(patch_matrix);
    let tokens = build_tokenize(tape, patches_id, enc_bound.id("token.w"), enc_bound.id("token.b"));
    let origin_code = encode_origin(origin, cfg.embed_dim).expect("even embed dim");
    let codes = array_position_codes(array_index, &origin_code);
    let codes_id = tape.constant(codes);
    tape.add(tokens, codes_id)
}

/// The composite objective for one sample, built on a tape.
pub struct CompositeGraph {
    pub cons: NodeId,
    pub bal: NodeId,
    pub lat: NodeId,
    pub total: NodeId,
    pub expert_counts: Vec<u64>,
}

/// Build the mask-encode-render-loss graph for one sample: for each
/// array, embed and mask its tokens, encode to a latent code, render
/// through the scene decoder along `bundles[g]`, and accumulate the
/// weighted consistency, balance, and latent terms.
///
/// `targets[g]` holds the ground-truth magnitudes for the bundle's rays
/// (the full spectrum, or a row subset when the step estimates the
/// reconstruction term on sampled rays); `cons_scale` restores the
/// full-spectrum scale of a subsampled estimate.
pub fn build_composite_graph(
    tape: &mut Tape,
    enc_bound: &BoundParams,
    dec_bound: &BoundParams,
    sample: &SceneSample,
    plan: &MaskPlan,
    field: &FieldParams,
    bundles: &[Arc<RayBundle>],
    targets: &[Tensor],
    cons_scale: f64,
    ctx: &PretrainContext,
) -> CompositeGraph {
    let optional = ctx.encoder_cfg.moe.optional_experts();
    let has_moe = !ctx.encoder_cfg.moe_layer_indices.is_empty();
    let mut expert_counts = vec![0u64; if has_moe { optional } else { 0 }];

    let mut cons_terms: Vec<NodeId> = Vec::new();
    let mut bal_terms: Vec<NodeId> = Vec::new();
    let mut lat_terms: Vec<NodeId> = Vec::new();

    for (g, m) in sample.measurements.iter().enumerate() {
        let embedded = build_array_embedding(
            tape,
            enc_bound,
            ctx.encoder_cfg,
            &m.spectrum,
            m.array_index,
            m.origin,
        );
        let kept = Arc::new(plan.kept[g].clone());
        let masked_seq = tape.gather_rows(embedded, kept);
        let graph = build_encoder(tape, enc_bound, ctx.encoder_cfg, masked_seq);

        for routing in &graph.routing {
            let term =
                build_balance_loss(tape, routing, ctx.encoder_cfg.moe.top_k, ctx.weights.balance);
            bal_terms.push(term);
            for (slot, c) in expert_counts.iter_mut().zip(routing.selection_counts(optional)) {
                *slot += c;
            }
        }

        let z = graph.feature;
        let z_sq = tape.mul_elem(z, z);
        let z_norm = tape.sum_all(z_sq);
        lat_terms.push(tape.scale(z_norm, ctx.weights.latent));

        let (re, im) = build_field_march(tape, dec_bound, field, &bundles[g], &CondNode::Latent(z));
        let mags = build_magnitudes(tape, re, im);
        let target = tape.constant(targets[g].clone());
        let diff = tape.sub(mags, target);
        let sq = tape.mul_elem(diff, diff);
        let sum = tape.sum_all(sq);
        cons_terms.push(tape.scale(sum, ctx.weights.consistency * cons_scale));
    }

    let sum_terms = |tape: &mut Tape, terms: &[NodeId]| -> NodeId {
        let mut acc = tape.constant(Tensor::scalar(0.0));
        for &t in terms {
            acc = tape.add(acc, t);
        }
        acc
    };
    let cons = sum_terms(tape, &cons_terms);
    let bal = sum_terms(tape, &bal_terms);
    let lat = sum_terms(tape, &lat_terms);
    let partial = tape.add(cons, bal);
    let total = tape.add(partial, lat);
    CompositeGraph { cons, bal, lat, total, expert_counts }
}

/// Spectrum ray bundles for every array of a sample, uncached.
pub fn sample_bundles(field: &FieldParams, sample: &SceneSample) -> Vec<Arc<RayBundle>> {
    sample
        .measurements
        .iter()
        .map(|m| Arc::new(spectrum_ray_bundle(field, m.origin, &m.rotation)))
        .collect()
}

struct SampleResult {
    cons: f64,
    bal: f64,
    lat: f64,
    enc_grads: ParamSet,
    dec_grads: ParamSet,
    expert_counts: Vec<u64>,
}

fn run_sample(
    sample: &SceneSample,
    plan: &MaskPlan,
    encoder: &ParamSet,
    field: &FieldParams,
    bundles: &[Arc<RayBundle>],
    targets: &[Tensor],
    cons_scale: f64,
    ctx: &PretrainContext,
) -> SampleResult {
    let mut tape = Tape::new();
    let enc_bound = BoundParams::bind(&mut tape, encoder);
    let dec_bound = BoundParams::bind(&mut tape, &field.params);
    let graph = build_composite_graph(
        &mut tape, &enc_bound, &dec_bound, sample, plan, field, bundles, targets, cons_scale, ctx,
    );
    let grads = tape.backward(graph.total);
    SampleResult {
        cons: tape.value(graph.cons).item(),
        bal: tape.value(graph.bal).item(),
        lat: tape.value(graph.lat).item(),
        enc_grads: enc_bound.gradients(&tape, &grads),
        dec_grads: dec_bound.gradients(&tape, &grads),
        expert_counts: graph.expert_counts,
    }
}

/// One pretraining step over a same-scene batch.
///
/// Masks, encodes, renders, differentiates, clips, and applies one Adam
/// update to the encoder and the batch scene's decoder. Losses and
/// gradients are means over the batch samples.
pub fn pretrain_step(
    batch: &[SceneSample],
    encoder: &mut ParamSet,
    registry: &mut DecoderRegistry,
    optimizer: &mut OptimizerState,
    lr: f64,
    ctx: &PretrainContext,
    cache: &mut RenderCache,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let first = batch
        .first()
        .ok_or_else(|| Error::EmptySplit("pretrain batch".into()))?;
    let scene_id = first.scene_id.clone();
    for s in batch {
        if s.scene_id != scene_id {
            return Err(Error::MixedScenes { first: scene_id, second: s.scene_id.clone() });
        }
    }

    registry.get_or_init(&scene_id, ctx.decoder_cfg, ctx.bounds);

    // Masks are drawn sequentially so the rng stream is independent of any
    // parallel scheduling below.
    let mut plans = Vec::with_capacity(batch.len());
    for sample in batch {
        plans.push(MaskPlan::generate(ctx.mask_ratio, sample.num_arrays(), rng)?);
    }

    // Ray bundles are cached per (scene, array); when the reconstruction
    // term is estimated on a ray subset, the subset rows are drawn here
    // (after the masks, in sample-then-array order) and the cached bundle
    // rows are gathered up front.
    let field_snapshot = registry.get(&scene_id).expect("just initialized").clone();
    let mut bundle_table: Vec<Vec<Arc<RayBundle>>> = Vec::with_capacity(batch.len());
    let mut target_table: Vec<Vec<Tensor>> = Vec::with_capacity(batch.len());
    let mut cons_scale = 1.0;
    for sample in batch {
        let mut bundles = Vec::with_capacity(sample.num_arrays());
        let mut targets = Vec::with_capacity(sample.num_arrays());
        for m in &sample.measurements {
            let full =
                cache.get_or_build(&scene_id, m.array_index, &field_snapshot, m.origin, &m.rotation);
            match ctx.ray_subset {
                Some(k) if k < NUM_BINS => {
                    let mut rows = rand::seq::index::sample(rng, NUM_BINS, k).into_vec();
                    rows.sort_unstable();
                    let values = m.spectrum.values();
                    let target: Vec<f64> = rows.iter().map(|&r| values[r]).collect();
                    bundles.push(Arc::new(crate::rfnerf::subset_bundle(&full, &rows)));
                    targets.push(Tensor::from_vec(k, 1, target));
                    cons_scale = NUM_BINS as f64 / k as f64;
                }
                _ => {
                    targets.push(m.spectrum.as_tensor());
                    bundles.push(full);
                }
            }
        }
        bundle_table.push(bundles);
        target_table.push(targets);
    }

    let encoder_ro: &ParamSet = encoder;
    let results: Vec<SampleResult> = batch
        .par_iter()
        .zip(plans.par_iter())
        .zip(bundle_table.par_iter().zip(target_table.par_iter()))
        .map(|((sample, plan), (bundles, targets))| {
            run_sample(sample, plan, encoder_ro, &field_snapshot, bundles, targets, cons_scale, ctx)
        })
        .collect();

    let inv_b = 1.0 / batch.len() as f64;
    let mut cons = 0.0;
    let mut bal = 0.0;
    let mut lat = 0.0;
    let mut enc_grads: Option<ParamSet> = None;
    let mut dec_grads: Option<ParamSet> = None;
    let optional = ctx.encoder_cfg.moe.optional_experts();
    let has_moe = !ctx.encoder_cfg.moe_layer_indices.is_empty();
    let mut expert_counts = vec![0u64; if has_moe { optional } else { 0 }];
    for r in results {
        cons += r.cons * inv_b;
        bal += r.bal * inv_b;
        lat += r.lat * inv_b;
        for (slot, c) in expert_counts.iter_mut().zip(&r.expert_counts) {
            *slot += c;
        }
        match &mut enc_grads {
            Some(acc) => crate::params::axpy(acc, 1.0, &r.enc_grads),
            slot @ None => *slot = Some(r.enc_grads),
        }
        match &mut dec_grads {
            Some(acc) => crate::params::axpy(acc, 1.0, &r.dec_grads),
            slot @ None => *slot = Some(r.dec_grads),
        }
    }
    let mut enc_grads = enc_grads.expect("non-empty batch");
    let mut dec_grads = dec_grads.expect("non-empty batch");
    scale_params(&mut enc_grads, inv_b);
    scale_params(&mut dec_grads, inv_b);

    // Joint global-norm clip over encoder + decoder gradients.
    let norm = (sq_norm(&enc_grads) + sq_norm(&dec_grads)).sqrt();
    if norm > ctx.clip_norm {
        let s = ctx.clip_norm / norm;
        scale_params(&mut enc_grads, s);
        scale_params(&mut dec_grads, s);
    }

    optimizer.update("enc|", encoder, &enc_grads, lr);
    let field = registry.get_or_init(&scene_id, ctx.decoder_cfg, ctx.bounds);
    optimizer.update(&format!("dec|{scene_id}|"), &mut field.params, &dec_grads, lr);
    optimizer.step += 1;

    Ok(StepOutcome {
        loss: CompositeLoss::new(cons, bal, lat),
        expert_counts,
    })
}

fn scale_params(set: &mut ParamSet, s: f64) {
    let names: Vec<String> = set.names().cloned().collect();
    for name in names {
        let scaled = set.expect(&name).scale(s);
        set.set(&name, scaled);
    }
}

fn sq_norm(set: &ParamSet) -> f64 {
    set.iter().map(|(_, t)| t.sq_norm()).sum()
}

/// Encode one spectrum to its latent feature, optionally restricted to the
/// kept patches of a mask plan. Evaluation-only path.
pub fn encode_feature(
    spectrum: &SpatialSpectrum,
    array_index: usize,
    origin: [f64; 3],
    encoder: &ParamSet,
    cfg: &EncoderConfig,
    kept: Option<&[usize]>,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, encoder);
    let embedded = build_array_embedding(&mut tape, &bound, cfg, spectrum, array_index, origin);
    let input = match kept {
        Some(rows) => tape.gather_rows(embedded, Arc::new(rows.to_vec())),
        None => embedded,
    };
    let graph = build_encoder(&mut tape, &bound, cfg, input);
    tape.value(graph.feature).data().to_vec()
}
