//! Scene-specific radiance-field decoder.
//!
//! Two MLPs over a sinusoidally encoded volume: an attenuation network
//! mapping a point to a complex log-attenuation density and a feature
//! vector, and a radiance network mapping (feature, emission direction,
//! conditioning) to a complex emitted signal. A received signal is the
//! midpoint-rule integral along a ray of emission times accumulated
//! transmittance; rendering evaluates that integral for all 324 bin-center
//! directions and takes magnitudes.
//!
//! Conventions:
//! - complex values ride as paired real columns (re, im);
//! - the real part of the log-attenuation is forced non-positive through
//!   `-softplus(raw)`: a passive voxel never amplifies;
//! - the radiance network sees the *emission* direction (from the voxel
//!   toward the receiver, i.e. the negated ray direction) as a unit vector
//!   in scene coordinates;
//! - attenuation inputs are normalized by the scene bounds before encoding;
//! - transmittance for sample m accumulates attenuation from samples
//!   strictly before m, so the first sample sees transmittance one.

use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_bias, init_uniform, BoundParams, ParamSet};
use crate::spectrum::{Aabb, Direction, SpatialSpectrum, AZ_BINS, EL_BINS, NUM_BINS};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Smoothing inside the final magnitude sqrt; keeps the gradient defined
/// at exactly zero signal without visibly perturbing values.
pub const MAG_EPS: f64 = 1e-24;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    /// Hidden layers in the attenuation network.
    pub attn_layers: usize,
    /// Width of the attenuation hidden layers.
    pub attn_width: usize,
    /// Width of the feature vector handed to the radiance network.
    pub feature_dim: usize,
    /// Hidden widths of the radiance network.
    pub radiance_widths: (usize, usize),
    /// Sinusoidal encoding dimension per input component.
    pub pe_dim: usize,
    /// Dimension of the latent code accepted as conditioning.
    pub latent_dim: usize,
    /// Quadrature samples per ray when rendering.
    pub ray_samples: usize,
    /// Ray length in meters; scene-bounds diagonal when absent.
    pub max_range: Option<f64>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            attn_layers: 4,
            attn_width: 64,
            feature_dim: 64,
            radiance_widths: (64, 32),
            pe_dim: 32,
            latent_dim: 32,
            ray_samples: 64,
            max_range: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pe_dim % 2 != 0 {
            return Err(Error::dim("decoder pe_dim", "even", self.pe_dim));
        }
        if self.attn_layers == 0 || self.attn_width == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("decoder dims must be >= 1".into()));
        }
        if self.ray_samples < 2 {
            return Err(Error::InvalidConfig("ray_samples must be >= 2".into()));
        }
        Ok(())
    }

    /// Width of one encoded 3-vector.
    pub fn encoded_width(&self) -> usize {
        3 * self.pe_dim
    }

    fn radiance_input_width(&self) -> usize {
        self.feature_dim + 2 * self.encoded_width()
    }
}

/// Per-scene decoder parameters plus the bounds used to normalize inputs.
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub config: DecoderConfig,
    pub bounds: Aabb,
    pub params: ParamSet,
}

/// What the radiance network is conditioned on: the true transmitter
/// position, or a latent code standing in for it.
#[derive(Debug, Clone)]
pub enum Conditioning {
    TxPosition([f64; 3]),
    Latent(Vec<f64>),
}

/// A single ray for the public marching entry point.
#[derive(Debug, Clone)]
pub struct RayConfig {
    pub origin: [f64; 3],
    pub direction: Direction,
    pub max_range: f64,
    pub samples: usize,
}

/// Frequency-stacked sinusoidal features: per component,
/// `[sin(2^k π x), cos(2^k π x)]` for k = 0 .. target_dim/2 - 1.
pub fn fourier_encode(x: &[f64], target_dim: usize) -> Result<Vec<f64>> {
    if target_dim % 2 != 0 {
        return Err(Error::dim("fourier_encode", "even target_dim", target_dim));
    }
    let mut out = Vec::with_capacity(x.len() * target_dim);
    for &component in x {
        for k in 0..target_dim / 2 {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * component;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(out)
}

/// Initialize decoder parameters for a scene.
pub fn init_field_params(config: &DecoderConfig, bounds: Aabb, rng: &mut ChaCha8Rng) -> FieldParams {
    config.validate().expect("invalid decoder config");
    let mut p = ParamSet::new();
    let enc = config.encoded_width();
    let w = config.attn_width;
    for l in 0..config.attn_layers {
        let fan_in = if l == 0 { enc } else { w };
        p.insert(format!("attn.l{l}.w"), init_uniform(rng, fan_in, w, fan_in));
        p.insert(format!("attn.l{l}.b"), init_bias(rng, w, fan_in));
    }
    p.insert("attn.delta.w", init_uniform(rng, w, 2, w));
    // Center the raw attenuation at softplus^-1(0.1): a nearly transparent
    // field at init keeps every ray sample contributing gradients instead
    // of extinguishing after the first slabs.
    let delta_bias = init_bias(rng, 2, w);
    p.insert(
        "attn.delta.b",
        Tensor::from_vec(1, 2, vec![delta_bias.get(0, 0) - 2.2522, delta_bias.get(0, 1)]),
    );
    p.insert("attn.feat.w", init_uniform(rng, w, config.feature_dim, w));
    p.insert("attn.feat.b", init_bias(rng, config.feature_dim, w));

    let (r1, r2) = config.radiance_widths;
    let rin = config.radiance_input_width();
    p.insert("rad.l0.w", init_uniform(rng, rin, r1, rin));
    p.insert("rad.l0.b", init_bias(rng, r1, rin));
    p.insert("rad.l1.w", init_uniform(rng, r1, r2, r1));
    p.insert("rad.l1.b", init_bias(rng, r2, r1));
    p.insert("rad.out.w", init_uniform(rng, r2, 2, r2));
    p.insert("rad.out.b", init_bias(rng, 2, r2));

    // The conditioning projection starts 3x louder than a plain fan-in
    // init so the latent code competes with the sinusoidal features from
    // the first step instead of being drowned out.
    p.insert(
        "cond.w",
        init_uniform(rng, config.latent_dim, enc, config.latent_dim).scale(3.0),
    );
    p.insert("cond.b", init_bias(rng, enc, config.latent_dim));

    FieldParams { config: config.clone(), bounds, params: p }
}

/// Normalize a point into the unit box spanned by the scene bounds.
fn normalize_point(bounds: &Aabb, p: [f64; 3]) -> [f64; 3] {
    let e = bounds.extent();
    [
        (p[0] - bounds.min[0]) / e[0],
        (p[1] - bounds.min[1]) / e[1],
        (p[2] - bounds.min[2]) / e[2],
    ]
}

/// Encode a batch of points (rows) into the field's input features.
fn encode_points(field: &FieldParams, points: &[[f64; 3]]) -> Tensor {
    let dim = field.config.encoded_width();
    let mut data = Vec::with_capacity(points.len() * dim);
    for &p in points {
        let n = normalize_point(&field.bounds, p);
        data.extend(fourier_encode(&n, field.config.pe_dim).expect("even pe_dim"));
    }
    Tensor::from_vec(points.len(), dim, data)
}

/// Encode emission directions (unit vectors, components already in [-1, 1]).
fn encode_directions(field: &FieldParams, dirs: &[[f64; 3]]) -> Tensor {
    let dim = field.config.encoded_width();
    let mut data = Vec::with_capacity(dirs.len() * dim);
    for d in dirs {
        data.extend(fourier_encode(d, field.config.pe_dim).expect("even pe_dim"));
    }
    Tensor::from_vec(dirs.len(), dim, data)
}

/// Conditioning on the tape: encoded transmitter position (constant) or a
/// 1 x latent_dim node projected through the learned map.
pub enum CondNode {
    Tx(Tensor),
    Latent(NodeId),
}

pub fn cond_node_for(field: &FieldParams, cond: &Conditioning, tape: &mut Tape) -> CondNode {
    match cond {
        Conditioning::TxPosition(p) => CondNode::Tx(encode_points(field, &[*p])),
        Conditioning::Latent(z) => {
            let id = tape.input(Tensor::row(z));
            CondNode::Latent(id)
        }
    }
}

fn build_cond_rows(tape: &mut Tape, bound: &BoundParams, cond: &CondNode, rows: usize) -> NodeId {
    let row = match cond {
        CondNode::Tx(enc) => tape.constant(enc.clone()),
        CondNode::Latent(z) => {
            let w = bound.id("cond.w");
            let b = bound.id("cond.b");
            let projected = tape.matmul(*z, w);
            tape.add_row(projected, b)
        }
    };
    if rows == 1 {
        return row;
    }
    let cols = tape.value(row).cols();
    let zeros = tape.constant(Tensor::zeros(rows, cols));
    tape.add_row(zeros, row)
}

/// Outputs of a batched field query.
pub struct FieldQuery {
    /// Re(log-attenuation) <= 0, rows x 1.
    pub delta_re: NodeId,
    /// Im(log-attenuation), rows x 1.
    pub delta_im: NodeId,
    /// Emitted signal, rows x 2 (re, im).
    pub signal: NodeId,
}

/// Query the field at encoded points/directions already on the tape.
///
/// The attenuation branch sees only the encoded positions; the radiance
/// branch sees the attenuation feature, the encoded emission direction,
/// and the conditioning rows.
pub fn build_field_query(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &DecoderConfig,
    pe_points: NodeId,
    pe_dirs: NodeId,
    cond_rows: NodeId,
) -> FieldQuery {
    let mut x = pe_points;
    for l in 0..config.attn_layers {
        let w = bound.id(&format!("attn.l{l}.w"));
        let b = bound.id(&format!("attn.l{l}.b"));
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        x = tape.relu(h);
    }
    let dw = bound.id("attn.delta.w");
    let db = bound.id("attn.delta.b");
    let delta_raw = tape.matmul(x, dw);
    let delta_raw = tape.add_row(delta_raw, db);
    let raw_re = tape.slice_cols(delta_raw, 0, 1);
    let delta_im = tape.slice_cols(delta_raw, 1, 1);
    let sp = tape.softplus(raw_re);
    let delta_re = tape.scale(sp, -1.0);

    let fw = bound.id("attn.feat.w");
    let fb = bound.id("attn.feat.b");
    let feature = tape.matmul(x, fw);
    let feature = tape.add_row(feature, fb);

    let mut r = tape.concat_cols(&[feature, pe_dirs, cond_rows]);
    for l in 0..2 {
        let w = bound.id(&format!("rad.l{l}.w"));
        let b = bound.id(&format!("rad.l{l}.b"));
        let h = tape.matmul(r, w);
        let h = tape.add_row(h, b);
        r = tape.relu(h);
    }
    let ow = bound.id("rad.out.w");
    let ob = bound.id("rad.out.b");
    let signal = tape.matmul(r, ow);
    let signal = tape.add_row(signal, ob);

    FieldQuery { delta_re, delta_im, signal }
}

/// One quadrature step's field values for a batch of rays.
pub struct MarchStep {
    pub delta_re: NodeId,
    pub delta_im: NodeId,
    pub signal: NodeId,
}

/// Midpoint-rule ray integration from per-step field values.
///
/// For step m over rays r: contribution = T_m * S_m * Δr with
/// T_m = exp(Σ_{m' < m} δ̂_{m'} Δr) as a complex exponential. Returns the
/// accumulated (re, im) columns.
pub fn build_march_from_steps(
    tape: &mut Tape,
    steps: &[MarchStep],
    rays: usize,
    dr: f64,
) -> (NodeId, NodeId) {
    let mut log_re = tape.constant(Tensor::zeros(rays, 1));
    let mut log_im = tape.constant(Tensor::zeros(rays, 1));
    let mut acc_re = tape.constant(Tensor::zeros(rays, 1));
    let mut acc_im = tape.constant(Tensor::zeros(rays, 1));
    for step in steps {
        let t_mag = tape.exp(log_re);
        let t_cos = tape.cos(log_im);
        let t_sin = tape.sin(log_im);
        let t_re = tape.mul_elem(t_mag, t_cos);
        let t_im = tape.mul_elem(t_mag, t_sin);
        let s_re = tape.slice_cols(step.signal, 0, 1);
        let s_im = tape.slice_cols(step.signal, 1, 1);
        // (t_re + i t_im)(s_re + i s_im) * dr
        let rr = tape.mul_elem(t_re, s_re);
        let ii = tape.mul_elem(t_im, s_im);
        let ri = tape.mul_elem(t_re, s_im);
        let ir = tape.mul_elem(t_im, s_re);
        let c_re = tape.sub(rr, ii);
        let c_im = tape.add(ri, ir);
        let c_re = tape.scale(c_re, dr);
        let c_im = tape.scale(c_im, dr);
        acc_re = tape.add(acc_re, c_re);
        acc_im = tape.add(acc_im, c_im);

        let d_re = tape.scale(step.delta_re, dr);
        let d_im = tape.scale(step.delta_im, dr);
        log_re = tape.add(log_re, d_re);
        log_im = tape.add(log_im, d_im);
    }
    (acc_re, acc_im)
}

/// Precomputed constant encodings for marching a fixed set of rays.
///
/// Depends only on (bounds, origin, directions, range, samples, pe config),
/// so one bundle can be cached per scene/array and shared across tapes.
pub struct RayBundle {
    /// Per quadrature step: encoded sample points, rays x encoded_width.
    pub pe_points: Vec<Tensor>,
    /// Encoded emission directions (-d), rays x encoded_width.
    pub pe_dirs: Tensor,
    pub rays: usize,
    pub samples: usize,
    pub dr: f64,
}

/// Build a bundle for rays from `origin` along scene-frame unit `dirs`.
pub fn build_ray_bundle(
    field: &FieldParams,
    origin: [f64; 3],
    dirs: &[[f64; 3]],
    max_range: f64,
    samples: usize,
) -> RayBundle {
    let dr = max_range / samples as f64;
    let mut pe_points = Vec::with_capacity(samples);
    for m in 0..samples {
        let r = (m as f64 + 0.5) * dr;
        let points: Vec<[f64; 3]> = dirs
            .iter()
            .map(|d| [origin[0] + r * d[0], origin[1] + r * d[1], origin[2] + r * d[2]])
            .collect();
        pe_points.push(encode_points(field, &points));
    }
    let emission: Vec<[f64; 3]> = dirs.iter().map(|d| [-d[0], -d[1], -d[2]]).collect();
    let pe_dirs = encode_directions(field, &emission);
    RayBundle { pe_points, pe_dirs, rays: dirs.len(), samples, dr }
}

/// March a bundle through the field; returns (re, im) accumulator columns.
pub fn build_field_march(
    tape: &mut Tape,
    bound: &BoundParams,
    field: &FieldParams,
    bundle: &RayBundle,
    cond: &CondNode,
) -> (NodeId, NodeId) {
    let cond_rows = build_cond_rows(tape, bound, cond, bundle.rays);
    let pe_dirs = tape.constant(bundle.pe_dirs.clone());
    let steps: Vec<MarchStep> = bundle
        .pe_points
        .iter()
        .map(|pe| {
            let pe_points = tape.constant(pe.clone());
            let q = build_field_query(tape, bound, &field.config, pe_points, pe_dirs, cond_rows);
            MarchStep { delta_re: q.delta_re, delta_im: q.delta_im, signal: q.signal }
        })
        .collect();
    build_march_from_steps(tape, &steps, bundle.rays, bundle.dr)
}

/// Magnitudes sqrt(re^2 + im^2 + eps) of marched accumulators, rays x 1.
pub fn build_magnitudes(tape: &mut Tape, acc_re: NodeId, acc_im: NodeId) -> NodeId {
    let rr = tape.mul_elem(acc_re, acc_re);
    let ii = tape.mul_elem(acc_im, acc_im);
    let sum = tape.add(rr, ii);
    tape.sqrt_eps(sum, MAG_EPS)
}

/// Scene-frame unit directions of all 324 bin centers under a rotation,
/// azimuth-major to match the spectrum layout.
pub fn bin_directions(rotation: &[[f64; 3]; 3]) -> Vec<[f64; 3]> {
    let mut dirs = Vec::with_capacity(NUM_BINS);
    for az in 0..AZ_BINS {
        for el in 0..EL_BINS {
            let u = Direction::bin_center(az, el).unit_vector();
            dirs.push([
                rotation[0][0] * u[0] + rotation[0][1] * u[1] + rotation[0][2] * u[2],
                rotation[1][0] * u[0] + rotation[1][1] * u[1] + rotation[1][2] * u[2],
                rotation[2][0] * u[0] + rotation[2][1] * u[1] + rotation[2][2] * u[2],
            ]);
        }
    }
    dirs
}

/// Restrict a bundle to a subset of its rays (row indices).
pub fn subset_bundle(full: &RayBundle, rows: &[usize]) -> RayBundle {
    let gather = |t: &Tensor| -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * t.cols());
        for &r in rows {
            data.extend_from_slice(t.row_slice(r));
        }
        Tensor::from_vec(rows.len(), t.cols(), data)
    };
    RayBundle {
        pe_points: full.pe_points.iter().map(&gather).collect(),
        pe_dirs: gather(&full.pe_dirs),
        rays: rows.len(),
        samples: full.samples,
        dr: full.dr,
    }
}

/// Bundle covering the full 36x9 spectrum for a receiver pose.
pub fn spectrum_ray_bundle(
    field: &FieldParams,
    p_rx: [f64; 3],
    rotation: &[[f64; 3]; 3],
) -> RayBundle {
    let max_range = field.config.max_range.unwrap_or_else(|| field.bounds.diagonal());
    build_ray_bundle(field, p_rx, &bin_directions(rotation), max_range, field.config.ray_samples)
}

// ---------------------------------------------------------------------------
// Plain entry points
// ---------------------------------------------------------------------------

/// Query attenuation and radiance at a single point.
///
/// `emission_dir` is the unit direction the queried signal leaves the point
/// along; marching passes the negated ray direction here.
pub fn query_field(
    field: &FieldParams,
    point: [f64; 3],
    emission_dir: [f64; 3],
    cond: &Conditioning,
) -> (Complex64, Complex64) {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &field.params);
    let cond_node = cond_node_for(field, cond, &mut tape);
    let cond_rows = build_cond_rows(&mut tape, &bound, &cond_node, 1);
    let pe_p = encode_points(field, &[point]);
    let pe_d = encode_directions(field, &[emission_dir]);
    let pe_p = tape.constant(pe_p);
    let pe_d = tape.constant(pe_d);
    let q = build_field_query(&mut tape, &bound, &field.config, pe_p, pe_d, cond_rows);
    let delta = Complex64::new(tape.value(q.delta_re).item(), tape.value(q.delta_im).item());
    let s = Complex64::new(tape.value(q.signal).get(0, 0), tape.value(q.signal).get(0, 1));
    (delta, s)
}

/// Integrate the received signal along one ray.
pub fn ray_march(field: &FieldParams, ray: &RayConfig, cond: &Conditioning) -> Result<Complex64> {
    if ray.samples < 2 {
        return Err(Error::InvalidConfig("ray_march requires >= 2 samples".into()));
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &field.params);
    let cond_node = cond_node_for(field, cond, &mut tape);
    let dir = ray.direction.unit_vector();
    let bundle = build_ray_bundle(field, ray.origin, &[dir], ray.max_range, ray.samples);
    let (re, im) = build_field_march(&mut tape, &bound, field, &bundle, &cond_node);
    Ok(Complex64::new(tape.value(re).item(), tape.value(im).item()))
}

/// Render the full 36x9 spectrum magnitude grid for a receiver pose.
pub fn render_spectrum(
    field: &FieldParams,
    p_rx: [f64; 3],
    rotation: &[[f64; 3]; 3],
    cond: &Conditioning,
) -> SpatialSpectrum {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &field.params);
    let cond_node = cond_node_for(field, cond, &mut tape);
    let bundle = spectrum_ray_bundle(field, p_rx, rotation);
    let (re, im) = build_field_march(&mut tape, &bound, field, &bundle, &cond_node);
    let mags = build_magnitudes(&mut tape, re, im);
    SpatialSpectrum::from_vec(tape.value(mags).data().to_vec(), 0).expect("324 rays")
}
