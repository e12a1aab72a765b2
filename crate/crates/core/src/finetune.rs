//! Supervised fine-tuning and the classical triangulation baseline.
//!
//! Each array's (unmasked) spectrum is encoded independently; the per-array
//! features are concatenated and a linear head regresses the transmitter
//! coordinates. Training minimizes the squared Euclidean distance to the
//! label; evaluation reports unsquared distances.


use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SceneSample;
use crate::encoder::{build_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{init_uniform, BoundParams, ParamSet};
use crate::pretrain::{build_array_embedding, OptimizerState};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Linear regression head over concatenated per-array features.
///
/// Parameter blocks: `ft.w` (3 x G*feature_dim) and `ft.b` (1 x 3). The
/// bias is not part of the published equation but synthetic scenes are not
/// origin-centered.
#[derive(Debug, Clone)]
pub struct FineTuneHead {
    pub arrays: usize,
    pub feature_dim: usize,
    pub params: ParamSet,
}

impl FineTuneHead {
    pub fn init(arrays: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = arrays * feature_dim;
        let mut params = ParamSet::new();
        params.insert("ft.w", init_uniform(rng, 3, fan_in, fan_in));
        params.insert("ft.b", Tensor::zeros(1, 3));
        Self { arrays, feature_dim, params }
    }

    /// Re-center the bias, e.g. on the mean training label.
    pub fn set_bias(&mut self, bias: [f64; 3]) {
        self.params.set("ft.b", Tensor::row(&bias));
    }
}

/// A predicted transmitter position with its optional label.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub position: [f64; 3],
    pub truth: Option<[f64; 3]>,
}

/// Build the fine-tune forward pass for one sample on a tape.
///
/// Returns the 1x3 prediction node.
pub fn build_finetune_graph(
    tape: &mut Tape,
    enc_bound: &BoundParams,
    head_bound: &BoundParams,
    cfg: &EncoderConfig,
    sample: &SceneSample,
) -> NodeId {
    let features: Vec<NodeId> = sample
        .measurements
        .iter()
        .map(|m| {
            let embedded =
                build_array_embedding(tape, enc_bound, cfg, &m.spectrum, m.array_index, m.origin);
            build_encoder(tape, enc_bound, cfg, embedded).feature
        })
        .collect();
    let concat = tape.concat_cols(&features);
    let wt = tape.transpose(head_bound.id("ft.w"));
    let projected = tape.matmul(concat, wt);
    tape.add_row(projected, head_bound.id("ft.b"))
}

/// Predict a transmitter position from a sample's spectra.
pub fn finetune_forward(
    sample: &SceneSample,
    encoder: &ParamSet,
    cfg: &EncoderConfig,
    head: &FineTuneHead,
) -> Result<Prediction> {
    if sample.num_arrays() != head.arrays {
        return Err(Error::dim("finetune_forward arrays", head.arrays, sample.num_arrays()));
    }
    let mut tape = Tape::new();
    let enc_bound = BoundParams::bind(&mut tape, encoder);
    let head_bound = BoundParams::bind(&mut tape, &head.params);
    let pred = build_finetune_graph(&mut tape, &enc_bound, &head_bound, cfg, sample);
    let v = tape.value(pred);
    Ok(Prediction {
        position: [v.get(0, 0), v.get(0, 1), v.get(0, 2)],
        truth: sample.tx_pos(),
    })
}

/// Squared Euclidean distance between prediction and label.
pub fn finetune_loss(pred: &Prediction) -> Result<f64> {
    let truth = pred.truth.ok_or(Error::MissingLabel)?;
    Ok((0..3).map(|i| (pred.position[i] - truth[i]).powi(2)).sum())
}

/// One supervised step over a batch: mean squared-distance loss, joint
/// global-norm clip, Adam update of encoder and head.
pub fn finetune_step(
    batch: &[&SceneSample],
    encoder: &mut ParamSet,
    head: &mut FineTuneHead,
    optimizer: &mut OptimizerState,
    lr: f64,
    cfg: &EncoderConfig,
    clip_norm: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("finetune batch".into()));
    }
    struct SampleResult {
        loss: f64,
        enc_grads: ParamSet,
        head_grads: ParamSet,
    }
    let encoder_ro: &ParamSet = encoder;
    let head_ro: &FineTuneHead = head;
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .map(|sample| {
            let truth = sample.tx_pos().ok_or(Error::MissingLabel)?;
            let mut tape = Tape::new();
            let enc_bound = BoundParams::bind(&mut tape, encoder_ro);
            let head_bound = BoundParams::bind(&mut tape, &head_ro.params);
            let pred = build_finetune_graph(&mut tape, &enc_bound, &head_bound, cfg, sample);
            let target = tape.constant(Tensor::row(&truth));
            let diff = tape.sub(pred, target);
            let sq = tape.mul_elem(diff, diff);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            Ok(SampleResult {
                loss: tape.value(loss).item(),
                enc_grads: enc_bound.gradients(&tape, &grads),
                head_grads: head_bound.gradients(&tape, &grads),
            })
        })
        .collect();

    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut enc_grads: Option<ParamSet> = None;
    let mut head_grads: Option<ParamSet> = None;
    for r in results {
        let r = r?;
        loss += r.loss * inv_b;
        match &mut enc_grads {
            Some(acc) => crate::params::axpy(acc, 1.0, &r.enc_grads),
            slot @ None => *slot = Some(r.enc_grads),
        }
        match &mut head_grads {
            Some(acc) => crate::params::axpy(acc, 1.0, &r.head_grads),
            slot @ None => *slot = Some(r.head_grads),
        }
    }
    let mut enc_grads = enc_grads.expect("non-empty batch");
    let mut head_grads = head_grads.expect("non-empty batch");
    for set in [&mut enc_grads, &mut head_grads] {
        let names: Vec<String> = set.names().cloned().collect();
        for name in names {
            let scaled = set.expect(&name).scale(inv_b);
            set.set(&name, scaled);
        }
    }
    let norm = (enc_grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>()
        + head_grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>())
    .sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for set in [&mut enc_grads, &mut head_grads] {
            let names: Vec<String> = set.names().cloned().collect();
            for name in names {
                let scaled = set.expect(&name).scale(s);
                set.set(&name, scaled);
            }
        }
    }
    optimizer.update("enc|", encoder, &enc_grads, lr);
    optimizer.update("head|", &mut head.params, &head_grads, lr);
    optimizer.step += 1;
    Ok(loss)
}

/// Unsquared localization error statistics, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
    pub count: usize,
}

/// Linear-interpolation percentile of pre-sorted values, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn error_stats(mut errors: Vec<f64>) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::EmptySplit("error statistics".into()));
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(ErrorStats {
        mean,
        median: percentile(&errors, 0.5),
        p25: percentile(&errors, 0.25),
        p75: percentile(&errors, 0.75),
        p90: percentile(&errors, 0.9),
        count: errors.len(),
    })
}

/// Evaluate a fine-tuned model on labeled samples: per-sample Euclidean
/// errors (meters) in sample order.
pub fn evaluate_errors(
    samples: &[&SceneSample],
    encoder: &ParamSet,
    cfg: &EncoderConfig,
    head: &FineTuneHead,
) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| {
            let pred = finetune_forward(s, encoder, cfg, head)?;
            let truth = pred.truth.ok_or(Error::MissingLabel)?;
            Ok(((0..3).map(|i| (pred.position[i] - truth[i]).powi(2)).sum::<f64>()).sqrt())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Triangulation baseline
// ---------------------------------------------------------------------------

/// A localization ray: origin and unit direction in scene coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

/// Least-squares intersection of rays: the point minimizing the sum of
/// squared point-to-line distances, via the normal equations
/// `Σ (I - v vᵀ) p = Σ (I - v vᵀ) O`.
pub fn triangulate(rays: &[Ray]) -> Result<[f64; 3]> {
    if rays.len() < 2 {
        return Err(Error::DegenerateRays(format!("{} ray(s), need at least 2", rays.len())));
    }
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for ray in rays {
        let v = normalize(ray.direction)?;
        // I - v v^T
        for i in 0..3 {
            for j in 0..3 {
                let m = if i == j { 1.0 } else { 0.0 } - v[i] * v[j];
                a[i][j] += m;
                b[i] += m * ray.origin[j];
            }
        }
    }
    solve3(a, b).ok_or_else(|| {
        Error::DegenerateRays("normal equations singular (rays parallel?)".into())
    })
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::DegenerateRays("zero-length direction".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// Solve a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, &x| acc.max(x.abs()));
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-12 * scale.max(1e-300) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..3).rev() {
        let mut acc = b[col];
        for k in col + 1..3 {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Localization strategy: a way to produce a position estimate for a
/// sample. The neural head and the classical triangulation baseline are
/// the two registered strategies.
pub trait Localizer: Send + Sync {
    fn name(&self) -> &'static str;
    fn locate(&self, sample: &SceneSample) -> Result<[f64; 3]>;
}

/// Fine-tuned encoder + linear head.
pub struct NeuralLocalizer<'a> {
    pub encoder: &'a ParamSet,
    pub cfg: &'a EncoderConfig,
    pub head: &'a FineTuneHead,
}

impl Localizer for NeuralLocalizer<'_> {
    fn name(&self) -> &'static str {
        "model"
    }

    fn locate(&self, sample: &SceneSample) -> Result<[f64; 3]> {
        Ok(finetune_forward(sample, self.encoder, self.cfg, self.head)?.position)
    }
}

/// Classical baseline: per-array spectrum peak direction, rotated into the
/// scene frame, intersected by least squares.
pub struct TriangulationLocalizer;

impl Localizer for TriangulationLocalizer {
    fn name(&self) -> &'static str {
        "triangulation"
    }

    fn locate(&self, sample: &SceneSample) -> Result<[f64; 3]> {
        let rays: Vec<Ray> = sample
            .measurements
            .iter()
            .map(|m| {
                let dir = crate::spectrum::argmax_direction(&m.spectrum);
                let u = dir.unit_vector();
                let r = &m.rotation;
                Ray {
                    origin: m.origin,
                    direction: [
                        r[0][0] * u[0] + r[0][1] * u[1] + r[0][2] * u[2],
                        r[1][0] * u[0] + r[1][1] * u[1] + r[1][2] * u[2],
                        r[2][0] * u[0] + r[2][1] * u[1] + r[2][2] * u[2],
                    ],
                }
            })
            .collect();
        triangulate(&rays)
    }
}

/// Registered localization strategies by name.
pub fn localizer_names() -> &'static [&'static str] {
    &["model", "triangulation"]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Measurement;
    use crate::encoder::init_encoder_params;
    use crate::spectrum::SpatialSpectrum;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            ffn_dim: 8,
            moe_layer_indices: std::collections::BTreeSet::new(),
            feature_dim: 4,
            mlp_dim: 4,
            ..EncoderConfig::default()
        }
    }

    fn sample_with(arrays: usize, tx: Option<[f64; 3]>, seed: u64) -> SceneSample {
        let mut r = rng(seed);
        let measurements = (0..arrays)
            .map(|g| Measurement {
                array_index: g,
                origin: [g as f64, 0.5, 1.0],
                rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                spectrum: SpatialSpectrum::from_vec(
                    (0..324).map(|_| r.gen_range(0.0..1.0)).collect(),
                    g,
                )
                .unwrap(),
                tx_pos: tx,
            })
            .collect();
        SceneSample { scene_id: "s".into(), measurements }
    }

    #[test]
    fn zero_head_predicts_bias() {
        let cfg = small_cfg();
        let encoder = init_encoder_params(&cfg, &mut rng(0));
        let mut head = FineTuneHead::init(2, cfg.feature_dim, &mut rng(1));
        head.params.set("ft.w", Tensor::zeros(3, 8));
        head.set_bias([1.0, 2.0, 3.0]);
        let s = sample_with(2, Some([0.0; 3]), 2);
        let pred = finetune_forward(&s, &encoder, &cfg, &head).unwrap();
        assert_eq!(pred.position, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn head_shape_binds_arrays_and_features() {
        let head = FineTuneHead::init(3, 32, &mut rng(0));
        assert_eq!(head.params.expect("ft.w").shape(), (3, 96));
        let cfg = small_cfg();
        let encoder = init_encoder_params(&cfg, &mut rng(1));
        let s = sample_with(2, None, 3);
        assert!(finetune_forward(&s, &encoder, &cfg, &head).is_err());
    }

    #[test]
    fn forward_matches_hand_computed_head() {
        // Feature path checked elsewhere; here fix features by a zero-layer
        // encoder and identity-ish regression, then hand-compute W f + b.
        let cfg = EncoderConfig {
            layers: 0,
            embed_dim: 2,
            heads: 1,
            ffn_dim: 2,
            moe_layer_indices: std::collections::BTreeSet::new(),
            feature_dim: 1,
            mlp_dim: 2,
            ..EncoderConfig::default()
        };
        let mut encoder = init_encoder_params(&cfg, &mut rng(4));
        // Make the feature deterministic: f = relu(mean_token * W1 + b1) W2 + b2.
        encoder.set("reg.w1", Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        encoder.set("reg.b1", Tensor::row(&[1.0, 1.0])); // keep ReLU active
        encoder.set("reg.w2", Tensor::from_vec(2, 1, vec![1.0, 1.0]));
        encoder.set("reg.b2", Tensor::row(&[0.0]));

        let mut head = FineTuneHead::init(2, 1, &mut rng(5));
        head.params.set("ft.w", Tensor::from_vec(3, 2, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]));
        head.set_bias([0.1, 0.2, 0.3]);

        let s = sample_with(2, Some([0.0; 3]), 6);
        let pred = finetune_forward(&s, &encoder, &cfg, &head).unwrap();

        // Recompute the two scalar features via the encoder entry points.
        let f: Vec<f64> = s
            .measurements
            .iter()
            .map(|m| {
                crate::pretrain::encode_feature(&m.spectrum, m.array_index, m.origin, &encoder, &cfg, None)[0]
            })
            .collect();
        let w = head.params.expect("ft.w");
        for row in 0..3 {
            let expected = w.get(row, 0) * f[0] + w.get(row, 1) * f[1]
                + head.params.expect("ft.b").get(0, row);
            assert!((pred.position[row] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn finetune_loss_cases() {
        let p = Prediction { position: [1.0, 2.0, 3.0], truth: Some([1.0, 2.0, 3.0]) };
        assert_eq!(finetune_loss(&p).unwrap(), 0.0);

        let p = Prediction { position: [1.0, 2.0, 2.0], truth: Some([0.0, 0.0, 0.0]) };
        assert_eq!(finetune_loss(&p).unwrap(), 9.0);

        let mut r = rng(7);
        let a: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
        let p = Prediction {
            position: [a[0], a[1], a[2]],
            truth: Some([b[0], b[1], b[2]]),
        };
        let expected: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((finetune_loss(&p).unwrap() - expected).abs() < 1e-12);

        let unlabeled = Prediction { position: [0.0; 3], truth: None };
        assert!(matches!(finetune_loss(&unlabeled), Err(Error::MissingLabel)));
    }

    #[test]
    fn triangulate_exact_intersection() {
        let q = [1.0, 2.0, 3.0];
        let rays = vec![
            Ray { origin: [0.0, 0.0, 0.0], direction: normalize([1.0, 2.0, 3.0]).unwrap() },
            Ray { origin: [2.0, 0.0, 3.0], direction: normalize([-1.0, 2.0, 0.0]).unwrap() },
        ];
        let p = triangulate(&rays).unwrap();
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn triangulate_invariant_to_origin_sliding() {
        // Moving each origin along its own ray leaves the lines, and hence
        // the solution, unchanged.
        let q = [0.5, -1.0, 2.0];
        let dirs = [
            normalize([1.0, 1.0, 0.2]).unwrap(),
            normalize([-0.3, 1.0, 0.5]).unwrap(),
            normalize([0.0, -1.0, 1.0]).unwrap(),
        ];
        let rays: Vec<Ray> = dirs
            .iter()
            .map(|&direction| Ray {
                origin: [q[0] - direction[0], q[1] - direction[1], q[2] - direction[2]],
                direction,
            })
            .collect();
        let p1 = triangulate(&rays).unwrap();
        let slid: Vec<Ray> = rays
            .iter()
            .zip([2.5f64, -1.0, 7.0])
            .map(|(r, t)| Ray {
                origin: [
                    r.origin[0] + t * r.direction[0],
                    r.origin[1] + t * r.direction[1],
                    r.origin[2] + t * r.direction[2],
                ],
                direction: r.direction,
            })
            .collect();
        let p2 = triangulate(&slid).unwrap();
        for i in 0..3 {
            assert!((p1[i] - q[i]).abs() < 1e-9);
            assert!((p1[i] - p2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn triangulate_skew_rays_match_grid_search() {
        // Dense grid-search oracle over the squared point-to-line objective.
        let mut r = rng(8);
        for _ in 0..5 {
            let rays: Vec<Ray> = (0..3)
                .map(|_| Ray {
                    origin: [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
                    direction: normalize([
                        r.gen_range(-1.0..1.0),
                        r.gen_range(-1.0..1.0),
                        r.gen_range(-1.0..1.0),
                    ])
                    .unwrap(),
                })
                .collect();
            let p = triangulate(&rays).unwrap();

            let objective = |q: [f64; 3]| -> f64 {
                rays.iter()
                    .map(|ray| {
                        let d = [q[0] - ray.origin[0], q[1] - ray.origin[1], q[2] - ray.origin[2]];
                        let along = d[0] * ray.direction[0]
                            + d[1] * ray.direction[1]
                            + d[2] * ray.direction[2];
                        d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along
                    })
                    .sum()
            };

            // Grid around the closed-form solution.
            let res = 0.05;
            let mut best = (f64::INFINITY, p);
            for i in -10..=10 {
                for j in -10..=10 {
                    for k in -10..=10 {
                        let q = [
                            p[0] + res * i as f64,
                            p[1] + res * j as f64,
                            p[2] + res * k as f64,
                        ];
                        let v = objective(q);
                        if v < best.0 {
                            best = (v, q);
                        }
                    }
                }
            }
            // The grid minimizer must be the cell containing the solution.
            for i in 0..3 {
                assert!((best.1[i] - p[i]).abs() <= res + 1e-12);
            }
        }
    }

    #[test]
    fn triangulate_is_rigid_transform_equivariant() {
        let mut r = rng(9);
        let rot = crate::spectrum::random_rotation(&mut r);
        let t = [0.3, -1.2, 2.2];
        let apply = |p: [f64; 3]| -> [f64; 3] {
            [
                rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2] + t[0],
                rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2] + t[1],
                rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2] + t[2],
            ]
        };
        let apply_dir = |p: [f64; 3]| -> [f64; 3] {
            [
                rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2],
                rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2],
                rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2],
            ]
        };
        let rays: Vec<Ray> = (0..3)
            .map(|_| Ray {
                origin: [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
                direction: normalize([
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                ])
                .unwrap(),
            })
            .collect();
        let p = triangulate(&rays).unwrap();
        let moved: Vec<Ray> = rays
            .iter()
            .map(|ray| Ray { origin: apply(ray.origin), direction: apply_dir(ray.direction) })
            .collect();
        let p2 = triangulate(&moved).unwrap();
        let expected = apply(p);
        for i in 0..3 {
            assert!((p2[i] - expected[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn triangulate_rejects_parallel_rays() {
        let d = normalize([1.0, 0.0, 0.0]).unwrap();
        let rays = vec![
            Ray { origin: [0.0, 0.0, 0.0], direction: d },
            Ray { origin: [0.0, 1.0, 0.0], direction: d },
        ];
        let err = triangulate(&rays).unwrap_err();
        assert!(matches!(err, Error::DegenerateRays(_)));
        assert!(triangulate(&rays[..1]).is_err());
    }

    #[test]
    fn error_stats_percentiles() {
        let stats = error_stats(vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(stats.mean, 2.5);
        assert_eq!(stats.median, 2.5);
        assert_eq!(stats.p25, 1.75);
        assert_eq!(stats.p75, 3.25);
        assert_eq!(stats.count, 4);
        assert!(error_stats(vec![]).is_err());

        // Perfect predictor.
        let stats = error_stats(vec![0.0; 5]).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.median, 0.0);
    }

    #[test]
    fn finetune_step_reduces_loss_on_fixed_batch() {
        let cfg = small_cfg();
        let mut encoder = init_encoder_params(&cfg, &mut rng(10));
        let mut head = FineTuneHead::init(2, cfg.feature_dim, &mut rng(11));
        let mut opt = OptimizerState::new(crate::pretrain::AdamConfig::default());
        let samples: Vec<SceneSample> = (0..3)
            .map(|i| sample_with(2, Some([1.0 + i as f64 * 0.1, 2.0, 1.0]), 20 + i as u64))
            .collect();
        let batch: Vec<&SceneSample> = samples.iter().collect();
        let first = finetune_step(&batch, &mut encoder, &mut head, &mut opt, 1e-2, &cfg, 1.0).unwrap();
        let mut last = first;
        for _ in 0..20 {
            last = finetune_step(&batch, &mut encoder, &mut head, &mut opt, 1e-2, &cfg, 1.0).unwrap();
        }
        assert!(last < first, "loss did not fall: {first} -> {last}");
    }

    #[test]
    fn localizer_registry_names() {
        assert_eq!(localizer_names(), &["model", "triangulation"]);
        assert_eq!(TriangulationLocalizer.name(), "triangulation");
    }
}
