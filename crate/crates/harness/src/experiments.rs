//! Experiment runners: pretraining, fine-tuning, evaluation, and the four
//! ablation matrices. Every run is a pure function of (config, corpus,
//! seed); parallelism only spans independent per-sample work with a fixed
//! reduction order.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rfrp_core::data::{split_indices, SceneSample};
use rfrp_core::encoder::init_encoder_params;
use rfrp_core::finetune::{
    error_stats, evaluate_errors, finetune_step, ErrorStats, FineTuneHead, Localizer,
};
use rfrp_core::params::ParamSet;
use rfrp_core::pretrain::{
    encode_feature, lr_at, pretrain_step, AdamConfig, DecoderRegistry, MaskPlan, OptimizerState,
    PretrainContext, RenderCache,
};
use rfrp_core::rfnerf::{render_spectrum, Conditioning};
use rfrp_core::subseed;

use crate::checkpoint::TrainState;
use crate::config::ExperimentConfig;
use crate::dataset::{Corpus, SceneData};
use crate::error::{HarnessError, Result};
use crate::metrics::{fmt_f64, CsvWriter};
use crate::registry::moe_variants;

/// Fresh training state for a seed: quantized encoder init, empty decoder
/// registry, empty optimizer, and the pretraining sample stream.
pub fn init_train_state(config: &ExperimentConfig, seed: u64) -> TrainState {
    let mut enc_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "encoder-init"));
    let mut encoder = init_encoder_params(&config.encoder, &mut enc_rng);
    encoder.quantize_f32();
    TrainState {
        encoder_cfg: config.encoder.clone(),
        decoder_cfg: config.decoder.clone(),
        encoder,
        registry: DecoderRegistry::new(subseed(seed, "decoders")),
        optimizer: OptimizerState::new(AdamConfig::default()),
        rng: ChaCha8Rng::seed_from_u64(subseed(seed, "pretrain-stream")),
        head: None,
    }
}

/// Header of the pretraining metrics CSV for a config.
pub fn metrics_header(config: &ExperimentConfig) -> String {
    let mut header = String::from("step,scene_id,lr,cons,bal,lat,total");
    if !config.encoder.moe_layer_indices.is_empty() {
        for e in 0..config.encoder.moe.optional_experts() {
            header.push_str(&format!(",sel_e{e}"));
        }
    }
    header
}

/// Training pool size of a scene: everything but the reconstruction
/// holdout tail.
fn train_pool(config: &ExperimentConfig, scene: &SceneData) -> usize {
    let n = scene.samples.len();
    let holdout = (config.holdout_fraction * n as f64).round() as usize;
    (n - holdout).max(1)
}

/// Advance a training state by `steps` pretraining steps.
///
/// Scenes rotate round-robin on the persisted optimizer step counter, so a
/// reloaded state continues exactly where it stopped.
pub fn pretrain_steps<W: Write>(
    state: &mut TrainState,
    config: &ExperimentConfig,
    corpus: &Corpus,
    cache: &mut RenderCache,
    steps: u64,
    mut metrics: Option<&mut CsvWriter<W>>,
) -> Result<()> {
    let ctx = PretrainContext {
        encoder_cfg: &state.encoder_cfg,
        decoder_cfg: &state.decoder_cfg,
        weights: config.loss_weights,
        mask_ratio: config.mask_ratio,
        clip_norm: config.clip_norm,
        bounds: config.bounds(),
        ray_subset: config.ray_subset,
    };
    let total = config.pretrain_steps;
    let warmup = config.warmup_steps(total);
    for _ in 0..steps {
        let step_index = state.optimizer.step;
        let scene = &corpus.pretrain[(step_index as usize) % corpus.pretrain.len()];
        let pool = train_pool(config, scene);
        let batch_size = config.batch_size.min(pool);
        let picked = rand::seq::index::sample(&mut state.rng, pool, batch_size).into_vec();
        let batch: Vec<SceneSample> = picked.iter().map(|&i| scene.samples[i].clone()).collect();
        let lr = lr_at(step_index.min(total), total, warmup, config.lr_min, config.lr_max);
        let outcome = pretrain_step(
            &batch,
            &mut state.encoder,
            &mut state.registry,
            &mut state.optimizer,
            lr,
            &ctx,
            cache,
            &mut state.rng,
        )?;
        if let Some(w) = metrics.as_deref_mut() {
            let mut fields = vec![
                state.optimizer.step.to_string(),
                scene.scene_id.clone(),
                fmt_f64(lr),
                fmt_f64(outcome.loss.cons),
                fmt_f64(outcome.loss.bal),
                fmt_f64(outcome.loss.lat),
                fmt_f64(outcome.loss.total),
            ];
            fields.extend(outcome.expert_counts.iter().map(|c| c.to_string()));
            w.row(&fields)?;
        }
    }
    Ok(())
}

/// Full pretraining run for one seed. Label fields are never read.
pub fn run_pretrain<W: Write>(
    config: &ExperimentConfig,
    corpus: &Corpus,
    seed: u64,
    metrics: Option<&mut CsvWriter<W>>,
) -> Result<TrainState> {
    if corpus.pretrain.is_empty() {
        return Err(HarnessError::MissingDataset("no pretraining scenes".into()));
    }
    let mut state = init_train_state(config, seed);
    let mut cache = RenderCache::new();
    pretrain_steps(&mut state, config, corpus, &mut cache, config.pretrain_steps, metrics)?;
    Ok(state)
}

/// Result of fine-tuning on one scene.
pub struct FinetuneOutcome {
    pub stats: ErrorStats,
    /// Per-test-sample Euclidean errors, meters, in split order.
    pub errors: Vec<f64>,
    pub encoder: ParamSet,
    pub head: FineTuneHead,
}

/// Fine-tune (from a pretrained encoder or from scratch) on one scene at a
/// label fraction, then evaluate on the held-out test split.
///
/// The split derives from `split_seed` alone, so every variant and seed
/// trains against the same membership.
pub fn finetune_scene(
    config: &ExperimentConfig,
    scene: &SceneData,
    pretrained: Option<&ParamSet>,
    seed: u64,
    label_fraction: f64,
) -> Result<FinetuneOutcome> {
    let n = scene.samples.len();
    let mut split_rng =
        ChaCha8Rng::seed_from_u64(subseed(config.split_seed, &format!("split/{}", scene.scene_id)));
    let split = split_indices(n, config.test_fraction, label_fraction, &mut split_rng)?;

    let mut encoder = match pretrained {
        Some(p) => p.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(
                seed,
                &format!("scratch-encoder/{}", scene.scene_id),
            ));
            let mut e = init_encoder_params(&config.encoder, &mut rng);
            e.quantize_f32();
            e
        }
    };

    let arrays = scene.num_arrays();
    let mut head_rng =
        ChaCha8Rng::seed_from_u64(subseed(seed, &format!("head/{}", scene.scene_id)));
    let mut head = FineTuneHead::init(arrays, config.encoder.feature_dim, &mut head_rng);
    // Center the head on the mean training label; both variants share it.
    let mut mean = [0.0f64; 3];
    for &i in &split.train {
        let tx = scene.samples[i].tx_pos().ok_or(rfrp_core::Error::MissingLabel)?;
        for (m, t) in mean.iter_mut().zip(tx) {
            *m += t / split.train.len() as f64;
        }
    }
    head.set_bias(mean);
    head.params.quantize_f32();

    let mut optimizer = OptimizerState::new(AdamConfig::default());
    let mut stream = ChaCha8Rng::seed_from_u64(subseed(
        seed,
        &format!("finetune/{}/{}", scene.scene_id, label_fraction),
    ));
    let total = config.finetune_steps;
    let warmup = config.warmup_steps(total);
    for step in 0..total {
        let batch_size = config.batch_size.min(split.train.len());
        let picked = rand::seq::index::sample(&mut stream, split.train.len(), batch_size);
        let batch: Vec<&SceneSample> =
            picked.iter().map(|i| &scene.samples[split.train[i]]).collect();
        let lr = lr_at(step, total, warmup, config.lr_min, config.lr_max);
        finetune_step(&batch, &mut encoder, &mut head, &mut optimizer, lr, &config.encoder, config.clip_norm)?;
    }

    let test: Vec<&SceneSample> = split.test.iter().map(|&i| &scene.samples[i]).collect();
    let errors = evaluate_errors(&test, &encoder, &config.encoder, &head)?;
    Ok(FinetuneOutcome { stats: error_stats(errors.clone())?, errors, encoder, head })
}

/// Reconstruction quality over held-out pretraining samples.
pub struct SsimCell {
    pub scene_id: String,
    pub seed: u64,
    pub mean_ssim: f64,
    pub samples: usize,
}

/// Mask, encode, render, and score SSIM on the holdout tail of each
/// pretraining scene that has a trained decoder.
pub fn ssim_eval(
    config: &ExperimentConfig,
    corpus: &Corpus,
    state: &TrainState,
    seed: u64,
) -> Result<Vec<SsimCell>> {
    let mut rows = Vec::new();
    for scene in &corpus.pretrain {
        let Some(field) = state.registry.get(&scene.scene_id) else {
            continue;
        };
        let pool = train_pool(config, scene);
        let holdout: Vec<&SceneSample> =
            scene.samples[pool..].iter().take(config.ssim_samples_per_scene).collect();
        if holdout.is_empty() {
            continue;
        }
        let mut mask_rng = ChaCha8Rng::seed_from_u64(subseed(
            seed,
            &format!("ssim-mask/{}", scene.scene_id),
        ));
        let plans: Vec<MaskPlan> = holdout
            .iter()
            .map(|s| MaskPlan::generate(config.mask_ratio, s.num_arrays(), &mut mask_rng))
            .collect::<rfrp_core::Result<_>>()?;

        let scores: Vec<f64> = holdout
            .par_iter()
            .zip(plans.par_iter())
            .flat_map(|(sample, plan)| {
                sample
                    .measurements
                    .par_iter()
                    .enumerate()
                    .map(|(g, m)| {
                        let z = encode_feature(
                            &m.spectrum,
                            m.array_index,
                            m.origin,
                            &state.encoder,
                            &state.encoder_cfg,
                            Some(&plan.kept[g]),
                        );
                        let recon =
                            render_spectrum(field, m.origin, &m.rotation, &Conditioning::Latent(z));
                        rfrp_core::pretrain::ssim(&m.spectrum, &recon)
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        rows.push(SsimCell {
            scene_id: scene.scene_id.clone(),
            seed,
            mean_ssim: mean,
            samples: scores.len(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Ablation matrices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    PretrainVsScratch,
    MaskSweep,
    MoeConfigs,
    SsimEval,
}

impl FromStr for AblationKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "pretrain_vs_scratch" => Ok(Self::PretrainVsScratch),
            "mask_sweep" => Ok(Self::MaskSweep),
            "moe_configs" => Ok(Self::MoeConfigs),
            "ssim_eval" => Ok(Self::SsimEval),
            other => Err(HarnessError::UnknownAblation(other.to_string())),
        }
    }
}

/// One fine-tuning evaluation cell.
#[derive(Debug, Clone)]
pub struct FinetuneCell {
    pub scene_id: String,
    pub label_fraction: f64,
    pub variant: String,
    pub seed: u64,
    pub stats: ErrorStats,
}

#[derive(Debug, Clone)]
pub struct MaskCell {
    pub ratio: f64,
    pub seed: u64,
    pub scene_id: String,
    pub stats: ErrorStats,
}

#[derive(Debug, Clone)]
pub struct MoeCell {
    pub variant: String,
    pub seed: u64,
    pub scene_id: String,
    pub stats: ErrorStats,
}

pub enum AblationReport {
    Finetune(Vec<FinetuneCell>),
    Mask(Vec<MaskCell>),
    Moe(Vec<MoeCell>),
    Ssim(Vec<SsimCell>),
}

/// Pretrained artifacts memoized across ablation cells. Keyed by the full
/// config JSON plus the seed, so any two cells with identical training
/// inputs share one run.
#[derive(Default)]
pub struct PretrainMemo {
    runs: BTreeMap<(String, u64), (ParamSet, DecoderRegistry)>,
}

impl PretrainMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pretrained(
        &mut self,
        config: &ExperimentConfig,
        corpus: &Corpus,
        seed: u64,
    ) -> Result<&(ParamSet, DecoderRegistry)> {
        let key = (
            serde_json::to_string(config).map_err(HarnessError::json("memo key"))?,
            seed,
        );
        if !self.runs.contains_key(&key) {
            let state = run_pretrain::<std::io::Sink>(config, corpus, seed, None)?;
            self.runs.insert(key.clone(), (state.encoder, state.registry));
        }
        Ok(self.runs.get(&key).expect("just inserted"))
    }

    /// Full training state (with optimizer and stream) for kinds that need
    /// the registry and the encoder together.
    pub fn pretrained_state(
        &mut self,
        config: &ExperimentConfig,
        corpus: &Corpus,
        seed: u64,
    ) -> Result<TrainState> {
        let (encoder, registry) = self.pretrained(config, corpus, seed)?.clone();
        let mut state = init_train_state(config, seed);
        state.encoder = encoder;
        state.registry = registry;
        Ok(state)
    }
}

/// Run one ablation matrix. Every cell carries its seed.
pub fn run_ablation(
    kind: AblationKind,
    config: &ExperimentConfig,
    corpus: &Corpus,
    memo: &mut PretrainMemo,
) -> Result<AblationReport> {
    match kind {
        AblationKind::PretrainVsScratch => {
            let mut cells = Vec::new();
            for &seed in &config.seeds {
                let pretrained = memo.pretrained(config, corpus, seed)?.0.clone();
                for scene in &corpus.test {
                    for &fraction in &config.label_fractions {
                        let pre = finetune_scene(config, scene, Some(&pretrained), seed, fraction)?;
                        cells.push(FinetuneCell {
                            scene_id: scene.scene_id.clone(),
                            label_fraction: fraction,
                            variant: "pretrained".into(),
                            seed,
                            stats: pre.stats,
                        });
                        let scratch = finetune_scene(config, scene, None, seed, fraction)?;
                        cells.push(FinetuneCell {
                            scene_id: scene.scene_id.clone(),
                            label_fraction: fraction,
                            variant: "scratch".into(),
                            seed,
                            stats: scratch.stats,
                        });
                    }
                }
            }
            Ok(AblationReport::Finetune(cells))
        }
        AblationKind::MaskSweep => {
            let mut cells = Vec::new();
            let scene = corpus
                .test
                .first()
                .ok_or_else(|| HarnessError::MissingDataset("no test scenes".into()))?;
            let fraction = config.label_fractions.first().copied().unwrap_or(0.2);
            for &ratio in &config.mask_ratios {
                let mut cfg = config.clone();
                cfg.mask_ratio = ratio;
                for &seed in &config.seeds {
                    let pretrained = memo.pretrained(&cfg, corpus, seed)?.0.clone();
                    let out = finetune_scene(&cfg, scene, Some(&pretrained), seed, fraction)?;
                    cells.push(MaskCell {
                        ratio,
                        seed,
                        scene_id: scene.scene_id.clone(),
                        stats: out.stats,
                    });
                }
            }
            Ok(AblationReport::Mask(cells))
        }
        AblationKind::MoeConfigs => {
            let mut cells = Vec::new();
            let scene = corpus
                .test
                .first()
                .ok_or_else(|| HarnessError::MissingDataset("no test scenes".into()))?;
            let fraction = config.label_fractions.first().copied().unwrap_or(0.2);
            for variant in moe_variants() {
                let cfg = variant.configure(config);
                for &seed in &config.seeds {
                    let pretrained = memo.pretrained(&cfg, corpus, seed)?.0.clone();
                    let out = finetune_scene(&cfg, scene, Some(&pretrained), seed, fraction)?;
                    cells.push(MoeCell {
                        variant: variant.name.to_string(),
                        seed,
                        scene_id: scene.scene_id.clone(),
                        stats: out.stats,
                    });
                }
            }
            Ok(AblationReport::Moe(cells))
        }
        AblationKind::SsimEval => {
            let mut cells = Vec::new();
            for &seed in &config.seeds {
                let state = memo.pretrained_state(config, corpus, seed)?;
                cells.extend(ssim_eval(config, corpus, &state, seed)?);
            }
            Ok(AblationReport::Ssim(cells))
        }
    }
}

/// Write an ablation report as CSV rows.
pub fn write_report<W: Write>(report: &AblationReport, writer: &mut CsvWriter<W>) -> Result<()> {
    match report {
        AblationReport::Finetune(cells) => {
            for c in cells {
                writer.row(&[
                    c.scene_id.clone(),
                    fmt_f64(c.label_fraction),
                    c.variant.clone(),
                    c.seed.to_string(),
                    fmt_f64(c.stats.mean * 100.0),
                    fmt_f64(c.stats.median * 100.0),
                    fmt_f64(c.stats.p25 * 100.0),
                    fmt_f64(c.stats.p75 * 100.0),
                    fmt_f64(c.stats.p90 * 100.0),
                ])?;
            }
        }
        AblationReport::Mask(cells) => {
            for c in cells {
                writer.row(&[
                    fmt_f64(c.ratio),
                    c.seed.to_string(),
                    c.scene_id.clone(),
                    fmt_f64(c.stats.mean * 100.0),
                    fmt_f64(c.stats.median * 100.0),
                    fmt_f64(c.stats.p25 * 100.0),
                    fmt_f64(c.stats.p75 * 100.0),
                    fmt_f64(c.stats.p90 * 100.0),
                ])?;
            }
        }
        AblationReport::Moe(cells) => {
            for c in cells {
                writer.row(&[
                    c.variant.clone(),
                    c.seed.to_string(),
                    c.scene_id.clone(),
                    fmt_f64(c.stats.mean * 100.0),
                    fmt_f64(c.stats.median * 100.0),
                    fmt_f64(c.stats.p25 * 100.0),
                    fmt_f64(c.stats.p75 * 100.0),
                    fmt_f64(c.stats.p90 * 100.0),
                ])?;
            }
        }
        AblationReport::Ssim(cells) => {
            for c in cells {
                writer.row(&[
                    c.scene_id.clone(),
                    c.seed.to_string(),
                    fmt_f64(c.mean_ssim),
                    c.samples.to_string(),
                ])?;
            }
        }
    }
    writer.flush()
}

pub fn report_header(kind: AblationKind) -> &'static str {
    match kind {
        AblationKind::PretrainVsScratch => {
            "scene_id,label_fraction,variant,seed,mean_cm,median_cm,p25_cm,p75_cm,p90_cm"
        }
        AblationKind::MaskSweep => "ratio,seed,scene_id,mean_cm,median_cm,p25_cm,p75_cm,p90_cm",
        AblationKind::MoeConfigs => "variant,seed,scene_id,mean_cm,median_cm,p25_cm,p75_cm,p90_cm",
        AblationKind::SsimEval => "scene_id,seed,mean_ssim,samples",
    }
}

/// Per-scene localization evaluation with a strategy.
pub fn eval_scene(localizer: &dyn Localizer, scene: &SceneData) -> Result<ErrorStats> {
    let errors: Vec<f64> = scene
        .samples
        .par_iter()
        .filter(|s| s.is_labeled())
        .map(|s| {
            let p = localizer.locate(s)?;
            let t = s.tx_pos().expect("filtered to labeled");
            Ok(((0..3).map(|i| (p[i] - t[i]).powi(2)).sum::<f64>()).sqrt())
        })
        .collect::<rfrp_core::Result<_>>()?;
    Ok(error_stats(errors)?)
}
