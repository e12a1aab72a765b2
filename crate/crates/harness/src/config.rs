//! Experiment configuration.
//!
//! A config plus the seed list fully determines any run. Defaults give the
//! desk-scale setup used by the acceptance suite: 8 pretraining scenes of
//! 2000 placements, 2 fully labeled test scenes of 1000, a 4-layer d=64
//! encoder with expert routing on layers 2 and 4, and a compact decoder
//! sized for CPU training. The `--config` file, when given, overrides any
//! command-line flags.

use std::collections::BTreeSet;
use std::path::Path;

use rfrp_core::encoder::EncoderConfig;
use rfrp_core::moe::MoeConfig;
use rfrp_core::pretrain::LossWeights;
use rfrp_core::rfnerf::DecoderConfig;
use rfrp_core::spectrum::Aabb;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Training seeds for multi-seed experiments.
    pub seeds: Vec<u64>,
    /// Seed for corpus generation (fixed across training seeds).
    pub data_seed: u64,
    /// Seed for train/test splits (fixed across training seeds).
    pub split_seed: u64,

    pub pretrain_scenes: usize,
    pub test_scenes: usize,
    /// Transmitter placements per pretraining scene.
    pub samples_per_scene: usize,
    /// Transmitter placements per test scene (fully labeled).
    pub test_samples_per_scene: usize,
    /// Fraction of pretraining placements carrying position labels.
    pub pretrain_label_fraction: f64,
    /// Fraction of each pretraining scene reserved from training batches
    /// for reconstruction evaluation.
    pub holdout_fraction: f64,

    /// Label fractions swept by fine-tuning experiments.
    pub label_fractions: Vec<f64>,
    /// Held-out evaluation fraction of each test scene.
    pub test_fraction: f64,

    pub mask_ratio: f64,
    /// Grid for the mask-ratio sweep.
    pub mask_ratios: Vec<f64>,

    pub noise_std: f64,
    pub wavelength: f64,
    pub array_side: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],

    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss_weights: LossWeights,

    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Rays per render for the per-step reconstruction estimate; null
    /// renders all 324 bins every step.
    pub ray_subset: Option<usize>,
    /// Held-out samples per scene scored in reconstruction evaluation.
    pub ssim_samples_per_scene: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            data_seed: 7777,
            split_seed: 1234,
            pretrain_scenes: 8,
            test_scenes: 2,
            samples_per_scene: 2000,
            test_samples_per_scene: 1000,
            pretrain_label_fraction: 0.213,
            holdout_fraction: 0.1,
            label_fractions: vec![0.2, 0.4, 0.6, 0.8],
            test_fraction: 0.2,
            mask_ratio: 0.75,
            mask_ratios: vec![0.10, 0.25, 0.50, 0.75, 0.90],
            noise_std: 0.01,
            wavelength: 0.125,
            array_side: 4,
            bounds_min: [0.0, 0.0, 0.0],
            bounds_max: [6.0, 4.0, 3.0],
            encoder: EncoderConfig {
                layers: 4,
                embed_dim: 64,
                heads: 4,
                ffn_dim: 256,
                moe_layer_indices: BTreeSet::from([2, 4]),
                feature_dim: 32,
                mlp_dim: 64,
                tokens_per_array: 36,
                moe: MoeConfig { num_experts: 4, shared_experts: 1, top_k: 2 },
            },
            // CPU-sized training decoder; the library default is wider.
            decoder: DecoderConfig {
                attn_layers: 2,
                attn_width: 24,
                feature_dim: 16,
                radiance_widths: (24, 12),
                pe_dim: 8,
                latent_dim: 32,
                ray_samples: 6,
                max_range: None,
            },
            loss_weights: LossWeights::default(),
            pretrain_steps: 1200,
            finetune_steps: 200,
            batch_size: 3,
            lr_min: 3e-5,
            lr_max: 3e-4,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            ray_subset: Some(96),
            ssim_samples_per_scene: 16,
        }
    }
}

impl ExperimentConfig {
    pub fn bounds(&self) -> Aabb {
        Aabb { min: self.bounds_min, max: self.bounds_max }
    }

    pub fn warmup_steps(&self, total: u64) -> u64 {
        (self.warmup_fraction * total as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::InvalidArgument("seed list is empty".into()));
        }
        if self.pretrain_scenes == 0 || self.test_scenes == 0 || self.samples_per_scene == 0 {
            return Err(HarnessError::InvalidArgument("scene and sample counts must be >= 1".into()));
        }
        for i in 0..3 {
            if self.bounds_min[i] >= self.bounds_max[i] {
                return Err(HarnessError::InvalidArgument("bounds_min must be below bounds_max".into()));
            }
        }
        if self.decoder.latent_dim != self.encoder.feature_dim {
            return Err(HarnessError::InvalidArgument(format!(
                "decoder latent_dim {} must equal encoder feature_dim {}",
                self.decoder.latent_dim, self.encoder.feature_dim
            )));
        }
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.batch_size == 0 || self.pretrain_steps == 0 || self.finetune_steps == 0 {
            return Err(HarnessError::InvalidArgument("steps and batch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(HarnessError::io(path.display().to_string()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(HarnessError::json(path.display().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(HarnessError::json("config serialization"))?;
        std::fs::write(path, text).map_err(HarnessError::io(path.display().to_string()))
    }
}
