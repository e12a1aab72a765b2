//! `rfrp`: dataset generation, pretraining, fine-tuning, evaluation, and
//! ablation experiments from the command line.
//!
//! Flags mirror the experiment config; `--config FILE` (JSON) overrides
//! any flags. Exit code 0 on success; failures print one JSON error line
//! to stderr and exit nonzero.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfrp_core::finetune::{NeuralLocalizer, TriangulationLocalizer};
use rfrp_harness::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use rfrp_harness::config::ExperimentConfig;
use rfrp_harness::dataset::{gen_dataset, load_corpus};
use rfrp_harness::error::{HarnessError, Result};
use rfrp_harness::experiments::{
    eval_scene, finetune_scene, metrics_header, report_header, run_ablation, run_pretrain,
    ssim_eval, write_report, AblationKind, PretrainMemo,
};
use rfrp_harness::metrics::{fmt_f64, CsvWriter};

#[derive(Parser)]
#[command(name = "rfrp", version, about = "Spatial-spectrum localization workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the experiment config. Unset flags keep defaults; a
/// `--config` file overrides flags.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// JSON config file; its values override any flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    pretrain_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    #[arg(long)]
    samples_per_scene: Option<usize>,
    #[arg(long)]
    test_samples_per_scene: Option<usize>,
    #[arg(long)]
    pretrain_label_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    label_fractions: Option<Vec<f64>>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    mask_ratios: Option<Vec<f64>>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    wavelength: Option<f64>,
    #[arg(long)]
    array_side: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Comma-separated 1-based layer indices using expert routing.
    #[arg(long, value_delimiter = ',')]
    moe_layers: Option<Vec<usize>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    shared_experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    dec_attn_layers: Option<usize>,
    #[arg(long)]
    dec_attn_width: Option<usize>,
    #[arg(long)]
    dec_feature_dim: Option<usize>,
    #[arg(long)]
    dec_pe_dim: Option<usize>,
    #[arg(long)]
    ray_samples: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    ssim_samples_per_scene: Option<usize>,
}

impl ConfigFlags {
    /// defaults -> flags -> config file (file wins, merged field-wise).
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(
            seeds, data_seed, split_seed, pretrain_scenes, test_scenes, samples_per_scene,
            test_samples_per_scene, pretrain_label_fraction, label_fractions, test_fraction,
            mask_ratio, mask_ratios, noise_std, wavelength, array_side, pretrain_steps,
            finetune_steps, batch_size, lr_min, lr_max, warmup_fraction, clip_norm,
            ssim_samples_per_scene
        );
        if let Some(v) = self.encoder_layers {
            cfg.encoder.layers = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.encoder.embed_dim = v;
        }
        if let Some(v) = self.heads {
            cfg.encoder.heads = v;
        }
        if let Some(v) = self.ffn_dim {
            cfg.encoder.ffn_dim = v;
        }
        if let Some(v) = &self.moe_layers {
            cfg.encoder.moe_layer_indices = BTreeSet::from_iter(v.iter().copied());
        }
        if let Some(v) = self.feature_dim {
            cfg.encoder.feature_dim = v;
            cfg.decoder.latent_dim = v;
        }
        if let Some(v) = self.mlp_dim {
            cfg.encoder.mlp_dim = v;
        }
        if let Some(v) = self.experts {
            cfg.encoder.moe.num_experts = v;
        }
        if let Some(v) = self.shared_experts {
            cfg.encoder.moe.shared_experts = v;
        }
        if let Some(v) = self.top_k {
            cfg.encoder.moe.top_k = v;
        }
        if let Some(v) = self.dec_attn_layers {
            cfg.decoder.attn_layers = v;
        }
        if let Some(v) = self.dec_attn_width {
            cfg.decoder.attn_width = v;
        }
        if let Some(v) = self.dec_feature_dim {
            cfg.decoder.feature_dim = v;
        }
        if let Some(v) = self.dec_pe_dim {
            cfg.decoder.pe_dim = v;
        }
        if let Some(v) = self.ray_samples {
            cfg.decoder.ray_samples = v;
        }

        if let Some(path) = &self.config {
            cfg = merge_config_file(&cfg, path)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Merge a JSON config file over a base config: object fields merge
/// recursively, everything else is replaced by the file's value.
fn merge_config_file(base: &ExperimentConfig, path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
    let overlay: serde_json::Value =
        serde_json::from_str(&text).map_err(HarnessError::json(path.display().to_string()))?;
    let mut value =
        serde_json::to_value(base).map_err(HarnessError::json("config serialization"))?;
    merge_json(&mut value, &overlay);
    serde_json::from_value(value).map_err(HarnessError::json(path.display().to_string()))
}

fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (pretrain.jsonl, test.jsonl).
    GenData {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Pretrain the encoder against per-scene decoders.
    Pretrain {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Training seed (falls back to RFRP_SEED, then the config's first
        /// seed).
        #[arg(long, env = "RFRP_SEED")]
        seed: Option<u64>,
    },
    /// Fine-tune on one test scene from a checkpoint or from scratch.
    Finetune {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Pretrained checkpoint; omit with --scratch for a fresh encoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train from random initialization instead of a checkpoint.
        #[arg(long)]
        scratch: bool,
        /// Scene id (e.g. S1).
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 0.2)]
        label_fraction: f64,
        #[arg(long, env = "RFRP_SEED")]
        seed: Option<u64>,
    },
    /// Evaluate a localization strategy on the test scenes.
    Eval {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// "model" (needs a fine-tuned checkpoint) or "triangulation".
        #[arg(long, default_value = "model")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one scene id.
        #[arg(long)]
        scene: Option<String>,
    },
    /// Run an experiment matrix and emit a CSV.
    Ablate {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// pretrain_vs_scratch | mask_sweep | moe_configs | ssim_eval
        #[arg(long)]
        kind: String,
        /// For ssim_eval: reuse this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a checkpoint summary.
    InspectCheckpoint { path: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { flags, data_dir } => {
            let cfg = flags.resolve()?;
            gen_dataset(&cfg, &data_dir)?;
            println!(
                "wrote {} and {}",
                data_dir.join("pretrain.jsonl").display(),
                data_dir.join("test.jsonl").display()
            );
            Ok(())
        }
        Command::Pretrain { flags, data_dir, out_dir, seed } => {
            let cfg = flags.resolve()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let corpus = load_corpus(&data_dir)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(HarnessError::io(out_dir.display().to_string()))?;
            let metrics_path = out_dir.join(format!("pretrain_seed{seed}_metrics.csv"));
            let mut metrics = CsvWriter::append(&metrics_path, &metrics_header(&cfg))?;
            let state = run_pretrain(&cfg, &corpus, seed, Some(&mut metrics))?;
            metrics.flush()?;
            let ckpt_path = out_dir.join(format!("pretrain_seed{seed}.ckpt"));
            save_checkpoint(&state, &ckpt_path)?;
            println!("checkpoint {}", ckpt_path.display());
            println!("metrics {}", metrics_path.display());
            Ok(())
        }
        Command::Finetune { flags, data_dir, out_dir, checkpoint, scratch, scene, label_fraction, seed } => {
            let cfg = flags.resolve()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let corpus = load_corpus(&data_dir)?;
            let scene_data = corpus
                .test
                .iter()
                .chain(corpus.pretrain.iter())
                .find(|s| s.scene_id == scene)
                .ok_or_else(|| HarnessError::UnknownScene(scene.clone()))?;

            let loaded = match (&checkpoint, scratch) {
                (Some(path), false) => Some(load_checkpoint(path)?),
                (None, true) => None,
                (None, false) => {
                    return Err(HarnessError::InvalidArgument(
                        "pass --checkpoint PATH or --scratch".into(),
                    ))
                }
                (Some(_), true) => {
                    return Err(HarnessError::InvalidArgument(
                        "--checkpoint and --scratch are mutually exclusive".into(),
                    ))
                }
            };
            let out = finetune_scene(
                &cfg,
                scene_data,
                loaded.as_ref().map(|s| &s.encoder),
                seed,
                label_fraction,
            )?;

            std::fs::create_dir_all(&out_dir)
                .map_err(HarnessError::io(out_dir.display().to_string()))?;
            let csv_path = out_dir.join("finetune.csv");
            let mut w = CsvWriter::append(
                &csv_path,
                "scene_id,label_fraction,seed,mean_cm,median_cm,p25_cm,p75_cm,p90_cm",
            )?;
            let s = out.stats;
            w.row(&[
                scene.clone(),
                fmt_f64(label_fraction),
                seed.to_string(),
                fmt_f64(s.mean * 100.0),
                fmt_f64(s.median * 100.0),
                fmt_f64(s.p25 * 100.0),
                fmt_f64(s.p75 * 100.0),
                fmt_f64(s.p90 * 100.0),
            ])?;
            w.flush()?;

            // Persist the fine-tuned model for evaluation.
            let variant = if scratch { "scratch" } else { "pretrained" };
            let ckpt_path = out_dir.join(format!("finetune_{scene}_{variant}_seed{seed}.ckpt"));
            let state = TrainState {
                encoder_cfg: cfg.encoder.clone(),
                decoder_cfg: cfg.decoder.clone(),
                encoder: out.encoder,
                registry: loaded
                    .map(|s| s.registry)
                    .unwrap_or_else(|| rfrp_core::pretrain::DecoderRegistry::new(0)),
                optimizer: rfrp_core::pretrain::OptimizerState::new(Default::default()),
                rng: rand::SeedableRng::seed_from_u64(seed),
                head: Some(out.head),
            };
            save_checkpoint(&state, &ckpt_path)?;
            println!(
                "scene {scene} fraction {label_fraction} median {:.1} cm mean {:.1} cm",
                s.median * 100.0,
                s.mean * 100.0
            );
            println!("checkpoint {}", ckpt_path.display());
            println!("stats {}", csv_path.display());
            Ok(())
        }
        Command::Eval { flags, data_dir, out_dir, method, checkpoint, scene } => {
            flags.resolve()?; // validates flag/config combinations
            let corpus = load_corpus(&data_dir)?;
            let scenes: Vec<_> = corpus
                .test
                .iter()
                .filter(|s| scene.as_ref().is_none_or(|id| *id == s.scene_id))
                .collect();
            if scenes.is_empty() {
                return Err(HarnessError::UnknownScene(scene.unwrap_or_else(|| "any".into())));
            }

            std::fs::create_dir_all(&out_dir)
                .map_err(HarnessError::io(out_dir.display().to_string()))?;
            let csv_path = out_dir.join("eval.csv");
            let mut w = CsvWriter::append(
                &csv_path,
                "scene_id,method,mean_cm,median_cm,p25_cm,p75_cm,p90_cm,samples",
            )?;

            let state = match method.as_str() {
                "model" => {
                    let path = checkpoint.ok_or_else(|| {
                        HarnessError::InvalidArgument("--method model needs --checkpoint".into())
                    })?;
                    Some(load_checkpoint(&path)?)
                }
                "triangulation" => None,
                other => {
                    return Err(HarnessError::InvalidArgument(format!(
                        "unknown method {other}; expected model or triangulation"
                    )))
                }
            };

            for scene_data in scenes {
                let stats = match &state {
                    Some(st) => {
                        let head = st.head.as_ref().ok_or(HarnessError::MissingHead)?;
                        let localizer = NeuralLocalizer {
                            encoder: &st.encoder,
                            cfg: &st.encoder_cfg,
                            head,
                        };
                        eval_scene(&localizer, scene_data)?
                    }
                    None => eval_scene(&TriangulationLocalizer, scene_data)?,
                };
                w.row(&[
                    scene_data.scene_id.clone(),
                    method.clone(),
                    fmt_f64(stats.mean * 100.0),
                    fmt_f64(stats.median * 100.0),
                    fmt_f64(stats.p25 * 100.0),
                    fmt_f64(stats.p75 * 100.0),
                    fmt_f64(stats.p90 * 100.0),
                    stats.count.to_string(),
                ])?;
                println!(
                    "{}: median {:.1} cm mean {:.1} cm over {} samples",
                    scene_data.scene_id,
                    stats.median * 100.0,
                    stats.mean * 100.0,
                    stats.count
                );
            }
            w.flush()?;
            println!("stats {}", csv_path.display());
            Ok(())
        }
        Command::Ablate { flags, data_dir, out_dir, kind, checkpoint } => {
            let cfg = flags.resolve()?;
            let kind: AblationKind = kind.parse()?;
            let corpus = load_corpus(&data_dir)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(HarnessError::io(out_dir.display().to_string()))?;
            let csv_path = out_dir.join(match kind {
                AblationKind::PretrainVsScratch => "ablate_pretrain_vs_scratch.csv",
                AblationKind::MaskSweep => "ablate_mask_sweep.csv",
                AblationKind::MoeConfigs => "ablate_moe_configs.csv",
                AblationKind::SsimEval => "ablate_ssim_eval.csv",
            });
            let mut writer = CsvWriter::append(&csv_path, report_header(kind))?;

            if kind == AblationKind::SsimEval {
                if let Some(path) = checkpoint {
                    let state = load_checkpoint(&path)?;
                    let rows = ssim_eval(&cfg, &corpus, &state, cfg.seeds[0])?;
                    write_report(
                        &rfrp_harness::experiments::AblationReport::Ssim(rows),
                        &mut writer,
                    )?;
                    println!("rows {}", csv_path.display());
                    return Ok(());
                }
            }

            let mut memo = PretrainMemo::new();
            let report = run_ablation(kind, &cfg, &corpus, &mut memo)?;
            write_report(&report, &mut writer)?;
            println!("rows {}", csv_path.display());
            Ok(())
        }
        Command::InspectCheckpoint { path } => {
            let state = load_checkpoint(&path)?;
            println!("magic RFRP1 version 1");
            println!(
                "encoder: layers {} embed {} heads {} ffn {} moe layers {:?} experts {}/{} top{}",
                state.encoder_cfg.layers,
                state.encoder_cfg.embed_dim,
                state.encoder_cfg.heads,
                state.encoder_cfg.ffn_dim,
                state.encoder_cfg.moe_layer_indices,
                state.encoder_cfg.moe.shared_experts,
                state.encoder_cfg.moe.num_experts,
                state.encoder_cfg.moe.top_k,
            );
            println!(
                "encoder params: {} blocks, {} scalars",
                state.encoder.len(),
                state.encoder.num_scalars()
            );
            println!(
                "decoder: {} hidden x {}, feature {}, pe {}, ray samples {}",
                state.decoder_cfg.attn_layers,
                state.decoder_cfg.attn_width,
                state.decoder_cfg.feature_dim,
                state.decoder_cfg.pe_dim,
                state.decoder_cfg.ray_samples,
            );
            println!("scenes: {}", state.registry.decoders.len());
            for (scene_id, field) in &state.registry.decoders {
                println!(
                    "  {scene_id}: {} blocks, {} scalars",
                    field.params.len(),
                    field.params.num_scalars()
                );
            }
            println!(
                "optimizer: step {}, {} moment entries",
                state.optimizer.step,
                state.optimizer.entries.len()
            );
            println!("rng: word position {}", state.rng.get_word_pos());
            match &state.head {
                Some(h) => println!("head: {} arrays x {} features", h.arrays, h.feature_dim),
                None => println!("head: none"),
            }
            Ok(())
        }
    }
}
