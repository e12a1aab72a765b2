//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"RFRP1"
//! version u32 (currently 1)
//! encoder config   u32 length + JSON
//! decoder config   u32 length + JSON
//! encoder params   u32 count, then blocks
//! registry         u64 seed, u32 scenes, each: id, bounds (6 x f64), blocks
//! optimizer        4 x f64 adam config, u64 step, u32 entries,
//!                  each: key, u64 step, m block, v block
//! rng              32-byte seed, u128 word position, u64 stream
//! head             u8 flag; if 1: u32 arrays, u32 feature_dim, blocks
//! ```
//!
//! A block is `u32 name length + name + u32 rows + u32 cols + f32 data`.
//! All trained state is f32-quantized in memory, so save -> load -> save
//! reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfrp_core::encoder::EncoderConfig;
use rfrp_core::finetune::FineTuneHead;
use rfrp_core::params::ParamSet;
use rfrp_core::pretrain::{AdamConfig, DecoderRegistry, Moments, OptimizerState};
use rfrp_core::rfnerf::{DecoderConfig, FieldParams};
use rfrp_core::spectrum::Aabb;
use rfrp_core::Tensor;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 5] = b"RFRP1";
pub const VERSION: u32 = 1;

/// Everything a training run needs to resume exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder_cfg: EncoderConfig,
    pub decoder_cfg: DecoderConfig,
    pub encoder: ParamSet,
    pub registry: DecoderRegistry,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub head: Option<FineTuneHead>,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(HarnessError::io(parent.display().to_string()))?;
        }
    }
    let file = File::create(path).map_err(HarnessError::io(path.display().to_string()))?;
    let mut w = Writer { out: BufWriter::new(file), path: path.display().to_string() };

    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.json(&state.encoder_cfg, "encoder config")?;
    w.json(&state.decoder_cfg, "decoder config")?;

    w.u32(state.encoder.len() as u32)?;
    for (name, tensor) in state.encoder.iter() {
        w.block(name, tensor)?;
    }

    w.u64(state.registry.seed)?;
    w.u32(state.registry.decoders.len() as u32)?;
    for (scene_id, field) in &state.registry.decoders {
        w.str(scene_id)?;
        for v in field.bounds.min.iter().chain(field.bounds.max.iter()) {
            w.f64(*v)?;
        }
        w.u32(field.params.len() as u32)?;
        for (name, tensor) in field.params.iter() {
            w.block(name, tensor)?;
        }
    }

    let adam = state.optimizer.config;
    for v in [adam.beta1, adam.beta2, adam.weight_decay, adam.epsilon] {
        w.f64(v)?;
    }
    w.u64(state.optimizer.step)?;
    w.u32(state.optimizer.entries.len() as u32)?;
    for (key, m) in &state.optimizer.entries {
        w.str(key)?;
        w.u64(m.step)?;
        w.block("m", &m.m)?;
        w.block("v", &m.v)?;
    }

    w.bytes(&state.rng.get_seed())?;
    w.bytes(&state.rng.get_word_pos().to_le_bytes())?;
    w.u64(state.rng.get_stream())?;

    match &state.head {
        Some(head) => {
            w.bytes(&[1u8])?;
            w.u32(head.arrays as u32)?;
            w.u32(head.feature_dim as u32)?;
            w.u32(head.params.len() as u32)?;
            for (name, tensor) in head.params.iter() {
                w.block(name, tensor)?;
            }
        }
        None => w.bytes(&[0u8])?,
    }
    w.out.flush().map_err(HarnessError::io(path.display().to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = File::open(path).map_err(HarnessError::io(path.display().to_string()))?;
    let mut r = Reader { inp: BufReader::new(file), path: path.display().to_string() };

    let magic = r.array::<5>()?;
    if &magic != MAGIC {
        return Err(HarnessError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(HarnessError::BadVersion { expected: VERSION, found: version });
    }

    let encoder_cfg: EncoderConfig = r.json("encoder config")?;
    let decoder_cfg: DecoderConfig = r.json("decoder config")?;

    let count = r.u32()? as usize;
    let mut encoder = ParamSet::new();
    for _ in 0..count {
        let (name, tensor) = r.block()?;
        encoder.insert(name, tensor);
    }

    let registry_seed = r.u64()?;
    let scenes = r.u32()? as usize;
    let mut registry = DecoderRegistry::new(registry_seed);
    for _ in 0..scenes {
        let scene_id = r.str()?;
        let mut b = [0.0f64; 6];
        for v in b.iter_mut() {
            *v = r.f64()?;
        }
        let bounds = Aabb { min: [b[0], b[1], b[2]], max: [b[3], b[4], b[5]] };
        let blocks = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..blocks {
            let (name, tensor) = r.block()?;
            params.insert(name, tensor);
        }
        registry
            .decoders
            .insert(scene_id, FieldParams { config: decoder_cfg.clone(), bounds, params });
    }

    let adam = AdamConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        weight_decay: r.f64()?,
        epsilon: r.f64()?,
    };
    let mut optimizer = OptimizerState::new(adam);
    optimizer.step = r.u64()?;
    let entries = r.u32()? as usize;
    for _ in 0..entries {
        let key = r.str()?;
        let step = r.u64()?;
        let (_, m) = r.block()?;
        let (_, v) = r.block()?;
        optimizer.entries.insert(key, Moments { m, v, step });
    }

    let seed = r.array::<32>()?;
    let word_pos = u128::from_le_bytes(r.array::<16>()?);
    let stream = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let head_flag = r.array::<1>()?[0];
    let head = if head_flag == 1 {
        let arrays = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let blocks = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..blocks {
            let (name, tensor) = r.block()?;
            params.insert(name, tensor);
        }
        Some(FineTuneHead { arrays, feature_dim, params })
    } else {
        None
    };

    Ok(TrainState { encoder_cfg, decoder_cfg, encoder, registry, optimizer, rng, head })
}

struct Writer {
    out: BufWriter<File>,
    path: String,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b).map_err(HarnessError::io(self.path.clone()))
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    fn json<T: serde::Serialize>(&mut self, value: &T, context: &str) -> Result<()> {
        let text = serde_json::to_string(value).map_err(HarnessError::json(context))?;
        self.str(&text)
    }

    fn block(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        self.str(name)?;
        self.u32(tensor.rows() as u32)?;
        self.u32(tensor.cols() as u32)?;
        for &v in tensor.data() {
            self.bytes(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader {
    inp: BufReader<File>,
    path: String,
}

impl Reader {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inp.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                HarnessError::Truncated(self.path.clone())
            } else {
                HarnessError::Io { path: self.path.clone(), source: e }
            }
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array::<4>()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array::<8>()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array::<8>()?))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 24 {
            return Err(HarnessError::Truncated(format!("{}: implausible string", self.path)));
        }
        let mut buf = vec![0u8; len];
        self.inp.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                HarnessError::Truncated(self.path.clone())
            } else {
                HarnessError::Io { path: self.path.clone(), source: e }
            }
        })?;
        String::from_utf8(buf)
            .map_err(|_| HarnessError::Truncated(format!("{}: invalid utf-8", self.path)))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, context: &str) -> Result<T> {
        let text = self.str()?;
        serde_json::from_str(&text).map_err(HarnessError::json(context))
    }

    fn block(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows * cols > 1 << 28 {
            return Err(HarnessError::Truncated(format!("{}: implausible block", self.path)));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f32::from_le_bytes(self.array::<4>()?) as f64);
        }
        Ok((name, Tensor::from_vec(rows, cols, data)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_state(seed: u64) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_cfg = EncoderConfig {
            layers: 1,
            embed_dim: 8,
            heads: 2,
            ffn_dim: 8,
            moe_layer_indices: std::collections::BTreeSet::from([1]),
            feature_dim: 4,
            mlp_dim: 4,
            moe: rfrp_core::moe::MoeConfig { num_experts: 3, shared_experts: 1, top_k: 1 },
            ..EncoderConfig::default()
        };
        let decoder_cfg = DecoderConfig {
            attn_layers: 1,
            attn_width: 6,
            feature_dim: 4,
            radiance_widths: (6, 4),
            pe_dim: 2,
            latent_dim: 4,
            ray_samples: 3,
            max_range: None,
        };
        let mut encoder = rfrp_core::encoder::init_encoder_params(&encoder_cfg, &mut rng);
        encoder.quantize_f32();
        let bounds = Aabb { min: [0.0; 3], max: [4.0, 4.0, 3.0] };
        let mut registry = DecoderRegistry::new(11);
        for scene in ["P1", "P2"] {
            let f = registry.get_or_init(scene, &decoder_cfg, bounds);
            f.params.quantize_f32();
        }
        let mut optimizer = OptimizerState::new(AdamConfig::default());
        optimizer.step = 5;
        optimizer.entries.insert(
            "enc|token.w".into(),
            Moments {
                m: Tensor::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)).quantize_f32(),
                v: Tensor::from_fn(2, 2, |_, _| rng.gen_range(0.0..1.0)).quantize_f32(),
                step: 5,
            },
        );
        let mut state_rng = ChaCha8Rng::seed_from_u64(99);
        let _: f64 = state_rng.gen();
        let mut head = FineTuneHead::init(2, 4, &mut rng);
        head.params.quantize_f32();
        TrainState {
            encoder_cfg,
            decoder_cfg,
            encoder,
            registry,
            optimizer,
            rng: state_rng,
            head: Some(head),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let state = sample_state(1);
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);

        // State equality too.
        assert_eq!(loaded.encoder, state.encoder);
        assert_eq!(loaded.registry.seed, state.registry.seed);
        assert_eq!(loaded.registry.decoders.len(), 2);
        assert_eq!(
            loaded.registry.decoders["P1"].params,
            state.registry.decoders["P1"].params
        );
        assert_eq!(loaded.optimizer.step, 5);
        assert_eq!(loaded.optimizer.entries["enc|token.w"], state.optimizer.entries["enc|token.w"]);
        assert_eq!(loaded.rng, state.rng);
        assert_eq!(loaded.head.unwrap().params, state.head.unwrap().params);
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let state = sample_state(2);
        save_checkpoint(&state, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, HarnessError::Truncated(_)), "got {err}");
    }

    #[test]
    fn version_and_magic_mismatches_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let state = sample_state(3);
        save_checkpoint(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[5] = 9; // version little-endian low byte
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            HarnessError::BadVersion { expected, found } => {
                assert_eq!(expected, 1);
                assert_eq!(found, 9);
            }
            other => panic!("unexpected error {other}"),
        }

        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), HarnessError::BadMagic { .. }));
    }
}
