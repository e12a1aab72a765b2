//! Self-supervised pretraining of an RF localization encoder against a
//! radiance-field spectrum decoder, plus everything around it: a synthetic
//! multipath spectrum simulator, a transformer encoder with mixture-of-
//! experts routing, masked-autoencoder pretraining, supervised fine-tuning,
//! and a classical triangulation baseline.
//!
//! All numerics are `f64` on a small reverse-mode tape ([`tape`]); every
//! backward pass is validated against central finite differences
//! ([`gradcheck`]). Trainable state is quantized to f32 precision after
//! each optimizer step so binary checkpoints round-trip exactly.

pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod moe;
pub mod params;
pub mod pretrain;
pub mod rfnerf;
pub mod spectrum;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Derive a child seed from a master seed and a purpose tag.
///
/// splitmix64 over the master seed mixed with an FNV-1a hash of the tag;
/// deterministic across platforms.
pub fn subseed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subseed_distinguishes_tags_and_masters() {
        assert_ne!(subseed(1, "mask"), subseed(1, "batch"));
        assert_ne!(subseed(1, "mask"), subseed(2, "mask"));
        assert_eq!(subseed(7, "x"), subseed(7, "x"));
    }
}
