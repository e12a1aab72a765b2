//! In-memory training samples and deterministic splits.
//!
//! A measurement is one array's view of one transmitter placement; a scene
//! sample groups the G arrays that observed the same placement. File I/O
//! lives in the harness crate; everything here is already parsed.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spectrum::SpatialSpectrum;

/// One array's measurement of one transmitter placement.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub array_index: usize,
    pub origin: [f64; 3],
    /// Row-major local-to-scene rotation.
    pub rotation: [[f64; 3]; 3],
    pub spectrum: SpatialSpectrum,
    /// Transmitter position when the sample is labeled.
    pub tx_pos: Option<[f64; 3]>,
}

/// All arrays' measurements of one transmitter placement in one scene.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub scene_id: String,
    pub measurements: Vec<Measurement>,
}

impl SceneSample {
    pub fn num_arrays(&self) -> usize {
        self.measurements.len()
    }

    pub fn tx_pos(&self) -> Option<[f64; 3]> {
        self.measurements.first().and_then(|m| m.tx_pos)
    }

    pub fn is_labeled(&self) -> bool {
        self.tx_pos().is_some()
    }
}

/// Deterministic train/test split by shuffled indices.
///
/// The last `test_fraction` of a seeded shuffle becomes the test set; of
/// the remainder, the first `round(label_fraction * total)` indices form
/// the training set.
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(
    total: usize,
    test_fraction: f64,
    label_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Split> {
    let mut indices: Vec<usize> = (0..total).collect();
    indices.shuffle(rng);
    let test_count = (test_fraction * total as f64).round() as usize;
    if test_count == 0 || test_count >= total {
        return Err(Error::EmptySplit(format!(
            "test fraction {test_fraction} of {total} samples"
        )));
    }
    let (pool, test) = indices.split_at(total - test_count);
    let train_count = (label_fraction * total as f64).round() as usize;
    if train_count == 0 {
        return Err(Error::EmptySplit(format!(
            "label fraction {label_fraction} of {total} samples"
        )));
    }
    if train_count > pool.len() {
        return Err(Error::EmptySplit(format!(
            "label fraction {label_fraction} exceeds the non-test pool"
        )));
    }
    Ok(Split {
        train: pool[..train_count].to_vec(),
        test: test.to_vec(),
    })
}
