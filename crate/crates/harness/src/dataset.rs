//! Synthetic corpus generation and JSON-lines persistence.
//!
//! One record per (scene, placement, array), written placement-major so a
//! placement's G arrays are consecutive with array_index counting up from
//! zero — the loader regroups on that boundary. Pretraining scenes are
//! partially labeled; test scenes fully labeled.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfrp_core::data::{Measurement, SceneSample};
use rfrp_core::spectrum::{
    compute_spectrum, synthesize_measurement, ArrayGeometry, Reflector, Scene, SpatialSpectrum,
};
use rfrp_core::subseed;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// On-disk record: one array's spectrum for one transmitter placement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_id: String,
    pub array_index: usize,
    pub origin: [f64; 3],
    /// Row-major local-to-scene rotation.
    pub rotation: [f64; 9],
    /// Row-major 36x9 magnitudes.
    pub spectrum: Vec<f64>,
    /// Present on labeled placements only.
    pub tx_pos: Option<[f64; 3]>,
}

/// An in-memory scene: fixed arrays plus all grouped placements.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene_id: String,
    pub samples: Vec<SceneSample>,
}

impl SceneData {
    pub fn num_arrays(&self) -> usize {
        self.samples.first().map(|s| s.num_arrays()).unwrap_or(0)
    }
}

/// The full generated corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub pretrain: Vec<SceneData>,
    pub test: Vec<SceneData>,
}

pub fn pretrain_path(data_dir: &Path) -> PathBuf {
    data_dir.join("pretrain.jsonl")
}

pub fn test_path(data_dir: &Path) -> PathBuf {
    data_dir.join("test.jsonl")
}

/// Sample a scene's fixed layout: wall-mounted arrays posed with their
/// boresight into the room and a random in-plane spin, plus 1-4 point
/// reflectors.
fn generate_scene(config: &ExperimentConfig, scene_id: &str, rng: &mut ChaCha8Rng) -> Scene {
    let bounds = config.bounds();
    let num_arrays = rng.gen_range(2..=3usize);
    let e = bounds.extent();
    let mut arrays = Vec::with_capacity(num_arrays);
    for _ in 0..num_arrays {
        // Wall 0/1: x = min/max plane, 2/3: y = min/max plane.
        let wall = rng.gen_range(0..4usize);
        let u = rng.gen_range(0.3..0.7);
        let z = bounds.min[2] + rng.gen_range(0.35..0.8) * e[2];
        let inset = 0.05;
        let (origin, normal): ([f64; 3], [f64; 3]) = match wall {
            0 => ([bounds.min[0] + inset, bounds.min[1] + u * e[1], z], [1.0, 0.0, 0.0]),
            1 => ([bounds.max[0] - inset, bounds.min[1] + u * e[1], z], [-1.0, 0.0, 0.0]),
            2 => ([bounds.min[0] + u * e[0], bounds.min[1] + inset, z], [0.0, 1.0, 0.0]),
            _ => ([bounds.min[0] + u * e[0], bounds.max[1] - inset, z], [0.0, -1.0, 0.0]),
        };
        let rotation = boresight_rotation(normal, rng.gen_range(0.0..std::f64::consts::TAU));
        arrays.push(ArrayGeometry {
            side: config.array_side,
            spacing_wavelengths: 0.5,
            origin,
            rotation,
            wavelength: config.wavelength,
        });
    }

    let reflectors = (0..rng.gen_range(1..=4usize))
        .map(|_| {
            let position = [
                bounds.min[0] + rng.gen_range(0.1..0.9) * e[0],
                bounds.min[1] + rng.gen_range(0.1..0.9) * e[1],
                bounds.min[2] + rng.gen_range(0.1..0.9) * e[2],
            ];
            let mag = rng.gen_range(0.2..0.8);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            Reflector { position, coeff_re: mag * phase.cos(), coeff_im: mag * phase.sin() }
        })
        .collect();

    Scene {
        scene_id: scene_id.to_string(),
        arrays,
        reflectors,
        bounds,
        wavelength: config.wavelength,
    }
}

/// Rotation mapping the array's local +z axis onto `normal`, with a spin
/// about the boresight.
fn boresight_rotation(normal: [f64; 3], spin: f64) -> [[f64; 3]; 3] {
    // Tangent frame on the wall: t1 x t2 = normal.
    let t1 = if normal[0].abs() > 0.5 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let t2 = cross(normal, t1);
    let t2 = norm3(t2);
    let t1 = cross(t2, normal);
    let (c, s) = (spin.cos(), spin.sin());
    // Columns: images of local x, y, z.
    let lx = [
        c * t1[0] + s * t2[0],
        c * t1[1] + s * t2[1],
        c * t1[2] + s * t2[2],
    ];
    let ly = [
        -s * t1[0] + c * t2[0],
        -s * t1[1] + c * t2[1],
        -s * t1[2] + c * t2[2],
    ];
    [
        [lx[0], ly[0], normal[0]],
        [lx[1], ly[1], normal[1]],
        [lx[2], ly[2], normal[2]],
    ]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn sample_tx(scene: &Scene, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let bounds = &scene.bounds;
    let e = bounds.extent();
    loop {
        let tx = [
            bounds.min[0] + rng.gen_range(0.05..0.95) * e[0],
            bounds.min[1] + rng.gen_range(0.05..0.95) * e[1],
            bounds.min[2] + rng.gen_range(0.05..0.95) * e[2],
        ];
        let clear = scene.arrays.iter().all(|a| {
            a.element_positions().iter().all(|p| {
                let d = [tx[0] - p[0], tx[1] - p[1], tx[2] - p[2]];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() > 0.15
            })
        });
        if clear {
            return tx;
        }
    }
}

/// Generate one scene's records in placement-major order.
fn generate_scene_records(
    config: &ExperimentConfig,
    scene_id: &str,
    placements: usize,
    label_fraction: f64,
    seed: u64,
) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("scene/{scene_id}")));
    let scene = generate_scene(config, scene_id, &mut rng);

    // Deterministic labeled subset of exactly round(fraction * n).
    let labeled_count = (label_fraction * placements as f64).round() as usize;
    let mut order: Vec<usize> = (0..placements).collect();
    order.shuffle(&mut rng);
    let mut labeled = vec![false; placements];
    for &i in order.iter().take(labeled_count) {
        labeled[i] = true;
    }

    let mut records = Vec::with_capacity(placements * scene.arrays.len());
    for (p, &is_labeled) in labeled.iter().enumerate().take(placements) {
        let _ = p;
        let tx = sample_tx(&scene, &mut rng);
        for (g, array) in scene.arrays.iter().enumerate() {
            let signal = synthesize_measurement(&scene, tx, g).expect("tx sampled clear of arrays");
            let spectrum = compute_spectrum(array, &signal, config.noise_std, &mut rng, g)
                .expect("element count matches");
            records.push(DatasetRecord {
                scene_id: scene_id.to_string(),
                array_index: g,
                origin: array.origin,
                rotation: flatten_rotation(&array.rotation),
                spectrum: spectrum.values().to_vec(),
                tx_pos: if is_labeled { Some(tx) } else { None },
            });
        }
    }
    records
}

fn flatten_rotation(r: &[[f64; 3]; 3]) -> [f64; 9] {
    [
        r[0][0], r[0][1], r[0][2],
        r[1][0], r[1][1], r[1][2],
        r[2][0], r[2][1], r[2][2],
    ]
}

fn unflatten_rotation(r: &[f64; 9]) -> [[f64; 3]; 3] {
    [
        [r[0], r[1], r[2]],
        [r[3], r[4], r[5]],
        [r[6], r[7], r[8]],
    ]
}

/// Generate the full corpus to `<data_dir>/pretrain.jsonl` and
/// `<data_dir>/test.jsonl`. Byte-identical for identical (config, seed).
pub fn gen_dataset(config: &ExperimentConfig, data_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(data_dir).map_err(HarnessError::io(data_dir.display().to_string()))?;
    let seed = config.data_seed;

    let write = |path: &Path, scenes: &[(String, usize, f64)]| -> Result<()> {
        let file = File::create(path).map_err(HarnessError::io(path.display().to_string()))?;
        let mut out = BufWriter::new(file);
        for (scene_id, placements, fraction) in scenes {
            let records = generate_scene_records(config, scene_id, *placements, *fraction, seed);
            for record in records {
                let line = serde_json::to_string(&record)
                    .map_err(HarnessError::json("dataset record"))?;
                out.write_all(line.as_bytes())
                    .and_then(|_| out.write_all(b"\n"))
                    .map_err(HarnessError::io(path.display().to_string()))?;
            }
        }
        out.flush().map_err(HarnessError::io(path.display().to_string()))
    };

    let pretrain_scenes: Vec<(String, usize, f64)> = (0..config.pretrain_scenes)
        .map(|i| (format!("P{}", i + 1), config.samples_per_scene, config.pretrain_label_fraction))
        .collect();
    write(&pretrain_path(data_dir), &pretrain_scenes)?;

    let test_scenes: Vec<(String, usize, f64)> = (0..config.test_scenes)
        .map(|i| (format!("S{}", i + 1), config.test_samples_per_scene, 1.0))
        .collect();
    write(&test_path(data_dir), &test_scenes)
}

/// Load one JSONL file into grouped scenes. Groups are consecutive records
/// of one scene starting at array_index 0.
pub fn load_scenes(path: &Path) -> Result<Vec<SceneData>> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::MissingDataset(path.display().to_string())
        } else {
            HarnessError::Io { path: path.display().to_string(), source: e }
        }
    })?;
    let reader = BufReader::new(file);

    let mut scenes: Vec<SceneData> = Vec::new();
    let mut current: Option<SceneSample> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(HarnessError::io(path.display().to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(HarnessError::json(format!("{}:{}", path.display(), lineno + 1)))?;
        let measurement = Measurement {
            array_index: record.array_index,
            origin: record.origin,
            rotation: unflatten_rotation(&record.rotation),
            spectrum: SpatialSpectrum::from_vec(record.spectrum, record.array_index)
                .map_err(HarnessError::Core)?,
            tx_pos: record.tx_pos,
        };
        if record.array_index == 0 {
            if let Some(done) = current.take() {
                push_sample(&mut scenes, done);
            }
            current = Some(SceneSample {
                scene_id: record.scene_id.clone(),
                measurements: vec![measurement],
            });
        } else if let Some(sample) = current.as_mut() {
            sample.measurements.push(measurement);
        } else {
            return Err(HarnessError::Truncated(format!(
                "{}:{} starts mid-group",
                path.display(),
                lineno + 1
            )));
        }
    }
    if let Some(done) = current.take() {
        push_sample(&mut scenes, done);
    }
    Ok(scenes)
}

fn push_sample(scenes: &mut Vec<SceneData>, sample: SceneSample) {
    match scenes.last_mut() {
        Some(s) if s.scene_id == sample.scene_id => s.samples.push(sample),
        _ => scenes.push(SceneData { scene_id: sample.scene_id.clone(), samples: vec![sample] }),
    }
}

/// Load the whole corpus from a data directory.
pub fn load_corpus(data_dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        pretrain: load_scenes(&pretrain_path(data_dir))?,
        test: load_scenes(&test_path(data_dir))?,
    })
}
