//! Dataset ingestion and generation.
//!
//! Consumes the standard 3073-bytes-per-record binary batches (1 label byte
//! followed by 3072 pixel bytes, channel-planar R/G/B), pixels scaled to
//! [0, 1]. Because this workbench also has to run where the real corpus is
//! not available, it ships a deterministic synthetic generator that writes
//! bit-compatible batch files; real batches drop in unchanged.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 3073;
pub const IMAGE_BYTES: usize = 3072;
pub const NUM_CLASSES: usize = 10;

/// In-memory image set: flat u8 pixel planes plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn empty() -> Self {
        Self { pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// One example as a [1,3,32,32] tensor in [0,1] plus its label.
    pub fn example(&self, i: usize) -> Result<(Tensor, usize)> {
        if i >= self.len() {
            return Err(Error::Bounds(format!("example {i} of {}", self.len())));
        }
        let raw = &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
        let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
        Ok((Tensor::new(vec![1, 3, 32, 32], data)?, self.labels[i] as usize))
    }

    /// Parses concatenated 3073-byte records.
    pub fn from_records(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::Dataset(format!(
                "batch size {} is not a multiple of {RECORD_BYTES}",
                bytes.len()
            )));
        }
        let n = bytes.len() / RECORD_BYTES;
        let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(n);
        for rec in bytes.chunks_exact(RECORD_BYTES) {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Dataset(format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Self { pixels, labels })
    }

    pub fn load_batch_files(paths: &[std::path::PathBuf]) -> Result<Self> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(std::fs::read(p)?);
        }
        Self::from_records(&all)
    }

    /// Loads `data_batch_*.bin` (train) and `test_batch.bin` (test) from a
    /// directory.
    pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
        let mut train_paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                    .unwrap_or(false)
            })
            .collect();
        train_paths.sort();
        if train_paths.is_empty() {
            return Err(Error::Dataset(format!("no data_batch_*.bin files in {}", dir.display())));
        }
        let test_path = dir.join("test_batch.bin");
        if !test_path.exists() {
            return Err(Error::Dataset(format!("missing {}", test_path.display())));
        }
        Ok((Self::load_batch_files(&train_paths)?, Self::load_batch_files(&[test_path])?))
    }

    /// Small synthetic set assembled in memory; test fixturing only.
    pub fn synthetic_in_memory(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % NUM_CLASSES) as u8;
            labels.push(class);
            pixels.extend_from_slice(&render_class_image(class as usize, &mut rng));
        }
        Self { pixels, labels }
    }
}

/// Renders one 32×32 RGB image of the given class: a radial texture with a
/// class-specific ring frequency, a bump in a class-specific vertical band,
/// and a class color palette, all jittered per sample and buried in noise.
/// Every cue survives horizontal flips and small crops.
fn render_class_image(class: usize, rng: &mut ChaCha8Rng) -> [u8; IMAGE_BYTES] {
    let freq = 1.1 + 0.47 * class as f32 + rng.random_range(-0.12..0.12f32);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let cx = 15.5 + rng.random_range(-5.0..5.0f32);
    let cy = 15.5 + rng.random_range(-5.0..5.0f32);
    let bump_y = 3.0 + 2.6 * class as f32 + rng.random_range(-1.6..1.6f32);
    let bump_x: f32 = rng.random_range(6.0..26.0);
    let bump_r = 3.0 + (class % 3) as f32 + rng.random_range(-0.5..0.5f32);

    // palette: deterministic per class, jittered per sample
    let mut palette = [0.0f32; 3];
    for (ch, p) in palette.iter_mut().enumerate() {
        let raw = ((class as f32 * 12.9898 + ch as f32 * 78.233).sin() * 43758.547).fract().abs();
        *p = 0.35 + 0.65 * raw + rng.random_range(-0.18..0.18f32);
    }
    let grad_a = rng.random_range(-0.2..0.2f32);
    let grad_b = rng.random_range(-0.2..0.2f32);
    let noise_sigma = 0.14f32;

    let mut out = [0u8; IMAGE_BYTES];
    let noise = |rng: &mut ChaCha8Rng| -> f32 {
        let u1: f32 = rng.random::<f32>().max(1e-7);
        let u2: f32 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
    };
    for y in 0..32usize {
        for x in 0..32usize {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let r = (dx * dx + dy * dy).sqrt();
            let ring = (std::f32::consts::TAU * freq * r / 32.0 + phase).sin();
            let bx = x as f32 - bump_x;
            let by = y as f32 - bump_y;
            let bump = (-(bx * bx + by * by) / (2.0 * bump_r * bump_r)).exp();
            let base = 0.30 * ring + 0.85 * bump + grad_a * (x as f32 / 32.0) + grad_b * (y as f32 / 32.0);
            let n = noise(rng);
            for ch in 0..3 {
                let v = 0.45 + palette[ch] * base + noise_sigma * n;
                out[ch * 1024 + y * 32 + x] = (v.clamp(0.0, 1.0) * 255.0) as u8;
            }
        }
    }
    out
}

/// Writes synthetic batches in the standard binary layout:
/// `data_batch_1..N.bin` of 10k records each plus `test_batch.bin`.
pub fn generate_synthetic(dir: &Path, train_records: usize, test_records: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let write_split = |count: usize, paths: Vec<std::path::PathBuf>, rng: &mut ChaCha8Rng| -> Result<()> {
        let per = count.div_ceil(paths.len().max(1));
        let mut remaining = count;
        for p in paths {
            let n = per.min(remaining);
            remaining -= n;
            let mut buf = Vec::with_capacity(n * RECORD_BYTES);
            for _ in 0..n {
                let class = rng.random_range(0..NUM_CLASSES);
                buf.push(class as u8);
                buf.extend_from_slice(&render_class_image(class, rng));
            }
            std::fs::write(&p, &buf)?;
        }
        Ok(())
    };
    let n_batches = train_records.div_ceil(10_000).max(1);
    let train_paths: Vec<_> = (1..=n_batches).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    write_split(train_records, train_paths, &mut rng)?;
    write_split(test_records, vec![dir.join("test_batch.bin")], &mut rng)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip_preserves_values() {
        let mut bytes = vec![0u8; RECORD_BYTES * 2];
        bytes[0] = 3;
        bytes[1] = 255; // first red pixel of example 0
        bytes[RECORD_BYTES] = 7;
        let ds = Dataset::from_records(&bytes).unwrap();
        assert_eq!(ds.len(), 2);
        let (x, label) = ds.example(0).unwrap();
        assert_eq!(label, 3);
        assert_eq!(x.data()[0], 1.0);
        assert_eq!(ds.example(1).unwrap().1, 7);
    }

    #[test]
    fn malformed_batch_is_rejected() {
        assert!(Dataset::from_records(&[0u8; 100]).is_err());
        let mut bytes = vec![0u8; RECORD_BYTES];
        bytes[0] = 12; // label out of range
        assert!(Dataset::from_records(&bytes).is_err());
    }

    #[test]
    fn generated_batches_load_back_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(dir.path(), 120, 40, 9).unwrap();
        let (train, test) = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(train.len(), 120);
        assert_eq!(test.len(), 40);
        let again = tempfile::tempdir().unwrap();
        generate_synthetic(again.path(), 120, 40, 9).unwrap();
        let (train2, _) = Dataset::load_dir(again.path()).unwrap();
        assert_eq!(train.pixels, train2.pixels);
        assert_eq!(train.labels, train2.labels);
    }

    #[test]
    fn class_images_differ_between_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = render_class_image(0, &mut rng);
        let b = render_class_image(9, &mut rng);
        let diff: usize = a.iter().zip(b.iter()).filter(|(x, y)| x != y).count();
        assert!(diff > IMAGE_BYTES / 2);
    }
}
