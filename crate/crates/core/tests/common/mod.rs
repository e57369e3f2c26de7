//! Shared fixtures for integration tests: deterministic structured images
//! written in the CIFAR-10 binary container format, so every test exercises
//! the real loader path.
//!
//! When `CS_SSIM_DATA_DIR` points at a directory holding the actual CIFAR-10
//! binary batches, the desk-scale tests use those instead.
#![allow(dead_code)] // shared across test targets; not every target uses every helper

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// A smooth, compressible grayscale image: gradient base plus Gaussian
/// blobs, a sinusoidal grating, and sometimes a rectangle, normalized into
/// the unit intensity range.
pub fn synthetic_image(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base0 = rng.random_range(0.2..0.8);
    let gx = rng.random_range(-0.5..0.5);
    let gy = rng.random_range(-0.5..0.5);

    let n_blobs = rng.random_range(1..=3);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(-0.6..0.6),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
            )
        })
        .collect();

    let grating_amp = rng.random_range(0.0..0.35);
    let fu = rng.random_range(0.5..3.0);
    let fv = rng.random_range(0.5..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let rect = if rng.random_bool(0.5) {
        let r0 = rng.random_range(0.0..0.6);
        let c0 = rng.random_range(0.0..0.6);
        Some((
            rng.random_range(-0.4..0.4),
            r0,
            c0,
            r0 + rng.random_range(0.15..0.4),
            c0 + rng.random_range(0.15..0.4),
        ))
    } else {
        None
    };

    let mut pixels = Vec::with_capacity(PLANE);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let u = r as f64 / (SIDE - 1) as f64;
            let v = c as f64 / (SIDE - 1) as f64;
            let mut val = base0 + gx * u + gy * v;
            for &(amp, bu, bv, s) in &blobs {
                let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                val += amp * (-d2 / (2.0 * s * s)).exp();
            }
            val += grating_amp * (std::f64::consts::TAU * (fu * u + fv * v) + phase).sin();
            if let Some((amp, r0, c0, r1, c1)) = rect {
                if u >= r0 && u <= r1 && v >= c0 && v <= c1 {
                    val += amp;
                }
            }
            pixels.push(val);
        }
    }

    let min = pixels.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-9 {
        return vec![0.5; PLANE];
    }
    pixels
        .iter()
        .map(|&p| 0.03 + 0.94 * (p - min) / (max - min))
        .collect()
}

fn record_bytes(pixels: &[f64], label: u8) -> Vec<u8> {
    let mut record = Vec::with_capacity(1 + 3 * PLANE);
    record.push(label);
    let plane: Vec<u8> = pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    record.extend_from_slice(&plane); // red: the channel the loader reads
    record.extend_from_slice(&plane); // green
    record.extend_from_slice(&plane); // blue
    record
}

/// Write `n_train` + `n_test` synthetic images as CIFAR-10 binary batches
/// (train records spread over the five data_batch files).
pub fn write_synthetic_cifar(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_file = n_train.div_ceil(5);
    let mut remaining = n_train;
    for file_idx in 0..5 {
        let count = per_file.min(remaining);
        remaining -= count;
        let mut bytes = Vec::with_capacity(count * (1 + 3 * PLANE));
        for i in 0..count {
            let img = synthetic_image(&mut rng);
            bytes.extend(record_bytes(&img, (i % 10) as u8));
        }
        std::fs::write(dir.join(format!("data_batch_{}.bin", file_idx + 1)), bytes).unwrap();
    }
    let mut bytes = Vec::with_capacity(n_test * (1 + 3 * PLANE));
    for i in 0..n_test {
        let img = synthetic_image(&mut rng);
        bytes.extend(record_bytes(&img, (i % 10) as u8));
    }
    std::fs::write(dir.join("test_batch.bin"), bytes).unwrap();
}

/// Real CIFAR-10 directory from the environment, if it actually holds the
/// binary batches.
pub fn real_cifar_dir() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os("CS_SSIM_DATA_DIR")?);
    let complete = std::iter::once("test_batch.bin".to_string())
        .chain((1..=5).map(|i| format!("data_batch_{i}.bin")))
        .all(|name| dir.join(name).is_file());
    complete.then_some(dir)
}
