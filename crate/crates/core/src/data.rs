//! CIFAR-10 binary ingestion, rotation augmentation, and split management.
//!
//! Each CIFAR-10 record is 3073 bytes: one label byte followed by three
//! 32 x 32 channel planes (red first), row-major within each plane. Only the
//! first (red) plane is read; labels are discarded and pixels are divided by
//! 255 so intensities land in `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::image::{rotate90, Image};

pub const CIFAR_SIDE: usize = 32;
const PLANE_BYTES: usize = CIFAR_SIDE * CIFAR_SIDE;
const RECORD_BYTES: usize = 1 + 3 * PLANE_BYTES;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Train/validation/test images plus a human-readable provenance note.
/// Validation is carved from the raw training images before augmentation,
/// so rotated twins of a validation image never leak into training.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub train: Vec<Image>,
    pub validation: Vec<Image>,
    pub test: Vec<Image>,
    pub source: String,
}

/// Load one split as grayscale images (first channel only), record order
/// preserved across the split's files.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Vec<Image>> {
    let files: &[&str] = match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &TEST_FILES,
    };
    let mut images = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of the {}-byte record",
                path.display(),
                bytes.len(),
                RECORD_BYTES
            )));
        }
        for record in bytes.chunks_exact(RECORD_BYTES) {
            // Skip the label byte; the red plane fills the grayscale image.
            let plane = &record[1..1 + PLANE_BYTES];
            let data = plane.iter().map(|&b| b as f64 / 255.0).collect();
            images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, data)?);
        }
    }
    Ok(images)
}

/// Originals followed by their 90, 180, and 270 degree rotations.
pub fn augment_rotations(images: &[Image]) -> Vec<Image> {
    let mut out = Vec::with_capacity(images.len() * 4);
    out.extend_from_slice(images);
    let r90: Vec<Image> = images.iter().map(rotate90).collect();
    let r180: Vec<Image> = r90.iter().map(rotate90).collect();
    let r270: Vec<Image> = r180.iter().map(rotate90).collect();
    out.extend(r90);
    out.extend(r180);
    out.extend(r270);
    out
}

/// Carve a validation split from the raw training images (seeded shuffle),
/// then augment the remaining training images with rotations.
pub fn make_manifest(
    train: Vec<Image>,
    test: Vec<Image>,
    validation_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::Config(format!(
            "validation fraction must be in [0, 1), got {validation_fraction}"
        )));
    }
    let n = train.len();
    let n_val = (n as f64 * validation_fraction).round() as usize;

    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut crate::rng::sub_rng(seed, "split"));
    let mut val_indices: Vec<usize> = indices[..n_val].to_vec();
    val_indices.sort_unstable();

    let mut is_val = vec![false; n];
    for &i in &val_indices {
        is_val[i] = true;
    }

    let mut raw_train = Vec::with_capacity(n - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (i, img) in train.into_iter().enumerate() {
        if is_val[i] {
            validation.push(img);
        } else {
            raw_train.push(img);
        }
    }

    let train = augment_rotations(&raw_train);
    let source = format!(
        "train={} (augmented from {}), validation={}, test={}, split seed={}",
        train.len(),
        raw_train.len(),
        validation.len(),
        test.len(),
        seed
    );
    Ok(DatasetManifest {
        train,
        validation,
        test,
        source,
    })
}
