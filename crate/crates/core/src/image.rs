//! Canonical grayscale image representation and layout conversions.
//!
//! Images are `height x width` rasters of `f64` intensities stored row-major.
//! Ingested pixels live in `[0, 1]` (raw bytes divided by 255); gradient
//! buffers reuse the same container and are exempt from the range convention.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Flat row-major view of an image, the signal the network consumes.
pub type SignalVector = Array1<f64>;

/// A grayscale raster. Immutable after construction; cheap to clone and safe
/// to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f64>,
}

impl Image {
    /// Build an image from row-major pixel data.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        let data = Array2::from_shape_vec((height, width), data)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(Image { data })
    }

    pub fn from_array(data: Array2<f64>) -> Self {
        Image { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Image {
            data: Array2::from_elem((height, width), value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }
}

/// Row-major linearization of an image.
pub fn flatten(img: &Image) -> SignalVector {
    Array1::from_iter(img.data.iter().copied())
}

/// Inverse of [`flatten`]; fails when the vector length is not `h * w`.
pub fn unflatten(v: &SignalVector, height: usize, width: usize) -> Result<Image> {
    if v.len() != height * width {
        return Err(Error::Dimension(format!(
            "signal length {} does not match {}x{}",
            v.len(),
            height,
            width
        )));
    }
    Image::new(height, width, v.to_vec())
}

/// Rotate 90 degrees counterclockwise. Four applications give the identity.
pub fn rotate90(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let rotated = Array2::from_shape_fn((w, h), |(r, c)| img.data[[c, w - 1 - r]]);
    Image { data: rotated }
}

/// Write a binary PGM (P5, maxval 255). Each pixel byte is
/// `round(v * 255)` clamped to `[0, 255]`.
pub fn save_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    let mut bytes = Vec::with_capacity(header.len() + img.height() * img.width());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend(
        img.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    file.write_all(&bytes).map_err(|e| Error::file(path, e))?;
    Ok(())
}
