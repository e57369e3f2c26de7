//! Sliding-window patch extraction and per-window statistics.
//!
//! All stride-1 `P x P` windows of an image become the columns of a
//! [`PatchMatrix`]. The fast route drives a bank of indicator kernels across
//! the image (one cross-correlation plane per kernel, each plane supplying
//! one row of the matrix); [`extract_patches_naive`] is the straight
//! nested-loop gather kept as an independent reference.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::image::Image;

/// Bank of `P^2` indicator kernels. Kernel `k` is a `P x P` matrix of zeros
/// with a single 1 at `(k / P, k % P)`; summed together they give the
/// all-ones matrix.
#[derive(Debug, Clone)]
pub struct ExtractionKernels {
    patch_size: usize,
    kernels: Vec<Array2<f64>>,
}

impl ExtractionKernels {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn kernels(&self) -> &[Array2<f64>] {
        &self.kernels
    }
}

/// Column-per-window layout of all stride-1 sliding windows of an image.
///
/// Column `i` is the row-major flattening of the `i`-th window; windows are
/// ordered row-major over their top-left corners.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    patch_size: usize,
    data: Array2<f64>,
}

impl PatchMatrix {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Pixels per window, `N_P = P^2`.
    pub fn pixels_per_window(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Total number of windows, `N_S`.
    pub fn n_windows(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn column(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.column(i)
    }
}

/// Build the `P^2` indicator kernels for window size `P`.
pub fn build_extraction_kernels(patch_size: usize) -> Result<ExtractionKernels> {
    if patch_size < 1 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    let kernels = (0..patch_size * patch_size)
        .map(|k| {
            let mut kernel = Array2::zeros((patch_size, patch_size));
            kernel[[k / patch_size, k % patch_size]] = 1.0;
            kernel
        })
        .collect();
    Ok(ExtractionKernels {
        patch_size,
        kernels,
    })
}

/// Valid-mode cross-correlation (no kernel flip) of an image with a kernel.
///
/// Dense reference used to pin the kernel route to its defining mechanism.
pub fn cross_correlate_valid(img: &Image, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (img.height(), img.width());
    let (kh, kw) = kernel.dim();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    Array2::from_shape_fn((oh, ow), |(r, c)| {
        let mut acc = 0.0;
        for u in 0..kh {
            for v in 0..kw {
                acc += img.get(r + u, c + v) * kernel[[u, v]];
            }
        }
        acc
    })
}

fn check_window_fits(img: &Image, patch_size: usize) -> Result<(usize, usize)> {
    let (h, w) = (img.height(), img.width());
    if patch_size > h.min(w) {
        return Err(Error::Dimension(format!(
            "window size {} exceeds image {}x{}",
            patch_size, h, w
        )));
    }
    Ok((h - patch_size + 1, w - patch_size + 1))
}

/// Extract all stride-1 windows via the kernel bank.
///
/// Correlating with an indicator kernel whose 1 sits at offset `(u, v)`
/// reduces every output sample to the single term `img[r+u, c+v]`, so each
/// plane is evaluated as a shifted copy. Row `k` of the result is kernel
/// `k`'s correlation plane flattened row-major.
pub fn extract_patches(img: &Image, patch_size: usize) -> Result<PatchMatrix> {
    let kernels = build_extraction_kernels(patch_size)?;
    extract_patches_with(img, &kernels)
}

/// [`extract_patches`] against a prebuilt kernel bank.
pub fn extract_patches_with(img: &Image, kernels: &ExtractionKernels) -> Result<PatchMatrix> {
    let patch_size = kernels.patch_size();
    let (oh, ow) = check_window_fits(img, patch_size)?;
    let n_windows = oh * ow;
    let n_pixels = patch_size * patch_size;

    let mut data = Array2::zeros((n_pixels, n_windows));
    for (k, kernel) in kernels.kernels().iter().enumerate() {
        // Locate the kernel's single nonzero entry; the correlation plane is
        // the image slice shifted by that offset.
        let (mut ku, mut kv) = (0, 0);
        for u in 0..patch_size {
            for v in 0..patch_size {
                if kernel[[u, v]] != 0.0 {
                    (ku, kv) = (u, v);
                }
            }
        }
        let mut row = data.row_mut(k);
        for r in 0..oh {
            for c in 0..ow {
                row[r * ow + c] = img.get(r + ku, c + kv);
            }
        }
    }
    Ok(PatchMatrix { patch_size, data })
}

/// Straightforward nested-loop gather over windows; the reference
/// implementation the kernel route is checked against.
pub fn extract_patches_naive(img: &Image, patch_size: usize) -> Result<PatchMatrix> {
    let (oh, ow) = check_window_fits(img, patch_size)?;
    let n_pixels = patch_size * patch_size;

    let mut data = Array2::zeros((n_pixels, oh * ow));
    for r in 0..oh {
        for c in 0..ow {
            let window = r * ow + c;
            for u in 0..patch_size {
                for v in 0..patch_size {
                    data[[u * patch_size + v, window]] = img.get(r + u, c + v);
                }
            }
        }
    }
    Ok(PatchMatrix { patch_size, data })
}

/// Per-window sample statistics for a pair of patch matrices.
///
/// Means use `1/N_P`; variances and covariance use the sample (Bessel)
/// normalization `1/(N_P - 1)`.
#[derive(Debug, Clone)]
pub struct WindowStats {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub cov_xy: Vec<f64>,
}

/// One window's statistics.
#[derive(Debug, Clone, Copy)]
pub struct StatsRow {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl WindowStats {
    pub fn n_windows(&self) -> usize {
        self.mu_x.len()
    }

    pub fn row(&self, i: usize) -> StatsRow {
        StatsRow {
            mu_x: self.mu_x[i],
            mu_y: self.mu_y[i],
            var_x: self.var_x[i],
            var_y: self.var_y[i],
            cov_xy: self.cov_xy[i],
        }
    }
}

/// Compute per-window means, variances, and covariance for paired patches.
pub fn window_stats(px: &PatchMatrix, py: &PatchMatrix) -> Result<WindowStats> {
    if px.data.dim() != py.data.dim() || px.patch_size != py.patch_size {
        return Err(Error::Dimension(format!(
            "patch matrices disagree: {:?} vs {:?}",
            px.data.dim(),
            py.data.dim()
        )));
    }
    if px.patch_size < 2 {
        return Err(Error::Config(
            "window statistics need patch size >= 2 (sample normalization divides by N_P - 1)"
                .into(),
        ));
    }

    let n_p = px.pixels_per_window() as f64;
    let bessel = 1.0 / (n_p - 1.0);
    let n_windows = px.n_windows();

    let mut stats = WindowStats {
        mu_x: Vec::with_capacity(n_windows),
        mu_y: Vec::with_capacity(n_windows),
        var_x: Vec::with_capacity(n_windows),
        var_y: Vec::with_capacity(n_windows),
        cov_xy: Vec::with_capacity(n_windows),
    };

    for i in 0..n_windows {
        let x = px.column(i);
        let y = py.column(i);
        let mu_x = x.sum() / n_p;
        let mu_y = y.sum() / n_p;
        let mut var_x = 0.0;
        let mut var_y = 0.0;
        let mut cov = 0.0;
        for (&xv, &yv) in x.iter().zip(y.iter()) {
            let dx = xv - mu_x;
            let dy = yv - mu_y;
            var_x += dx * dx;
            var_y += dy * dy;
            cov += dx * dy;
        }
        stats.mu_x.push(mu_x);
        stats.mu_y.push(mu_y);
        stats.var_x.push(var_x * bessel);
        stats.var_y.push(var_y * bessel);
        stats.cov_xy.push(cov * bessel);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn kernels_have_single_one_at_expected_positions() {
        let kernels = build_extraction_kernels(2).unwrap();
        assert_eq!(kernels.kernels().len(), 4);
        let expect = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for (k, kernel) in kernels.kernels().iter().enumerate() {
            for u in 0..2 {
                for v in 0..2 {
                    let want = if (u, v) == expect[k] { 1.0 } else { 0.0 };
                    assert_eq!(kernel[[u, v]], want);
                }
            }
        }
    }

    #[test]
    fn single_pixel_kernel_bank() {
        let kernels = build_extraction_kernels(1).unwrap();
        assert_eq!(kernels.kernels().len(), 1);
        assert_eq!(kernels.kernels()[0][[0, 0]], 1.0);
    }

    #[test]
    fn zero_patch_size_is_config_error() {
        assert!(matches!(build_extraction_kernels(0), Err(Error::Config(_))));
    }

    #[test]
    fn window_counts_match_closed_form() {
        let img = random_image(4, 4, 1);
        let pm = extract_patches(&img, 2).unwrap();
        assert_eq!(pm.n_windows(), 9);
        assert_eq!(pm.pixels_per_window(), 4);

        let img = random_image(32, 32, 2);
        let pm = extract_patches(&img, 8).unwrap();
        assert_eq!(pm.n_windows(), 625);
    }

    #[test]
    fn oversized_window_is_dimension_error() {
        let img = random_image(4, 4, 3);
        assert!(matches!(extract_patches(&img, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn rows_equal_dense_correlation_planes() {
        let img = random_image(6, 5, 4);
        let kernels = build_extraction_kernels(3).unwrap();
        let pm = extract_patches_with(&img, &kernels).unwrap();
        for (k, kernel) in kernels.kernels().iter().enumerate() {
            let plane = cross_correlate_valid(&img, kernel);
            let flat: Vec<f64> = plane.iter().copied().collect();
            assert_eq!(pm.data().row(k).to_vec(), flat);
        }
    }

    #[test]
    fn stats_bessel_normalization() {
        let img = Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pm = extract_patches(&img, 2).unwrap();
        let stats = window_stats(&pm, &pm).unwrap();
        assert!((stats.mu_x[0] - 2.5).abs() < 1e-15);
        assert!((stats.var_x[0] - 5.0 / 3.0).abs() < 1e-15);
        assert!((stats.cov_xy[0] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stats_of_constant_windows_are_zero() {
        let x = Image::constant(3, 3, 0.4);
        let y = Image::constant(3, 3, 0.9);
        let px = extract_patches(&x, 2).unwrap();
        let py = extract_patches(&y, 2).unwrap();
        let stats = window_stats(&px, &py).unwrap();
        for i in 0..stats.n_windows() {
            assert_eq!(stats.var_x[i], 0.0);
            assert_eq!(stats.var_y[i], 0.0);
            assert_eq!(stats.cov_xy[i], 0.0);
        }
    }

    #[test]
    fn stats_shape_mismatch_is_dimension_error() {
        let px = extract_patches(&random_image(4, 4, 5), 2).unwrap();
        let py = extract_patches(&random_image(5, 5, 6), 2).unwrap();
        assert!(matches!(window_stats(&px, &py), Err(Error::Dimension(_))));
    }

    #[test]
    fn stats_reject_single_pixel_windows() {
        let px = extract_patches(&random_image(4, 4, 7), 1).unwrap();
        assert!(matches!(window_stats(&px, &px), Err(Error::Config(_))));
    }

    #[test]
    fn covariance_is_symmetric_and_consistent_with_variance() {
        let x = random_image(6, 6, 8);
        let y = random_image(6, 6, 9);
        let px = extract_patches(&x, 3).unwrap();
        let py = extract_patches(&y, 3).unwrap();
        let xy = window_stats(&px, &py).unwrap();
        let yx = window_stats(&py, &px).unwrap();
        let xx = window_stats(&px, &px).unwrap();
        for i in 0..xy.n_windows() {
            assert!((xy.cov_xy[i] - yx.cov_xy[i]).abs() < 1e-15);
            assert!((xx.cov_xy[i] - xx.var_x[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_offsets_cover_window_row_major() {
        // Column 0 of the 4x4/P=2 case must be the top-left window flattened
        // row-major, matching the documented column layout.
        let img = Image::new(4, 4, (0..16).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let pm = extract_patches(&img, 2).unwrap();
        assert_eq!(pm.column(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        // Window 1 shifts one pixel right; window 3 starts the next row.
        assert_eq!(pm.column(1).to_vec(), vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(pm.column(3).to_vec(), vec![4.0, 5.0, 8.0, 9.0]);
    }

    proptest! {
        #[test]
        fn kernel_sum_is_all_ones(p in 1usize..=8) {
            let kernels = build_extraction_kernels(p).unwrap();
            let mut sum = Array2::<f64>::zeros((p, p));
            for k in kernels.kernels() {
                sum += k;
            }
            prop_assert!(sum.iter().all(|&v| v == 1.0));
        }

        #[test]
        fn kernel_and_naive_extraction_agree(
            h in 1usize..=16,
            w in 1usize..=16,
            p in 1usize..=8,
            seed in any::<u64>(),
        ) {
            prop_assume!(p <= h.min(w));
            let img = random_image(h, w, seed);
            let fast = extract_patches(&img, p).unwrap();
            let naive = extract_patches_naive(&img, p).unwrap();
            prop_assert_eq!(fast, naive);
        }

        #[test]
        fn stats_invariants_on_random_inputs(
            h in 2usize..=12,
            w in 2usize..=12,
            p in 2usize..=8,
            seed in any::<u64>(),
        ) {
            prop_assume!(p <= h.min(w));
            let x = random_image(h, w, seed);
            let y = random_image(h, w, seed.wrapping_add(1));
            let px = extract_patches(&x, p).unwrap();
            let py = extract_patches(&y, p).unwrap();
            let stats = window_stats(&px, &py).unwrap();
            for i in 0..stats.n_windows() {
                prop_assert!(stats.var_x[i] >= 0.0);
                prop_assert!(stats.var_y[i] >= 0.0);
                // Cauchy-Schwarz with numerical slack.
                prop_assert!(
                    stats.cov_xy[i].abs()
                        <= (stats.var_x[i] * stats.var_y[i]).sqrt() + 1e-12
                );
            }
        }

        #[test]
        fn stats_match_direct_arithmetic(seed in any::<u64>()) {
            let x = random_image(4, 4, seed);
            let y = random_image(4, 4, seed.wrapping_add(17));
            let px = extract_patches(&x, 4).unwrap();
            let py = extract_patches(&y, 4).unwrap();
            let stats = window_stats(&px, &py).unwrap();
            // Single window: recompute with ndarray reductions.
            let xv: Array1<f64> = px.column(0).to_owned();
            let yv: Array1<f64> = py.column(0).to_owned();
            let n = xv.len() as f64;
            let mx = xv.sum() / n;
            let my = yv.sum() / n;
            let vx = xv.mapv(|v| (v - mx).powi(2)).sum() / (n - 1.0);
            let cov = xv
                .iter()
                .zip(yv.iter())
                .map(|(&a, &b)| (a - mx) * (b - my))
                .sum::<f64>()
                / (n - 1.0);
            prop_assert!((stats.mu_x[0] - mx).abs() < 1e-12);
            prop_assert!((stats.mu_y[0] - my).abs() < 1e-12);
            prop_assert!((stats.var_x[0] - vx).abs() < 1e-12);
            prop_assert!((stats.cov_xy[0] - cov).abs() < 1e-12);
        }
    }
}
