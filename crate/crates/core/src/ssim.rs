//! Structural similarity: per-window index, window weighting, whole-image
//! weighted aggregation, and the exact analytic gradient with scatter-add
//! accumulation, packaged as a loss with a value-and-gradient contract.
//!
//! Per window the index is `S = (A1*A2) / (B1*B2)` with
//! `A1 = 2*mu_x*mu_y + C1`, `A2 = 2*cov_xy + C2`, `B1 = mu_x^2 + mu_y^2 + C1`,
//! `B2 = var_x + var_y + C2`. The whole-image score is
//! `sum_i(W_i * S_i) / sum_i(W_i)` over all stride-1 windows. Gradients are
//! taken with respect to the second (reconstructed) image, including the
//! dependence of log-variance weights on it, and each per-window gradient
//! patch is summed into its window location of a full-image buffer.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::patches::{extract_patches, PatchMatrix, StatsRow, WindowStats};

/// Below this weight-sum the weighted mean is numerically undefined and the
/// computation falls back to uniform weights.
pub const WEIGHT_SUM_EPSILON: f64 = 1e-12;

/// Stabilizing constants for the two SSIM quotients, for pixel dynamic
/// range 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if c1 <= 0.0 || c2 <= 0.0 {
            return Err(Error::Config(format!(
                "SSIM constants must be positive, got C1={c1}, C2={c2}"
            )));
        }
        Ok(SsimConstants { c1, c2 })
    }
}

impl Default for SsimConstants {
    /// The standard choices `C1 = (0.01)^2`, `C2 = (0.03)^2` scaled to
    /// `[0, 1]` pixels.
    fn default() -> Self {
        SsimConstants {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Window weighting for the whole-image aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    /// `W_i = 1` for every window.
    Uniform,
    /// `W_i = log[(1 + var_x/C2)(1 + var_y/C2)]`, emphasizing textured
    /// windows.
    LogVariance,
}

impl std::fmt::Display for WeightKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightKind::Uniform => write!(f, "uniform"),
            WeightKind::LogVariance => write!(f, "log"),
        }
    }
}

impl std::str::FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightKind::Uniform),
            "log" => Ok(WeightKind::LogVariance),
            other => Err(Error::Config(format!("unknown weighting `{other}`"))),
        }
    }
}

/// Per-window quotient terms.
#[derive(Debug, Clone)]
pub struct SsimComponents {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

/// One window's quotient terms.
#[derive(Debug, Clone, Copy)]
pub struct CompRow {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
}

impl SsimComponents {
    pub fn n_windows(&self) -> usize {
        self.a1.len()
    }

    pub fn row(&self, i: usize) -> CompRow {
        CompRow {
            a1: self.a1[i],
            a2: self.a2[i],
            b1: self.b1[i],
            b2: self.b2[i],
        }
    }
}

/// Loss value, raw SSIM score, and the loss gradient with respect to the
/// reconstructed image. The loss is `1 - S(X, Y)`, so the gradient is the
/// negated SSIM gradient.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    pub ssim: f64,
    pub grad: Image,
}

/// Precomputed reference-side (ground truth) patch data, reusable across
/// reconstructions of the same image. Trades memory for the repeated
/// extraction and mean/variance work.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    px: PatchMatrix,
    mu_x: Vec<f64>,
    var_x: Vec<f64>,
    height: usize,
    width: usize,
}

pub fn build_reference_cache(x: &Image, patch_size: usize) -> Result<ReferenceCache> {
    if patch_size < 2 {
        return Err(Error::Config(
            "SSIM needs patch size >= 2 (sample normalization divides by N_P - 1)".into(),
        ));
    }
    let px = extract_patches(x, patch_size)?;
    let (mu_x, var_x) = column_mean_var(&px);
    Ok(ReferenceCache {
        px,
        mu_x,
        var_x,
        height: x.height(),
        width: x.width(),
    })
}

fn column_mean_var(pm: &PatchMatrix) -> (Vec<f64>, Vec<f64>) {
    let n_p = pm.pixels_per_window() as f64;
    let bessel = 1.0 / (n_p - 1.0);
    let mut mu = Vec::with_capacity(pm.n_windows());
    let mut var = Vec::with_capacity(pm.n_windows());
    for i in 0..pm.n_windows() {
        let col = pm.column(i);
        let m = col.sum() / n_p;
        let v = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() * bessel;
        mu.push(m);
        var.push(v);
    }
    (mu, var)
}

fn stats_against_reference(cache: &ReferenceCache, py: &PatchMatrix) -> Result<WindowStats> {
    if cache.px.data().dim() != py.data().dim() {
        return Err(Error::Dimension(format!(
            "patch matrices disagree: {:?} vs {:?}",
            cache.px.data().dim(),
            py.data().dim()
        )));
    }
    let n_p = py.pixels_per_window() as f64;
    let bessel = 1.0 / (n_p - 1.0);
    let n_windows = py.n_windows();

    let mut stats = WindowStats {
        mu_x: cache.mu_x.clone(),
        mu_y: Vec::with_capacity(n_windows),
        var_x: cache.var_x.clone(),
        var_y: Vec::with_capacity(n_windows),
        cov_xy: Vec::with_capacity(n_windows),
    };
    for i in 0..n_windows {
        let x = cache.px.column(i);
        let y = py.column(i);
        let mu_x = cache.mu_x[i];
        let mu_y = y.sum() / n_p;
        let mut var_y = 0.0;
        let mut cov = 0.0;
        for (&xv, &yv) in x.iter().zip(y.iter()) {
            let dy = yv - mu_y;
            var_y += dy * dy;
            cov += (xv - mu_x) * dy;
        }
        stats.mu_y.push(mu_y);
        stats.var_y.push(var_y * bessel);
        stats.cov_xy.push(cov * bessel);
    }
    Ok(stats)
}

/// Quotient terms from per-window statistics.
pub fn ssim_components(stats: &WindowStats, c: &SsimConstants) -> SsimComponents {
    let n = stats.n_windows();
    let mut comp = SsimComponents {
        a1: Vec::with_capacity(n),
        a2: Vec::with_capacity(n),
        b1: Vec::with_capacity(n),
        b2: Vec::with_capacity(n),
    };
    for i in 0..n {
        let s = stats.row(i);
        comp.a1.push(2.0 * s.mu_x * s.mu_y + c.c1);
        comp.a2.push(2.0 * s.cov_xy + c.c2);
        comp.b1.push(s.mu_x * s.mu_x + s.mu_y * s.mu_y + c.c1);
        comp.b2.push(s.var_x + s.var_y + c.c2);
    }
    comp
}

/// Per-window SSIM index `S_i = (A1*A2)/(B1*B2)`.
pub fn ssim_patch(comp: &SsimComponents) -> Vec<f64> {
    (0..comp.n_windows())
        .map(|i| (comp.a1[i] * comp.a2[i]) / (comp.b1[i] * comp.b2[i]))
        .collect()
}

/// Per-window weights for the chosen kind.
pub fn window_weights(stats: &WindowStats, kind: WeightKind, c: &SsimConstants) -> Vec<f64> {
    match kind {
        WeightKind::Uniform => vec![1.0; stats.n_windows()],
        WeightKind::LogVariance => (0..stats.n_windows())
            .map(|i| ((1.0 + stats.var_x[i] / c.c2) * (1.0 + stats.var_y[i] / c.c2)).ln())
            .collect(),
    }
}

/// Analytic gradient of the per-window SSIM index with respect to the `y`
/// patch. Same length as `y`.
pub fn grad_ssim_patch(
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    stats: &StatsRow,
    comp: &CompRow,
) -> Array1<f64> {
    let n_p = x.len() as f64;
    let inv_np = 1.0 / n_p;
    let bessel = 1.0 / (n_p - 1.0);

    // Mean terms contribute the same amount to every pixel of the patch.
    let d_a1 = 2.0 * stats.mu_x * inv_np;
    let d_b1 = 2.0 * stats.mu_y * inv_np;

    let b1b2 = comp.b1 * comp.b2;
    // Factored quotient rule (num' - S * den') / den: when the patches are
    // identical, num' == den' bit-for-bit and S is exactly 1, so the
    // gradient vanishes exactly instead of leaving rounding residue.
    let score = (comp.a1 * comp.a2) / b1b2;

    let mut grad = Array1::zeros(x.len());
    for (j, g) in grad.iter_mut().enumerate() {
        let d_a2 = 2.0 * (x[j] - stats.mu_x) * bessel;
        let d_b2 = 2.0 * (y[j] - stats.mu_y) * bessel;
        let d_num = d_a1 * comp.a2 + comp.a1 * d_a2;
        let d_den = d_b1 * comp.b2 + comp.b1 * d_b2;
        *g = (d_num - score * d_den) / b1b2;
    }
    grad
}

/// Analytic gradient of the log-variance weight with respect to the `y`
/// patch: `2 (y - mu_y) / ((N_P - 1)(C2 + var_y))`. Depends on `y` only
/// through `y - mu_y`, so it vanishes on constant patches and is invariant
/// to shifting every pixel by the same amount.
pub fn grad_weight_log_patch(
    y: ArrayView1<'_, f64>,
    stats: &StatsRow,
    c: &SsimConstants,
) -> Array1<f64> {
    let n_p = y.len() as f64;
    let scale = 2.0 / ((n_p - 1.0) * (c.c2 + stats.var_y));
    Array1::from_iter(y.iter().map(|&v| scale * (v - stats.mu_y)))
}

/// Everything the whole-image value and gradient computations share.
struct WindowedPair<'a> {
    cache: &'a ReferenceCache,
    py: PatchMatrix,
    stats: WindowStats,
    comp: SsimComponents,
    scores: Vec<f64>,
    weights: Vec<f64>,
    weight_sum: f64,
    weighted_score_sum: f64,
    /// Weighting actually applied after the degenerate-weight fallback.
    effective: WeightKind,
    constants: SsimConstants,
    cols: usize,
}

fn analyze<'a>(
    cache: &'a ReferenceCache,
    y: &Image,
    kind: WeightKind,
    c: &SsimConstants,
) -> Result<WindowedPair<'a>> {
    if y.height() != cache.height || y.width() != cache.width {
        return Err(Error::Dimension(format!(
            "image shapes disagree: {}x{} vs {}x{}",
            cache.height,
            cache.width,
            y.height(),
            y.width()
        )));
    }
    let patch_size = cache.px.patch_size();
    let py = extract_patches(y, patch_size)?;
    let stats = stats_against_reference(cache, &py)?;
    let comp = ssim_components(&stats, c);
    let scores = ssim_patch(&comp);

    let mut effective = kind;
    let mut weights = window_weights(&stats, kind, c);
    let mut weight_sum: f64 = weights.iter().sum();
    if kind == WeightKind::LogVariance && weight_sum < WEIGHT_SUM_EPSILON {
        effective = WeightKind::Uniform;
        weights = vec![1.0; weights.len()];
        weight_sum = weights.len() as f64;
    }
    let weighted_score_sum = weights
        .iter()
        .zip(scores.iter())
        .map(|(&w, &s)| w * s)
        .sum();

    Ok(WindowedPair {
        cache,
        py,
        stats,
        comp,
        scores,
        weights,
        weight_sum,
        weighted_score_sum,
        effective,
        constants: *c,
        cols: cache.width - patch_size + 1,
    })
}

impl WindowedPair<'_> {
    fn value(&self) -> f64 {
        self.weighted_score_sum / self.weight_sum
    }

    fn grad(&self) -> Image {
        let p = self.py.patch_size();
        let (h, w) = (self.cache.height, self.cache.width);
        let n_s = self.py.n_windows();

        let scatter = |buf: &mut Array2<f64>, window: usize, patch: &Array1<f64>| {
            let r0 = window / self.cols;
            let c0 = window % self.cols;
            for k in 0..p * p {
                buf[[r0 + k / p, c0 + k % p]] += patch[k];
            }
        };

        let mut acc = Array2::<f64>::zeros((h, w));
        match self.effective {
            WeightKind::Uniform => {
                for i in 0..n_s {
                    let g = grad_ssim_patch(
                        self.cache.px.column(i),
                        self.py.column(i),
                        &self.stats.row(i),
                        &self.comp.row(i),
                    );
                    scatter(&mut acc, i, &g);
                }
                acc.mapv_inplace(|v| v / n_s as f64);
                Image::from_array(acc)
            }
            WeightKind::LogVariance => {
                // General quotient rule: both the numerator sum(W_i * S_i)
                // and the denominator sum(W_i) vary with Y.
                let mut w_acc = Array2::<f64>::zeros((h, w));
                for i in 0..n_s {
                    let gs = grad_ssim_patch(
                        self.cache.px.column(i),
                        self.py.column(i),
                        &self.stats.row(i),
                        &self.comp.row(i),
                    );
                    let gw = grad_weight_log_patch(
                        self.py.column(i),
                        &self.stats.row(i),
                        &self.constants,
                    );
                    let combined = &gw * self.scores[i] + &gs * self.weights[i];
                    scatter(&mut acc, i, &combined);
                    scatter(&mut w_acc, i, &gw);
                }
                // Factored quotient rule (sum' - S_image * wsum') / wsum; at
                // Y == X the two scatter buffers coincide bit-for-bit and the
                // image score is exactly 1, so the gradient vanishes exactly.
                let mean_score = self.weighted_score_sum / self.weight_sum;
                let grad = ndarray::Zip::from(&acc)
                    .and(&w_acc)
                    .map_collect(|&a, &w| (a - mean_score * w) / self.weight_sum);
                Image::from_array(grad)
            }
        }
    }
}

/// Weighted whole-image SSIM score.
pub fn ssim_image(
    x: &Image,
    y: &Image,
    patch_size: usize,
    kind: WeightKind,
    c: &SsimConstants,
) -> Result<f64> {
    let cache = build_reference_cache(x, patch_size)?;
    Ok(analyze(&cache, y, kind, c)?.value())
}

/// Gradient of [`ssim_image`] with respect to `y`.
pub fn grad_ssim_image(
    x: &Image,
    y: &Image,
    patch_size: usize,
    kind: WeightKind,
    c: &SsimConstants,
) -> Result<Image> {
    let cache = build_reference_cache(x, patch_size)?;
    Ok(analyze(&cache, y, kind, c)?.grad())
}

/// Loss `1 - S(X, Y)` with its gradient, sharing one extraction pass.
pub fn ssim_loss_and_grad(
    x: &Image,
    y: &Image,
    patch_size: usize,
    kind: WeightKind,
    c: &SsimConstants,
) -> Result<LossReport> {
    let cache = build_reference_cache(x, patch_size)?;
    ssim_loss_and_grad_cached(&cache, y, kind, c)
}

/// [`ssim_loss_and_grad`] against a prebuilt reference cache.
pub fn ssim_loss_and_grad_cached(
    cache: &ReferenceCache,
    y: &Image,
    kind: WeightKind,
    c: &SsimConstants,
) -> Result<LossReport> {
    let pair = analyze(cache, y, kind, c)?;
    let ssim = pair.value();
    let grad_ssim = pair.grad();
    let grad = Image::from_array(grad_ssim.as_array().mapv(|v| -v));
    Ok(LossReport {
        loss: 1.0 - ssim,
        ssim,
        grad,
    })
}
