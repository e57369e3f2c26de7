//! Central-difference gradient checking for the analytic SSIM gradients and
//! the end-to-end backpropagation path.
//!
//! The numeric side only ever evaluates value functions, so it stays
//! independent of the gradient code it judges.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{flatten, unflatten, Image};
use crate::network::{
    backward, forward, init_params, mse_loss_and_grad, Activation, ArchitectureSpec, NetworkParams,
};
use crate::patches::{extract_patches, window_stats};
use crate::ssim::{
    grad_ssim_image, grad_ssim_patch, grad_weight_log_patch, ssim_components, ssim_image,
    SsimConstants, WeightKind,
};

pub const DEFAULT_STEP: f64 = 1e-6;
/// Coordinates where both sides are below this magnitude are treated as
/// agreeing zeros and skipped.
pub const SKIP_BELOW: f64 = 1e-8;
/// Central differences at step 1e-6 on values of order one cannot resolve
/// deviations much below ~1e-11 (subtractive cancellation); an absolute
/// deviation under this floor counts as agreement within the oracle's own
/// resolution. Measured noise on matching gradients stays under 1e-11, so
/// this keeps two orders of margin while still flagging any error
/// proportional to a real gradient magnitude.
pub const ABS_AGREEMENT_FLOOR: f64 = 1e-9;

/// Aggregate comparison between an analytic and a numeric gradient.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_dev: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_dev = self.max_abs_dev.max(other.max_abs_dev);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Compare element-wise with relative error `|a - n| / max(|a|, |n|)`.
/// Deviations below [`ABS_AGREEMENT_FLOOR`] count as exact agreement.
pub fn compare_gradients(
    analytic: &Array1<f64>,
    numeric: &Array1<f64>,
    skip_below: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        if a.abs() < skip_below && n.abs() < skip_below {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let dev = (a - n).abs();
        report.max_abs_dev = report.max_abs_dev.max(dev);
        if dev < ABS_AGREEMENT_FLOOR {
            continue;
        }
        let rel = dev / a.abs().max(n.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    report
}

/// Central differences of a scalar function of a vector.
pub fn central_diff_gradient(
    mut f: impl FnMut(&Array1<f64>) -> f64,
    x0: &Array1<f64>,
    step: f64,
) -> Array1<f64> {
    let mut x = x0.clone();
    let mut grad = Array1::zeros(x0.len());
    for j in 0..x0.len() {
        let orig = x[j];
        x[j] = orig + step;
        let up = f(&x);
        x[j] = orig - step;
        let down = f(&x);
        x[j] = orig;
        grad[j] = (up - down) / (2.0 * step);
    }
    grad
}

/// One named suite result.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_err < self.tolerance
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Direct per-patch SSIM value for a pair of flattened windows; the numeric
/// oracle's value function for the patch-level check.
fn patch_ssim_value(x: &Array1<f64>, y: &Array1<f64>, c: &SsimConstants) -> f64 {
    let n = x.len() as f64;
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n - 1.0;
    vy /= n - 1.0;
    cov /= n - 1.0;
    ((2.0 * mx * my + c.c1) * (2.0 * cov + c.c2)) / ((mx * mx + my * my + c.c1) * (vx + vy + c.c2))
}

fn log_weight_value(x: &Array1<f64>, y: &Array1<f64>, c: &SsimConstants) -> f64 {
    let n = x.len() as f64;
    let var = |v: &Array1<f64>| {
        let m = v.sum() / n;
        v.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0)
    };
    ((1.0 + var(x) / c.c2) * (1.0 + var(y) / c.c2)).ln()
}

/// Check the three analytic SSIM gradients (per-patch index, log-variance
/// weight, whole image under both weightings) against central differences on
/// `pairs` random image pairs with window sizes cycling over {2, 4, 8}.
pub fn ssim_gradient_suites(seed: u64, pairs: usize) -> Result<Vec<SuiteOutcome>> {
    let c = SsimConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patch_report = GradCheckReport::default();
    let mut weight_report = GradCheckReport::default();
    let mut image_uniform_report = GradCheckReport::default();
    let mut image_log_report = GradCheckReport::default();

    for i in 0..pairs {
        let p = [2usize, 4, 8][i % 3];
        let h = rng.random_range(8..=16);
        let w = rng.random_range(8..=16);
        let x = random_image(&mut rng, h, w);
        let y = random_image(&mut rng, h, w);

        // Per-patch gradient on one window of the pair.
        let px = extract_patches(&x, p)?;
        let py = extract_patches(&y, p)?;
        let stats = window_stats(&px, &py)?;
        let comp = ssim_components(&stats, &c);
        let window = i % px.n_windows();
        let xc = px.column(window).to_owned();
        let yc = py.column(window).to_owned();
        let analytic = grad_ssim_patch(xc.view(), yc.view(), &stats.row(window), &comp.row(window));
        let numeric = central_diff_gradient(|yv| patch_ssim_value(&xc, yv, &c), &yc, DEFAULT_STEP);
        patch_report.merge(&compare_gradients(&analytic, &numeric, SKIP_BELOW));

        // Log-variance weight gradient on the same window.
        let analytic = grad_weight_log_patch(yc.view(), &stats.row(window), &c);
        let numeric = central_diff_gradient(|yv| log_weight_value(&xc, yv, &c), &yc, DEFAULT_STEP);
        weight_report.merge(&compare_gradients(&analytic, &numeric, SKIP_BELOW));

        // Whole-image gradient, both weightings.
        for (kind, report) in [
            (WeightKind::Uniform, &mut image_uniform_report),
            (WeightKind::LogVariance, &mut image_log_report),
        ] {
            let analytic = flatten(&grad_ssim_image(&x, &y, p, kind, &c)?);
            let y0 = flatten(&y);
            let numeric = central_diff_gradient(
                |yv| {
                    let img = unflatten(yv, h, w).expect("shape preserved");
                    ssim_image(&x, &img, p, kind, &c).expect("valid inputs")
                },
                &y0,
                DEFAULT_STEP,
            );
            report.merge(&compare_gradients(&analytic, &numeric, SKIP_BELOW));
        }
    }

    let tol = 1e-5;
    Ok(vec![
        SuiteOutcome {
            name: "ssim patch gradient".into(),
            report: patch_report,
            tolerance: tol,
        },
        SuiteOutcome {
            name: "log weight gradient".into(),
            report: weight_report,
            tolerance: tol,
        },
        SuiteOutcome {
            name: "image gradient (uniform)".into(),
            report: image_uniform_report,
            tolerance: tol,
        },
        SuiteOutcome {
            name: "image gradient (log)".into(),
            report: image_log_report,
            tolerance: tol,
        },
    ])
}

fn end_to_end_loss(
    params: &NetworkParams,
    input: &Array1<f64>,
    target: &Image,
    loss: TinyLoss,
) -> f64 {
    let (y, _) = forward(params, input).expect("consistent shapes");
    match loss {
        TinyLoss::Mse => {
            mse_loss_and_grad(flatten(target).view(), y.view())
                .expect("consistent shapes")
                .0
        }
        TinyLoss::Ssim(kind) => {
            let y_img = unflatten(&y, target.height(), target.width()).expect("shape");
            crate::ssim::ssim_loss_and_grad(target, &y_img, 2, kind, &SsimConstants::default())
                .expect("valid inputs")
                .loss
        }
    }
}

#[derive(Clone, Copy)]
enum TinyLoss {
    Mse,
    Ssim(WeightKind),
}

impl std::fmt::Display for TinyLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TinyLoss::Mse => write!(f, "mse"),
            TinyLoss::Ssim(WeightKind::Uniform) => write!(f, "ssim/uniform"),
            TinyLoss::Ssim(WeightKind::LogVariance) => write!(f, "ssim/log"),
        }
    }
}

/// End-to-end backprop check on a tiny network (N=16, M=4, B=1, K=1): every
/// weight and bias gradient under both losses against central differences.
pub fn backprop_suites(seed: u64) -> Result<Vec<SuiteOutcome>> {
    let arch = ArchitectureSpec::new(16, 0.25, 1, 1, Activation::Sigmoid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = random_image(&mut rng, 4, 4);
    let input = flatten(&target);

    let mut outcomes = Vec::new();
    for loss in [
        TinyLoss::Mse,
        TinyLoss::Ssim(WeightKind::Uniform),
        TinyLoss::Ssim(WeightKind::LogVariance),
    ] {
        let mut params = init_params(&arch, seed.wrapping_add(1));
        let (y, cache) = forward(&params, &input)?;
        let d_y = match loss {
            TinyLoss::Mse => mse_loss_and_grad(flatten(&target).view(), y.view())?.1,
            TinyLoss::Ssim(kind) => {
                let y_img = unflatten(&y, 4, 4)?;
                let report = crate::ssim::ssim_loss_and_grad(
                    &target,
                    &y_img,
                    2,
                    kind,
                    &SsimConstants::default(),
                )?;
                flatten(&report.grad)
            }
        };
        let grads = backward(&params, &cache, &d_y)?;

        let mut report = GradCheckReport::default();
        let h = DEFAULT_STEP;
        for l in 0..params.layers.len() {
            for idx in 0..params.layers[l].weights.len() {
                let orig = params.layers[l].weights.as_slice().unwrap()[idx];
                params.layers[l].weights.as_slice_mut().unwrap()[idx] = orig + h;
                let up = end_to_end_loss(&params, &input, &target, loss);
                params.layers[l].weights.as_slice_mut().unwrap()[idx] = orig - h;
                let down = end_to_end_loss(&params, &input, &target, loss);
                params.layers[l].weights.as_slice_mut().unwrap()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.layers[l].d_weights.as_slice().unwrap()[idx];
                report.merge(&compare_gradients(
                    &Array1::from(vec![analytic]),
                    &Array1::from(vec![numeric]),
                    SKIP_BELOW,
                ));
            }
            if let Some(bias_len) = params.layers[l].bias.as_ref().map(|b| b.len()) {
                for idx in 0..bias_len {
                    let orig = params.layers[l].bias.as_ref().unwrap()[idx];
                    params.layers[l].bias.as_mut().unwrap()[idx] = orig + h;
                    let up = end_to_end_loss(&params, &input, &target, loss);
                    params.layers[l].bias.as_mut().unwrap()[idx] = orig - h;
                    let down = end_to_end_loss(&params, &input, &target, loss);
                    params.layers[l].bias.as_mut().unwrap()[idx] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads.layers[l].d_bias.as_ref().unwrap()[idx];
                    report.merge(&compare_gradients(
                        &Array1::from(vec![analytic]),
                        &Array1::from(vec![numeric]),
                        SKIP_BELOW,
                    ));
                }
            }
        }
        outcomes.push(SuiteOutcome {
            name: format!("backprop ({loss})"),
            report,
            tolerance: 1e-4,
        });
    }
    Ok(outcomes)
}

/// Every finite-difference suite; the CLI `gradcheck` command runs this.
pub fn run_all(seed: u64, pairs: usize) -> Result<Vec<SuiteOutcome>> {
    let mut outcomes = ssim_gradient_suites(seed, pairs)?;
    outcomes.extend(backprop_suites(seed)?);
    Ok(outcomes)
}
