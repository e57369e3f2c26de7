//! Training orchestration: epochs, minibatching, loss dispatch, validation
//! monitoring, checkpoint persistence, and test-set evaluation.
//!
//! One loop owns the parameters and optimizer state. Per-batch loss and
//! gradient evaluation fans out across batch members (order-preserving, so
//! results are deterministic) and joins before the Adam step. The best
//! checkpoint seen on the monitored quantity is retained and returned.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::{flatten, unflatten, Image};
use crate::network::{
    backward_batch, forward, forward_batch, init_params, mse_loss_and_grad, ArchitectureSpec,
    Layer, NetworkParams,
};
use crate::optim::{adam_step, AdamConfig, AdamState, EarlyStop, LayerMoments, StopDecision};
use crate::rng::{sub_rng, sub_seed};
use crate::ssim::{
    build_reference_cache, ssim_image, ssim_loss_and_grad, ssim_loss_and_grad_cached,
    ReferenceCache, SsimConstants, WeightKind,
};

const CHECKPOINT_MAGIC: &str = "cs-ssim-checkpoint";
const TENSOR_MAGIC: &str = "cs-ssim-tensor";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Batch width used for read-only evaluation passes.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ssim,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Ssim => write!(f, "ssim"),
            LossKind::Mse => write!(f, "mse"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssim" => Ok(LossKind::Ssim),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Which per-epoch quantity feeds the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorKind {
    Validation,
    Train,
}

impl fmt::Display for MonitorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MonitorKind::Validation => write!(f, "validation"),
            MonitorKind::Train => write!(f, "train"),
        }
    }
}

impl FromStr for MonitorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(MonitorKind::Validation),
            "train" => Ok(MonitorKind::Train),
            other => Err(Error::Config(format!("unknown monitor kind `{other}`"))),
        }
    }
}

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: ArchitectureSpec,
    pub loss: LossKind,
    pub weighting: WeightKind,
    pub window: usize,
    pub constants: SsimConstants,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub monitor: MonitorKind,
    /// When set, logs record elapsed time as 0 so identical seeded runs
    /// produce bit-identical logs.
    pub reproducible: bool,
    /// Precompute reference-side patch statistics once per training image
    /// (memory for speed; only affects the SSIM loss path).
    pub cache_reference_stats: bool,
    pub val_fraction: f64,
    pub data_dir: Option<PathBuf>,
    pub subset_train: Option<usize>,
    pub subset_test: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(arch: ArchitectureSpec) -> Self {
        TrainConfig {
            arch,
            loss: LossKind::Ssim,
            weighting: WeightKind::LogVariance,
            window: 8,
            constants: SsimConstants::default(),
            learning_rate: 5e-4,
            batch_size: 128,
            patience: 50,
            max_epochs: 2000,
            seed: 0,
            monitor: MonitorKind::Validation,
            reproducible: true,
            cache_reference_stats: false,
            val_fraction: 0.05,
            data_dir: None,
            subset_train: None,
            subset_test: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("window size must be at least 2".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Mean test-set scores; both metrics are reported regardless of the
/// training loss, with SSIM evaluated under uniform weights.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub per_image: Vec<(f64, f64)>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        format!(
            "epoch {} train_loss {} val_loss {} elapsed_s {:.3}",
            self.epoch, self.train_loss, self.val_loss, self.elapsed_s
        )
    }
}

/// Portable training snapshot: parameters, optimizer and stopping state, and
/// a key-value echo of the run configuration.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub params: NetworkParams,
    pub adam: Option<AdamState>,
    pub early_stop: EarlyStop,
    pub epoch: usize,
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn config_echo(config: &TrainConfig, height: usize, width: usize) -> Vec<(String, String)> {
    let mut echo = vec![
        ("signal_len".into(), config.arch.signal_len.to_string()),
        ("rate".into(), config.arch.rate.to_string()),
        ("width_factor".into(), config.arch.width_factor.to_string()),
        ("depth".into(), config.arch.depth.to_string()),
        (
            "output_activation".into(),
            config.arch.output_activation.to_string(),
        ),
        ("height".into(), height.to_string()),
        ("width".into(), width.to_string()),
        ("loss".into(), config.loss.to_string()),
        ("weighting".into(), config.weighting.to_string()),
        ("window".into(), config.window.to_string()),
        ("c1".into(), config.constants.c1.to_string()),
        ("c2".into(), config.constants.c2.to_string()),
        ("learning_rate".into(), config.learning_rate.to_string()),
        ("batch_size".into(), config.batch_size.to_string()),
        ("patience".into(), config.patience.to_string()),
        ("max_epochs".into(), config.max_epochs.to_string()),
        ("seed".into(), config.seed.to_string()),
        ("monitor".into(), config.monitor.to_string()),
        ("reproducible".into(), config.reproducible.to_string()),
        (
            "cache_reference_stats".into(),
            config.cache_reference_stats.to_string(),
        ),
        ("val_fraction".into(), config.val_fraction.to_string()),
    ];
    if let Some(dir) = &config.data_dir {
        echo.push(("data_dir".into(), dir.display().to_string()));
    }
    if let Some(k) = config.subset_train {
        echo.push(("subset_train".into(), k.to_string()));
    }
    if let Some(k) = config.subset_test {
        echo.push(("subset_test".into(), k.to_string()));
    }
    if let Some(dir) = &config.out_dir {
        echo.push(("out_dir".into(), dir.display().to_string()));
    }
    echo
}

/// Train from a fresh seeded initialization.
pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    let params = init_params(&config.arch, sub_seed(config.seed, "init"));
    train_from(config, manifest, params)
}

/// Train from explicit starting parameters (warm start).
pub fn train_from(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    params: NetworkParams,
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    fit(config, manifest, params, &mut |_| {})
}

/// Train, invoking `on_epoch` as each log line is produced.
pub fn train_streaming(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    params: NetworkParams,
    on_epoch: &mut dyn FnMut(&LogEntry),
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    fit(config, manifest, params, on_epoch)
}

fn fit(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    mut params: NetworkParams,
    on_epoch: &mut dyn FnMut(&LogEntry),
) -> Result<(Checkpoint, Vec<LogEntry>)> {
    config.validate()?;
    params.validate()?;
    if manifest.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (height, width) = (manifest.train[0].height(), manifest.train[0].width());
    let n = params.input_len();
    if height * width != n || params.output_len() != n {
        return Err(Error::Dimension(format!(
            "network signal length {} does not match {}x{} images",
            n, height, width
        )));
    }
    if config.arch.signal_len != n {
        return Err(Error::Dimension(
            "architecture signal length does not match the parameters".into(),
        ));
    }

    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            alpha: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut stop = EarlyStop::new(config.patience);
    let mut shuffle_rng = sub_rng(config.seed, "shuffle");
    let started = Instant::now();

    let ref_caches: Option<Vec<ReferenceCache>> =
        if config.loss == LossKind::Ssim && config.cache_reference_stats {
            Some(
                manifest
                    .train
                    .iter()
                    .map(|img| build_reference_cache(img, config.window))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };

    let mut best: Option<(NetworkParams, AdamState, usize)> = None;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..manifest.train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let bs = batch.len();
            let mut x = Array2::zeros((bs, n));
            for (row, &i) in batch.iter().enumerate() {
                x.row_mut(row).assign(&flatten(&manifest.train[i]));
            }
            let (y, cache) = forward_batch(&params, &x)?;

            let per_sample: Vec<(f64, Array1<f64>)> = (0..bs)
                .into_par_iter()
                .map(|row| -> Result<(f64, Array1<f64>)> {
                    match config.loss {
                        LossKind::Mse => {
                            let (l, g) = mse_loss_and_grad(x.row(row), y.row(row))?;
                            Ok((l, g))
                        }
                        LossKind::Ssim => {
                            let y_img = unflatten(&y.row(row).to_owned(), height, width)?;
                            let report = match &ref_caches {
                                Some(caches) => ssim_loss_and_grad_cached(
                                    &caches[batch[row]],
                                    &y_img,
                                    config.weighting,
                                    &config.constants,
                                ),
                                None => ssim_loss_and_grad(
                                    &manifest.train[batch[row]],
                                    &y_img,
                                    config.window,
                                    config.weighting,
                                    &config.constants,
                                ),
                            }?;
                            Ok((report.loss, flatten(&report.grad)))
                        }
                    }
                })
                .collect::<Result<_>>()?;

            let batch_loss: f64 = per_sample.iter().map(|(l, _)| *l).sum::<f64>() / bs as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }

            // Pre-scaling the output gradients by 1/batch makes the summed
            // layer gradients the batch mean.
            let mut d_y = Array2::zeros((bs, n));
            let inv_bs = 1.0 / bs as f64;
            for (row, (_, g)) in per_sample.iter().enumerate() {
                d_y.row_mut(row).assign(&g.mapv(|v| v * inv_bs));
            }
            let grads = backward_batch(&params, &cache, &d_y)?;
            adam_step(&mut adam, &mut params, &grads)?;
            loss_sum += batch_loss * bs as f64;
        }
        let train_loss = loss_sum / manifest.train.len() as f64;

        let val_loss = if manifest.validation.is_empty() {
            train_loss
        } else {
            objective_loss(&params, &manifest.validation, config)?
        };
        let monitored = match config.monitor {
            MonitorKind::Validation => val_loss,
            MonitorKind::Train => train_loss,
        };

        let decision = stop.observe_epoch(monitored)?;
        if stop.epochs_since_improvement() == 0 {
            best = Some((params.clone(), adam.clone(), epoch));
        }

        let entry = LogEntry {
            epoch,
            train_loss,
            val_loss,
            elapsed_s: if config.reproducible {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        };
        on_epoch(&entry);
        log.push(entry);

        if decision == StopDecision::Stop {
            break;
        }
    }

    let (best_params, best_adam, best_epoch) =
        best.expect("at least one epoch ran, so a best snapshot exists");
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        params: best_params,
        adam: Some(best_adam),
        early_stop: stop,
        epoch: best_epoch,
        config: config_echo(config, height, width),
    };
    Ok((checkpoint, log))
}

/// Mean training-objective loss of `params` over a list of images, using the
/// loss/weighting configured for training. This is the quantity monitored
/// for early stopping.
pub fn objective_loss(
    params: &NetworkParams,
    images: &[Image],
    config: &TrainConfig,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("cannot evaluate an empty image list".into()));
    }
    let (height, width) = (images[0].height(), images[0].width());
    let n = params.input_len();
    let mut total = 0.0;
    for chunk in images.chunks(EVAL_BATCH) {
        let mut x = Array2::zeros((chunk.len(), n));
        for (row, img) in chunk.iter().enumerate() {
            x.row_mut(row).assign(&flatten(img));
        }
        let (y, _) = forward_batch(params, &x)?;
        let losses: Vec<f64> = (0..chunk.len())
            .into_par_iter()
            .map(|row| -> Result<f64> {
                match config.loss {
                    LossKind::Mse => Ok(mse_loss_and_grad(x.row(row), y.row(row))?.0),
                    LossKind::Ssim => {
                        let y_img = unflatten(&y.row(row).to_owned(), height, width)?;
                        let s = ssim_image(
                            &chunk[row],
                            &y_img,
                            config.window,
                            config.weighting,
                            &config.constants,
                        )?;
                        Ok(1.0 - s)
                    }
                }
            })
            .collect::<Result<_>>()?;
        total += losses.iter().sum::<f64>();
    }
    Ok(total / images.len() as f64)
}

/// Forward every image and score the reconstruction with uniform-weight SSIM
/// and MSE against the original.
pub fn evaluate(params: &NetworkParams, images: &[Image], window: usize) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Config("cannot evaluate an empty image list".into()));
    }
    let (height, width) = (images[0].height(), images[0].width());
    let n = params.input_len();
    if height * width != n {
        return Err(Error::Dimension(format!(
            "network signal length {} does not match {}x{} images",
            n, height, width
        )));
    }
    let constants = SsimConstants::default();
    let mut per_image = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let mut x = Array2::zeros((chunk.len(), n));
        for (row, img) in chunk.iter().enumerate() {
            x.row_mut(row).assign(&flatten(img));
        }
        let (y, _) = forward_batch(params, &x)?;
        let scores: Vec<(f64, f64)> = (0..chunk.len())
            .into_par_iter()
            .map(|row| -> Result<(f64, f64)> {
                let y_img = unflatten(&y.row(row).to_owned(), height, width)?;
                let ssim =
                    ssim_image(&chunk[row], &y_img, window, WeightKind::Uniform, &constants)?;
                let mse = mse_loss_and_grad(x.row(row), y.row(row))?.0;
                Ok((ssim, mse))
            })
            .collect::<Result<_>>()?;
        per_image.extend(scores);
    }
    let count = per_image.len() as f64;
    Ok(EvalReport {
        mean_ssim: per_image.iter().map(|(s, _)| s).sum::<f64>() / count,
        mean_mse: per_image.iter().map(|(_, m)| m).sum::<f64>() / count,
        per_image,
    })
}

/// Run an image through the network and reshape the output back to a raster.
pub fn reconstruct(params: &NetworkParams, image: &Image) -> Result<Image> {
    let (y, _) = forward(params, &flatten(image))?;
    unflatten(&y, image.height(), image.width())
}

// ---------------------------------------------------------------------------
// Checkpoint file format
//
// Plain text: a magic+version line, `[config]` and `[layers]` and `[state]`
// sections of `key = value` lines, one `[tensor NAME]` block per tensor, and
// a closing `[end]`. Floats are written with Rust's shortest round-trip
// formatting, so parsing recovers every bit.
// ---------------------------------------------------------------------------

enum Tensor {
    D1(Array1<f64>),
    D2(Array2<f64>),
}

fn push_tensor_block(out: &mut String, name: &str, tensor: &Tensor) {
    out.push_str(&format!("[tensor {name}]\n"));
    match tensor {
        Tensor::D1(v) => {
            out.push_str(&format!("shape {}\n", v.len()));
            let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        Tensor::D2(m) => {
            out.push_str(&format!("shape {} {}\n", m.nrows(), m.ncols()));
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
}

fn checkpoint_to_string(c: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!("{CHECKPOINT_MAGIC} v{}\n", c.version));

    out.push_str("[config]\n");
    for (k, v) in &c.config {
        out.push_str(&format!("{k} = {v}\n"));
    }

    out.push_str("[layers]\n");
    for (i, layer) in c.params.layers.iter().enumerate() {
        out.push_str(&format!(
            "layer{} = {} {} {} {}\n",
            i,
            layer.weights.nrows(),
            layer.weights.ncols(),
            layer.activation,
            if layer.bias.is_some() {
                "bias"
            } else {
                "nobias"
            }
        ));
    }

    out.push_str("[state]\n");
    out.push_str(&format!("epoch = {}\n", c.epoch));
    out.push_str(&format!("early_stop_best = {}\n", c.early_stop.best()));
    out.push_str(&format!(
        "early_stop_since = {}\n",
        c.early_stop.epochs_since_improvement()
    ));
    out.push_str(&format!(
        "early_stop_patience = {}\n",
        c.early_stop.patience()
    ));
    out.push_str(&format!("adam_present = {}\n", c.adam.is_some()));
    if let Some(adam) = &c.adam {
        out.push_str(&format!("adam_step = {}\n", adam.step));
        out.push_str(&format!("adam_alpha = {}\n", adam.hyper.alpha));
        out.push_str(&format!("adam_beta1 = {}\n", adam.hyper.beta1));
        out.push_str(&format!("adam_beta2 = {}\n", adam.hyper.beta2));
        out.push_str(&format!("adam_epsilon = {}\n", adam.hyper.epsilon));
    }

    for (i, layer) in c.params.layers.iter().enumerate() {
        push_tensor_block(
            &mut out,
            &format!("layer{i}.weights"),
            &Tensor::D2(layer.weights.clone()),
        );
        if let Some(b) = &layer.bias {
            push_tensor_block(&mut out, &format!("layer{i}.bias"), &Tensor::D1(b.clone()));
        }
    }
    if let Some(adam) = &c.adam {
        for (i, m) in adam.layers.iter().enumerate() {
            push_tensor_block(
                &mut out,
                &format!("adam.layer{i}.m_weights"),
                &Tensor::D2(m.m_weights.clone()),
            );
            push_tensor_block(
                &mut out,
                &format!("adam.layer{i}.v_weights"),
                &Tensor::D2(m.v_weights.clone()),
            );
            if let Some(mb) = &m.m_bias {
                push_tensor_block(
                    &mut out,
                    &format!("adam.layer{i}.m_bias"),
                    &Tensor::D1(mb.clone()),
                );
            }
            if let Some(vb) = &m.v_bias {
                push_tensor_block(
                    &mut out,
                    &format!("adam.layer{i}.v_bias"),
                    &Tensor::D1(vb.clone()),
                );
            }
        }
    }
    out.push_str("[end]\n");
    out
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(c)).map_err(|e| Error::file(path, e))
}

struct LineCursor<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        LineCursor {
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Format("unexpected end of checkpoint (truncated?)".into()))?;
        self.pos += 1;
        Ok(line)
    }
}

fn parse_key_value(line: &str) -> Result<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Format(format!("expected `key = value`, got `{line}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("bad {what} value `{s}`")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::Format(format!("bad {what} value `{s}`")))
}

fn parse_section_kv(cursor: &mut LineCursor<'_>) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    while let Some(line) = cursor.peek() {
        if line.starts_with('[') {
            break;
        }
        let line = cursor.next()?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(parse_key_value(line)?);
    }
    Ok(pairs)
}

fn parse_tensor(cursor: &mut LineCursor<'_>) -> Result<Tensor> {
    let shape_line = cursor.next()?;
    let dims: Vec<usize> = shape_line
        .strip_prefix("shape")
        .ok_or_else(|| Error::Format(format!("expected shape line, got `{shape_line}`")))?
        .split_whitespace()
        .map(|t| parse_usize(t, "shape"))
        .collect::<Result<_>>()?;
    match dims.as_slice() {
        [len] => {
            let line = cursor.next()?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| parse_f64(t, "tensor"))
                .collect::<Result<_>>()?;
            if values.len() != *len {
                return Err(Error::Format(format!(
                    "tensor row has {} values, expected {len}",
                    values.len()
                )));
            }
            Ok(Tensor::D1(Array1::from(values)))
        }
        [rows, cols] => {
            let mut flat = Vec::with_capacity(rows * cols);
            for _ in 0..*rows {
                let line = cursor.next()?;
                let before = flat.len();
                for t in line.split_whitespace() {
                    flat.push(parse_f64(t, "tensor")?);
                }
                if flat.len() - before != *cols {
                    return Err(Error::Format(format!(
                        "tensor row has {} values, expected {cols}",
                        flat.len() - before
                    )));
                }
            }
            let m = Array2::from_shape_vec((*rows, *cols), flat)
                .map_err(|e| Error::Format(e.to_string()))?;
            Ok(Tensor::D2(m))
        }
        other => Err(Error::Format(format!(
            "unsupported tensor rank {}",
            other.len()
        ))),
    }
}

fn kv_get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("missing `{key}` in checkpoint state")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut cursor = LineCursor::new(&text);

    let header = cursor.next()?;
    let expected = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    if header != expected {
        return Err(Error::Format(format!(
            "unsupported checkpoint header `{header}` (expected `{expected}`)"
        )));
    }

    if cursor.next()? != "[config]" {
        return Err(Error::Format("expected [config] section".into()));
    }
    let config = parse_section_kv(&mut cursor)?;

    if cursor.next()? != "[layers]" {
        return Err(Error::Format("expected [layers] section".into()));
    }
    struct LayerMeta {
        rows: usize,
        cols: usize,
        activation: crate::network::Activation,
        has_bias: bool,
    }
    let mut layer_meta = Vec::new();
    for (i, (key, value)) in parse_section_kv(&mut cursor)?.into_iter().enumerate() {
        if key != format!("layer{i}") {
            return Err(Error::Format(format!(
                "layer lines out of order: expected layer{i}, got `{key}`"
            )));
        }
        let parts: Vec<&str> = value.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad layer line `{value}`")));
        }
        layer_meta.push(LayerMeta {
            rows: parse_usize(parts[0], "layer rows")?,
            cols: parse_usize(parts[1], "layer cols")?,
            activation: parts[2].parse()?,
            has_bias: match parts[3] {
                "bias" => true,
                "nobias" => false,
                other => {
                    return Err(Error::Format(format!("bad bias flag `{other}`")));
                }
            },
        });
    }
    if layer_meta.is_empty() {
        return Err(Error::Format("checkpoint declares no layers".into()));
    }

    if cursor.next()? != "[state]" {
        return Err(Error::Format("expected [state] section".into()));
    }
    let state = parse_section_kv(&mut cursor)?;

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    loop {
        let line = cursor.next()?;
        if line == "[end]" {
            break;
        }
        let name = line
            .strip_prefix("[tensor ")
            .and_then(|rest| rest.strip_suffix(']'))
            .ok_or_else(|| {
                Error::Format(format!("expected tensor block or [end], got `{line}`"))
            })?;
        tensors.push((name.to_string(), parse_tensor(&mut cursor)?));
    }
    let take_d2 = |tensors: &mut Vec<(String, Tensor)>, name: &str| -> Result<Array2<f64>> {
        let idx = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        match tensors.remove(idx).1 {
            Tensor::D2(m) => Ok(m),
            Tensor::D1(_) => Err(Error::Format(format!("tensor `{name}` should be 2-D"))),
        }
    };
    let take_d1 = |tensors: &mut Vec<(String, Tensor)>, name: &str| -> Result<Array1<f64>> {
        let idx = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        match tensors.remove(idx).1 {
            Tensor::D1(v) => Ok(v),
            Tensor::D2(_) => Err(Error::Format(format!("tensor `{name}` should be 1-D"))),
        }
    };

    let mut layers = Vec::with_capacity(layer_meta.len());
    for (i, meta) in layer_meta.iter().enumerate() {
        let weights = take_d2(&mut tensors, &format!("layer{i}.weights"))?;
        if weights.dim() != (meta.rows, meta.cols) {
            return Err(Error::Format(format!(
                "layer{i}.weights shape {:?} does not match declared {}x{}",
                weights.dim(),
                meta.rows,
                meta.cols
            )));
        }
        let bias = if meta.has_bias {
            let b = take_d1(&mut tensors, &format!("layer{i}.bias"))?;
            if b.len() != meta.rows {
                return Err(Error::Format(format!(
                    "layer{i}.bias length {} does not match {} outputs",
                    b.len(),
                    meta.rows
                )));
            }
            Some(b)
        } else {
            None
        };
        layers.push(Layer {
            weights,
            bias,
            activation: meta.activation,
        });
    }
    let params = NetworkParams { layers };
    params.validate()?;

    let adam_present = kv_get(&state, "adam_present")? == "true";
    let adam = if adam_present {
        let hyper = AdamConfig {
            alpha: parse_f64(kv_get(&state, "adam_alpha")?, "adam_alpha")?,
            beta1: parse_f64(kv_get(&state, "adam_beta1")?, "adam_beta1")?,
            beta2: parse_f64(kv_get(&state, "adam_beta2")?, "adam_beta2")?,
            epsilon: parse_f64(kv_get(&state, "adam_epsilon")?, "adam_epsilon")?,
        };
        let step = kv_get(&state, "adam_step")?
            .parse::<u64>()
            .map_err(|_| Error::Format("bad adam_step".into()))?;
        let mut moment_layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            let m_weights = take_d2(&mut tensors, &format!("adam.layer{i}.m_weights"))?;
            let v_weights = take_d2(&mut tensors, &format!("adam.layer{i}.v_weights"))?;
            if m_weights.dim() != layer.weights.dim() || v_weights.dim() != layer.weights.dim() {
                return Err(Error::Format(format!(
                    "adam moments for layer {i} do not mirror the weights"
                )));
            }
            let (m_bias, v_bias) = if layer.bias.is_some() {
                (
                    Some(take_d1(&mut tensors, &format!("adam.layer{i}.m_bias"))?),
                    Some(take_d1(&mut tensors, &format!("adam.layer{i}.v_bias"))?),
                )
            } else {
                (None, None)
            };
            moment_layers.push(LayerMoments {
                m_weights,
                v_weights,
                m_bias,
                v_bias,
            });
        }
        Some(AdamState {
            hyper,
            step,
            layers: moment_layers,
        })
    } else {
        None
    };

    let early_stop = EarlyStop::from_parts(
        parse_f64(kv_get(&state, "early_stop_best")?, "early_stop_best")?,
        parse_usize(kv_get(&state, "early_stop_since")?, "early_stop_since")?,
        parse_usize(
            kv_get(&state, "early_stop_patience")?,
            "early_stop_patience",
        )?,
    );
    let epoch = parse_usize(kv_get(&state, "epoch")?, "epoch")?;

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        params,
        adam,
        early_stop,
        epoch,
        config,
    })
}

/// Write a single named 2-D tensor in the checkpoint tensor format.
pub fn save_matrix(name: &str, matrix: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{TENSOR_MAGIC} v{CHECKPOINT_VERSION}\n"));
    push_tensor_block(&mut out, name, &Tensor::D2(matrix.clone()));
    out.push_str("[end]\n");
    std::fs::write(path, out).map_err(|e| Error::file(path, e))
}

/// Read a file written by [`save_matrix`].
pub fn load_matrix(path: &Path) -> Result<(String, Array2<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut cursor = LineCursor::new(&text);
    let header = cursor.next()?;
    let expected = format!("{TENSOR_MAGIC} v{CHECKPOINT_VERSION}");
    if header != expected {
        return Err(Error::Format(format!(
            "unsupported tensor header `{header}` (expected `{expected}`)"
        )));
    }
    let line = cursor.next()?;
    let name = line
        .strip_prefix("[tensor ")
        .and_then(|rest| rest.strip_suffix(']'))
        .ok_or_else(|| Error::Format(format!("expected tensor block, got `{line}`")))?
        .to_string();
    let tensor = parse_tensor(&mut cursor)?;
    if cursor.next()? != "[end]" {
        return Err(Error::Format("expected [end]".into()));
    }
    match tensor {
        Tensor::D2(m) => Ok((name, m)),
        Tensor::D1(_) => Err(Error::Format("expected a 2-D tensor".into())),
    }
}

/// Write training-log lines to a file.
pub fn write_train_log(entries: &[LogEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::file(path, e))
}
