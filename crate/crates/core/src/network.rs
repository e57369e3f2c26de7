//! Fully-connected sensing + reconstruction network.
//!
//! Layer 0 is the sensing layer: bias-free and linear, so its weight matrix
//! *is* the compressed-sensing matrix applying `y = Phi * x`. The remaining
//! layers (K hidden reconstruction layers plus the output layer) carry biases
//! and sigmoid activations; the output activation is configurable so
//! reconstructions can be kept inside the pixel range.
//!
//! Forward and backward passes are hand-derived. Batched variants stack
//! samples as rows; parallel matrix products use a fixed column partition so
//! results are bit-identical regardless of thread scheduling.

use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::SignalVector;

/// Fixed column-block width for parallel matrix products. A compile-time
/// constant keeps the partition (and therefore the floating-point reduction
/// order) independent of the machine's thread count.
const GEMM_COL_CHUNK: usize = 512;

/// `a * b` with column blocks of the result computed in parallel.
fn par_matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut out = Array2::zeros((m, n));
    if n <= GEMM_COL_CHUNK {
        general_mat_mul(1.0, &a, &b, 0.0, &mut out);
        return out;
    }
    out.axis_chunks_iter_mut(Axis(1), GEMM_COL_CHUNK)
        .into_par_iter()
        .zip(b.axis_chunks_iter(Axis(1), GEMM_COL_CHUNK).into_par_iter())
        .for_each(|(mut out_block, b_block)| {
            general_mat_mul(1.0, &a, &b_block, 0.0, &mut out_block);
        });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
}

impl Activation {
    fn apply(&self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => z.clone(),
            Activation::Sigmoid => z.mapv(|t| 1.0 / (1.0 + (-t).exp())),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => write!(f, "linear"),
            Activation::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Shape of the end-to-end network: input N -> sensing M -> K hidden layers
/// of N*B -> output N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchitectureSpec {
    pub signal_len: usize,
    pub rate: f64,
    pub width_factor: usize,
    pub depth: usize,
    pub output_activation: Activation,
}

impl ArchitectureSpec {
    pub fn new(
        signal_len: usize,
        rate: f64,
        width_factor: usize,
        depth: usize,
        output_activation: Activation,
    ) -> Result<Self> {
        if signal_len == 0 {
            return Err(Error::Config("signal length must be positive".into()));
        }
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config(format!(
                "sensing rate must satisfy 0 < R < 1, got {rate}"
            )));
        }
        if !(width_factor == 1 || width_factor == 2) {
            return Err(Error::Config(format!(
                "width factor must be 1 or 2, got {width_factor}"
            )));
        }
        if depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        let spec = ArchitectureSpec {
            signal_len,
            rate,
            width_factor,
            depth,
            output_activation,
        };
        let m = spec.measurements();
        if m < 1 || m >= signal_len {
            return Err(Error::Config(format!(
                "measurement count {m} out of range for N={signal_len}"
            )));
        }
        Ok(spec)
    }

    /// Number of measurements `M = round(N * R)`.
    pub fn measurements(&self) -> usize {
        (self.signal_len as f64 * self.rate).round() as usize
    }

    /// Per-layer `(out, in, has_bias, activation)` tuples.
    pub fn layer_dims(&self) -> Vec<(usize, usize, bool, Activation)> {
        let n = self.signal_len;
        let m = self.measurements();
        let hidden = n * self.width_factor;
        let mut dims = vec![(m, n, false, Activation::Linear)];
        let mut prev = m;
        for _ in 0..self.depth {
            dims.push((hidden, prev, true, Activation::Sigmoid));
            prev = hidden;
        }
        dims.push((n, prev, true, self.output_activation));
        dims
    }
}

/// One fully-connected layer: weights are `(out, in)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Option<Array1<f64>>,
    pub activation: Activation,
}

/// Ordered layer stack; layer 0 is the sensing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn input_len(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_len(&self) -> usize {
        self.layers
            .last()
            .expect("nonempty network")
            .weights
            .nrows()
    }

    /// Structural invariants: nonempty, consecutive shapes chain, sensing
    /// layer bias-free and linear, bias lengths match.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let sensing = &self.layers[0];
        if sensing.bias.is_some() || sensing.activation != Activation::Linear {
            return Err(Error::Config(
                "sensing layer must be linear and bias-free".into(),
            ));
        }
        let mut prev_out = self.layers[0].weights.ncols();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.ncols() != prev_out {
                return Err(Error::Dimension(format!(
                    "layer {i} expects input {} but previous layer produces {prev_out}",
                    layer.weights.ncols()
                )));
            }
            if let Some(b) = &layer.bias {
                if b.len() != layer.weights.nrows() {
                    return Err(Error::Dimension(format!(
                        "layer {i} bias length {} does not match {} outputs",
                        b.len(),
                        layer.weights.nrows()
                    )));
                }
            }
            prev_out = layer.weights.nrows();
        }
        Ok(())
    }
}

/// Per-layer pre/post activations for a batch, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.input.nrows()
    }
}

/// Gradients mirroring one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Array2<f64>,
    pub d_bias: Option<Array1<f64>>,
}

/// Gradients mirroring [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

/// Seeded initialization: weights uniform in `[-1/sqrt(fan_in),
/// +1/sqrt(fan_in)]`, biases zero.
pub fn init_params(spec: &ArchitectureSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(out, inp, has_bias, activation)| {
            let bound = 1.0 / (inp as f64).sqrt();
            let mut weights = Array2::zeros((out, inp));
            for v in weights.iter_mut() {
                *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
            Layer {
                weights,
                bias: has_bias.then(|| Array1::zeros(out)),
                activation,
            }
        })
        .collect();
    NetworkParams { layers }
}

/// Batched forward pass; samples are rows of `x`.
pub fn forward_batch(
    params: &NetworkParams,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != params.input_len() {
        return Err(Error::Dimension(format!(
            "input width {} does not match network input {}",
            x.ncols(),
            params.input_len()
        )));
    }
    let mut cache = ForwardCache {
        input: x.clone(),
        pre: Vec::with_capacity(params.layers.len()),
        post: Vec::with_capacity(params.layers.len()),
    };
    let mut activ = x.clone();
    for layer in &params.layers {
        let mut z = par_matmul(activ.view(), layer.weights.t());
        if let Some(bias) = &layer.bias {
            z += &bias.view().insert_axis(Axis(0));
        }
        let post = layer.activation.apply(&z);
        cache.pre.push(z);
        cache.post.push(post.clone());
        activ = post;
    }
    Ok((activ, cache))
}

/// Single-sample forward pass.
pub fn forward(params: &NetworkParams, x: &SignalVector) -> Result<(SignalVector, ForwardCache)> {
    let row = x.view().insert_axis(Axis(0)).to_owned();
    let (out, cache) = forward_batch(params, &row)?;
    Ok((out.row(0).to_owned(), cache))
}

/// Batched backward pass. `d_output` holds one loss-gradient row per sample;
/// the returned gradients are summed over the batch (linearity makes the
/// batch mean just a pre-scaling of `d_output`).
pub fn backward_batch(
    params: &NetworkParams,
    cache: &ForwardCache,
    d_output: &Array2<f64>,
) -> Result<ParamGrads> {
    let last = cache
        .post
        .last()
        .ok_or_else(|| Error::Dimension("forward cache is empty".into()))?;
    if d_output.dim() != last.dim() {
        return Err(Error::Dimension(format!(
            "output gradient shape {:?} does not match forward output {:?}",
            d_output.dim(),
            last.dim()
        )));
    }
    if cache.post.len() != params.layers.len() {
        return Err(Error::Dimension(
            "forward cache does not match network depth".into(),
        ));
    }

    let mut grads_rev = Vec::with_capacity(params.layers.len());
    let mut d_post = d_output.clone();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        // Sigmoid derivative from the cached post-activation: a * (1 - a).
        let mut d_z = d_post;
        if layer.activation == Activation::Sigmoid {
            d_z.zip_mut_with(&cache.post[l], |g, &a| *g *= a * (1.0 - a));
        }
        let a_prev = if l == 0 {
            &cache.input
        } else {
            &cache.post[l - 1]
        };
        let d_weights = par_matmul(d_z.t(), a_prev.view());
        let d_bias = layer.bias.as_ref().map(|_| d_z.sum_axis(Axis(0)));
        grads_rev.push(LayerGrads { d_weights, d_bias });
        d_post = if l == 0 {
            Array2::zeros((0, 0))
        } else {
            par_matmul(d_z.view(), layer.weights.view())
        };
    }
    grads_rev.reverse();
    Ok(ParamGrads { layers: grads_rev })
}

/// Single-sample backward pass: exact gradients of the scalar loss with
/// respect to every weight and bias.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    d_output: &SignalVector,
) -> Result<ParamGrads> {
    let row = d_output.view().insert_axis(Axis(0)).to_owned();
    backward_batch(params, cache, &row)
}

/// Mean squared error `1/N * sum (y_hat - x)^2` and its gradient with
/// respect to `y_hat`.
pub fn mse_loss_and_grad(
    x: ArrayView1<'_, f64>,
    y_hat: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>)> {
    if x.len() != y_hat.len() {
        return Err(Error::Dimension(format!(
            "signal lengths disagree: {} vs {}",
            x.len(),
            y_hat.len()
        )));
    }
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(x.len());
    for (j, g) in grad.iter_mut().enumerate() {
        let diff = y_hat[j] - x[j];
        loss += diff * diff;
        *g = 2.0 * diff / n;
    }
    Ok((loss / n, grad))
}

/// Detach the sensing matrix: a copy of layer-0 weights.
pub fn extract_sensing_matrix(params: &NetworkParams) -> Array2<f64> {
    params.layers[0].weights.clone()
}

/// Apply a sensing matrix to a signal: `y = Phi * x`. Shares the forward
/// pass's matrix-product path, so measurements match the sensing layer's
/// pre-activation bit-for-bit.
pub fn apply_sensing(phi: &Array2<f64>, x: &SignalVector) -> Result<Array1<f64>> {
    if phi.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "sensing matrix has {} columns but signal length is {}",
            phi.ncols(),
            x.len()
        )));
    }
    let row = x.view().insert_axis(Axis(0));
    let out = par_matmul(row, phi.t());
    Ok(out.row(0).to_owned())
}
