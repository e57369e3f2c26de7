//! Adam parameter updates and the patience-based stopping rule.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::network::{NetworkParams, ParamGrads};

/// Adam hyperparameters. Defaults follow the method's published values with
/// the training protocol's initial learning rate of `5e-4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    pub m_weights: Array2<f64>,
    pub v_weights: Array2<f64>,
    pub m_bias: Option<Array1<f64>>,
    pub v_bias: Option<Array1<f64>>,
}

/// Optimizer state mirroring the parameter shapes, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamConfig,
    pub step: u64,
    pub layers: Vec<LayerMoments>,
}

impl AdamState {
    pub fn new(params: &NetworkParams, hyper: AdamConfig) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|layer| LayerMoments {
                m_weights: Array2::zeros(layer.weights.dim()),
                v_weights: Array2::zeros(layer.weights.dim()),
                m_bias: layer.bias.as_ref().map(|b| Array1::zeros(b.len())),
                v_bias: layer.bias.as_ref().map(|b| Array1::zeros(b.len())),
            })
            .collect();
        AdamState {
            hyper,
            step: 0,
            layers,
        }
    }
}

fn adam_update_slice(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamConfig,
    bias_corr1: f64,
    bias_corr2: f64,
) {
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bias_corr1;
        let v_hat = v[i] / bias_corr2;
        theta[i] -= hyper.alpha * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
}

/// One synchronized Adam step over every parameter:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`, then the bias-corrected
/// update `theta <- theta - alpha * m_hat / (sqrt(v_hat) + eps)` with the
/// step counter incremented before correction.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NetworkParams,
    grads: &ParamGrads,
) -> Result<()> {
    if state.layers.len() != params.layers.len() || grads.layers.len() != params.layers.len() {
        return Err(Error::Dimension(format!(
            "optimizer state covers {} layers, parameters {} and gradients {}",
            state.layers.len(),
            params.layers.len(),
            grads.layers.len()
        )));
    }
    for ((layer, moments), grad) in params
        .layers
        .iter()
        .zip(state.layers.iter())
        .zip(grads.layers.iter())
    {
        if layer.weights.dim() != grad.d_weights.dim()
            || layer.weights.dim() != moments.m_weights.dim()
            || layer.bias.is_some() != grad.d_bias.is_some()
        {
            return Err(Error::Dimension(
                "gradient or moment shapes do not mirror the parameters".into(),
            ));
        }
    }

    state.step += 1;
    let hyper = state.hyper;
    let bias_corr1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bias_corr2 = 1.0 - hyper.beta2.powi(state.step as i32);

    for ((layer, moments), grad) in params
        .layers
        .iter_mut()
        .zip(state.layers.iter_mut())
        .zip(grads.layers.iter())
    {
        adam_update_slice(
            layer.weights.as_slice_mut().expect("standard layout"),
            grad.d_weights.as_slice().expect("standard layout"),
            moments.m_weights.as_slice_mut().expect("standard layout"),
            moments.v_weights.as_slice_mut().expect("standard layout"),
            &hyper,
            bias_corr1,
            bias_corr2,
        );
        if let (Some(bias), Some(d_bias)) = (&mut layer.bias, &grad.d_bias) {
            adam_update_slice(
                bias.as_slice_mut().expect("standard layout"),
                d_bias.as_slice().expect("standard layout"),
                moments.m_bias.as_mut().unwrap().as_slice_mut().unwrap(),
                moments.v_bias.as_mut().unwrap().as_slice_mut().unwrap(),
                &hyper,
                bias_corr1,
                bias_corr2,
            );
        }
    }
    Ok(())
}

/// Decision returned by the stopping rule each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Patience rule: stop after more than `patience` consecutive epochs without
/// a strictly lower monitored value.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    best: f64,
    epochs_since: usize,
    patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            epochs_since: 0,
            patience,
        }
    }

    pub fn from_parts(best: f64, epochs_since: usize, patience: usize) -> Self {
        EarlyStop {
            best,
            epochs_since,
            patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    /// Record one epoch's monitored value. A strictly lower value resets the
    /// counter; equality counts as no improvement.
    pub fn observe_epoch(&mut self, monitored: f64) -> Result<StopDecision> {
        if !monitored.is_finite() {
            return Err(Error::Numeric(format!(
                "monitored value is not finite: {monitored}"
            )));
        }
        if monitored < self.best {
            self.best = monitored;
            self.epochs_since = 0;
            Ok(StopDecision::Continue)
        } else {
            self.epochs_since += 1;
            if self.epochs_since > self.patience {
                Ok(StopDecision::Stop)
            } else {
                Ok(StopDecision::Continue)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Activation, ArchitectureSpec, Layer};
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    fn tiny_params() -> NetworkParams {
        init_params(
            &ArchitectureSpec::new(8, 0.25, 1, 1, Activation::Sigmoid).unwrap(),
            3,
        )
    }

    fn zero_grads_like(params: &NetworkParams) -> ParamGrads {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| crate::network::LayerGrads {
                    d_weights: Array2::zeros(l.weights.dim()),
                    d_bias: l.bias.as_ref().map(|b| Array1::zeros(b.len())),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_gradient_step_leaves_parameters_unchanged() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        let grads = zero_grads_like(&params);
        adam_step(&mut state, &mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    /// Scalar network: one 1x1 linear layer, so Adam's update path can be
    /// traced against an independent scalar implementation.
    fn scalar_params(theta: f64) -> NetworkParams {
        NetworkParams {
            layers: vec![Layer {
                weights: Array2::from_elem((1, 1), theta),
                bias: None,
                activation: Activation::Linear,
            }],
        }
    }

    fn scalar_grad(g: f64) -> ParamGrads {
        ParamGrads {
            layers: vec![crate::network::LayerGrads {
                d_weights: Array2::from_elem((1, 1), g),
                d_bias: None,
            }],
        }
    }

    #[test]
    fn first_step_moves_by_roughly_minus_alpha_sign_g() {
        let hyper = AdamConfig::default();
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(&params, hyper);
        adam_step(&mut state, &mut params, &scalar_grad(0.2)).unwrap();
        let delta = params.layers[0].weights[[0, 0]] - 1.0;
        // Bias corrections cancel at t=1, so the step is -alpha modulo eps.
        assert!((delta + hyper.alpha).abs() < 1e-9, "delta = {delta}");
    }

    #[test]
    fn two_step_quadratic_trace_matches_independent_scalar_adam() {
        // Loss theta^2 from theta = 1, gradient 2*theta.
        let hyper = AdamConfig::default();
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(&params, hyper);

        // Independent scalar trace, written directly from the update rules.
        let mut theta_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2u32 {
            let g = 2.0 * theta_ref;
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - hyper.beta1.powi(t as i32));
            let v_hat = v / (1.0 - hyper.beta2.powi(t as i32));
            theta_ref -= hyper.alpha * m_hat / (v_hat.sqrt() + hyper.epsilon);

            let g_impl = 2.0 * params.layers[0].weights[[0, 0]];
            adam_step(&mut state, &mut params, &scalar_grad(g_impl)).unwrap();
        }
        assert!((params.layers[0].weights[[0, 0]] - theta_ref).abs() < 1e-12);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = tiny_params();
            let mut state = AdamState::new(&params, AdamConfig::default());
            for i in 0..5 {
                let mut grads = zero_grads_like(&params);
                for g in &mut grads.layers {
                    g.d_weights.fill(0.01 * (i + 1) as f64);
                }
                adam_step(&mut state, &mut params, &grads).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_gradient_shapes_are_rejected() {
        let mut params = tiny_params();
        let mut state = AdamState::new(&params, AdamConfig::default());
        let mut grads = zero_grads_like(&params);
        grads.layers[0].d_weights = Array2::zeros((1, 1));
        assert!(matches!(
            adam_step(&mut state, &mut params, &grads),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn strictly_decreasing_sequence_never_stops() {
        let mut stop = EarlyStop::new(3);
        for i in 0..100 {
            let d = stop.observe_epoch(100.0 - i as f64).unwrap();
            assert_eq!(d, StopDecision::Continue);
            assert_eq!(stop.epochs_since_improvement(), 0);
        }
    }

    #[test]
    fn constant_sequence_stops_on_the_51st_nonimproving_observation() {
        let mut stop = EarlyStop::new(50);
        assert_eq!(stop.observe_epoch(1.0).unwrap(), StopDecision::Continue);
        for i in 1..=50 {
            assert_eq!(
                stop.observe_epoch(1.0).unwrap(),
                StopDecision::Continue,
                "observation {i} after the first should still be tolerated"
            );
        }
        assert_eq!(stop.observe_epoch(1.0).unwrap(), StopDecision::Stop);
    }

    #[test]
    fn equal_to_best_counts_as_no_improvement() {
        let mut stop = EarlyStop::new(2);
        stop.observe_epoch(5.0).unwrap();
        stop.observe_epoch(5.0).unwrap();
        assert_eq!(stop.epochs_since_improvement(), 1);
        stop.observe_epoch(4.0).unwrap();
        assert_eq!(stop.epochs_since_improvement(), 0);
    }

    #[test]
    fn non_finite_monitored_value_is_a_numeric_error() {
        let mut stop = EarlyStop::new(2);
        assert!(matches!(
            stop.observe_epoch(f64::NAN),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            stop.observe_epoch(f64::INFINITY),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn best_value_never_increases(values in proptest::collection::vec(0.0f64..100.0, 1..60)) {
            let mut stop = EarlyStop::new(usize::MAX);
            let mut prev_best = f64::INFINITY;
            for v in values {
                stop.observe_epoch(v).unwrap();
                prop_assert!(stop.best() <= prev_best);
                prop_assert!(stop.best() <= v);
                prev_best = stop.best();
            }
        }

        #[test]
        fn patience_tolerates_exactly_p_nonimproving_epochs(p in 0usize..10) {
            let mut stop = EarlyStop::new(p);
            stop.observe_epoch(1.0).unwrap();
            let mut decisions = Vec::new();
            for _ in 0..p + 1 {
                decisions.push(stop.observe_epoch(2.0).unwrap());
            }
            for d in &decisions[..p] {
                prop_assert_eq!(*d, StopDecision::Continue);
            }
            prop_assert_eq!(decisions[p], StopDecision::Stop);
        }
    }
}
