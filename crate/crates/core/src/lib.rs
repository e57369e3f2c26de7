//! Joint learning of compressed-sensing matrices and fully-connected
//! reconstruction networks under SSIM or MSE loss.
//!
//! A fully-connected network senses a flattened grayscale image through a
//! bias-free linear first layer (its weights are the sensing matrix Phi) and
//! reconstructs it through sigmoid layers. Training minimizes either mean
//! squared error or `1 - SSIM`, where the structural-similarity score and its
//! exact analytic gradient are computed over all stride-1 windows via
//! kernel-based patch extraction. After training the sensing matrix can be
//! detached and exported for standalone measurement.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod network;
pub mod optim;
pub mod patches;
pub mod rng;
pub mod ssim;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{flatten, rotate90, save_pgm, unflatten, Image, SignalVector};
pub use network::{
    apply_sensing, extract_sensing_matrix, forward, init_params, mse_loss_and_grad, Activation,
    ArchitectureSpec, NetworkParams,
};
pub use optim::{adam_step, AdamConfig, AdamState, EarlyStop, StopDecision};
pub use ssim::{
    grad_ssim_image, ssim_image, ssim_loss_and_grad, LossReport, SsimConstants, WeightKind,
};
pub use trainer::{
    evaluate, load_checkpoint, reconstruct, save_checkpoint, train, Checkpoint, EvalReport,
    LossKind, MonitorKind, TrainConfig,
};
