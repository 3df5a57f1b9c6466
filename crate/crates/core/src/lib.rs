//! Temporal latent residual networks for time-series diffeomorphic image
//! registration.
//!
//! The crate is organised bottom-up:
//!
//! - [`fields`]: images, velocity and deformation fields, bilinear warping,
//!   composition, the scaling-and-squaring exponential map, Jacobian analysis
//!   and the velocity smoothness energy, together with their adjoints.
//! - [`nn`]: the small convolution toolkit (im2col + GEMM) the network is
//!   built from.
//! - [`network`]: the pairwise U-Net encoder/decoder, the temporal latent
//!   residual unit and the pairwise ablation baseline.
//! - [`training`]: the sequence loss, its gradient, Adam, checkpoints and
//!   gradient checking.
//! - [`synthdata`]: lemniscate and ring sequence generators and the dataset
//!   container.
//! - [`metrics`]: MSE, Dice, Hausdorff distance, segmentation propagation and
//!   dataset evaluation.
//! - [`config`], [`experiment`], [`plots`]: the experiment layer behind the
//!   `tlrn` command-line tool.

pub mod config;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod plots;
pub mod real;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use fields::{BoundaryMode, DeformationField, GridImage, JacobianMap, VelocityField};
pub use metrics::{BinaryMask, DiceOutcome, EvalReport};
pub use network::{Mode, ModelParams, Network, NetworkConfig, SequenceOutput};
pub use synthdata::SequenceSample;
pub use real::{Dtype, Real};

