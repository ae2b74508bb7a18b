//! Energy-based density models trained by multiscale denoising score
//! matching, with annealed Langevin sampling, annealed importance sampling
//! for likelihoods, and diagnostics for score accuracy and sample quality.
//!
//! ```
//! use mdsm_core::{EnergyFn, EnergyNet, NetConfig, Tensor};
//!
//! let net = EnergyNet::init(NetConfig::new(2, vec![16, 16], 0))?;
//! let x = Tensor::matrix(3, 2, vec![0.0, 0.1, 0.5, 0.5, 1.0, -1.0])?;
//! let (energy, grad) = net.energy_and_grad(&x)?;
//! assert_eq!(energy.shape(), &[3]);
//! assert_eq!(grad.shape(), &[3, 2]);
//! # Ok::<(), mdsm_core::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod energy;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod net;
pub mod noise;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use analysis::{GmmEnergy, GmmOracle, ShellSpec};
pub use autodiff::{Tape, Var};
pub use config::{Config, DataKind};
pub use energy::{ConstantEnergy, EnergyFn, QuadraticEnergy, ScaledEnergy};
pub use error::{Error, Result};
pub use io::Checkpoint;
pub use likelihood::{AisConfig, AisResult, BetaSpacing};
pub use net::{BoundNet, EnergyNet, NetConfig};
pub use noise::{NoiseSchedule, Spacing};
pub use sampler::{AnnealSchedule, SampleConfig, SampleOutput};
pub use tensor::Tensor;
pub use train::{AdamConfig, AdamState, TrainConfig, TrainReport, Weighting};
