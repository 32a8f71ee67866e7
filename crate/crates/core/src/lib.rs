//! Multi-echo gradient-echo MRI simulation and reconstruction.
//!
//! The pipeline: [`phantom`] builds ground truth and fully sampled k-space,
//! [`sampling`] produces undersampling masks (hand-designed or learned),
//! [`admm`] reconstructs with an unrolled ADMM network, [`training`] fits it,
//! and [`qsm`] turns reconstructed echoes into field and susceptibility maps.

// Validation is written as `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod container;
pub mod data;
pub mod dataset;
pub mod error;
pub mod forward_model;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod preview;
pub mod qsm;
pub mod sampling;
pub mod training;

pub use data::{CoilSensitivities, KSpaceData, MultiEchoImage};
pub use error::{ContainerError, Error, Result};
pub use megre_autodiff as autodiff;
